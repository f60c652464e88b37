#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "segkd/infer.hpp"
#include "segkd/kd.hpp"
#include "segkd/metrics.hpp"
#include "segkd/nifti.hpp"
#include "segkd/trainer.hpp"
#include "segkd/unet.hpp"

namespace py = pybind11;
using namespace segkd;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& arr) {
  std::vector<int64_t> shape(static_cast<size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
  Tensor t(shape);
  std::memcpy(t.data(), arr.data(), sizeof(float) * static_cast<size_t>(t.numel()));
  return t;
}

FloatArray from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray arr(shape);
  std::memcpy(arr.mutable_data(), t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
  return arr;
}

LabelMap to_labelmap(const IntArray& arr, const std::array<double, 3>& spacing) {
  if (arr.ndim() != 3) throw std::invalid_argument("label array must be 3-D [D,H,W]");
  LabelMap lm;
  lm.shape = {arr.shape(0), arr.shape(1), arr.shape(2)};
  lm.spacing = spacing;
  lm.labels.assign(arr.data(), arr.data() + arr.size());
  return lm;
}

IntArray from_labelmap(const LabelMap& lm) {
  IntArray arr({py::ssize_t(lm.shape[0]), py::ssize_t(lm.shape[1]), py::ssize_t(lm.shape[2])});
  std::memcpy(arr.mutable_data(), lm.labels.data(), sizeof(int32_t) * lm.labels.size());
  return arr;
}

Volume to_volume(const FloatArray& arr, const std::array<double, 3>& spacing) {
  if (arr.ndim() != 3) throw std::invalid_argument("volume array must be 3-D [D,H,W]");
  Volume v;
  v.data = Tensor({1, arr.shape(0), arr.shape(1), arr.shape(2)});
  v.spacing = spacing;
  std::memcpy(v.data.data(), arr.data(), sizeof(float) * static_cast<size_t>(v.data.numel()));
  return v;
}

py::dict report_to_dict(const MetricsReport& rep) {
  py::dict per_class;
  const auto opt = [](const std::optional<double>& v) -> py::object {
    return v ? py::cast(*v) : py::none();
  };
  for (const auto& [c, m] : rep.per_class) {
    py::dict d;
    d["dice"] = opt(m.dice);
    d["nsd"] = opt(m.nsd);
    d["hd95"] = opt(m.hd95);
    per_class[py::int_(c)] = d;
  }
  py::dict out;
  out["per_class"] = per_class;
  out["mean_dice"] = opt(rep.mean_dice);
  out["mean_nsd"] = opt(rep.mean_nsd);
  out["mean_hd95"] = opt(rep.mean_hd95);
  out["nsd_tolerance_mm"] = rep.nsd_tolerance_mm;
  return out;
}

}  // namespace

PYBIND11_MODULE(segkd_core, m) {
  m.doc() = "CPU kernels, models, and metrics for 3D segmentation distillation";

  py::register_exception<NiftiError>(m, "NiftiError");
  py::register_exception<CheckpointIoError>(m, "CheckpointError");

  py::class_<NetworkPlan>(m, "NetworkPlan")
      .def(py::init([](int64_t num_classes, double alpha, int64_t num_stages, int64_t base_width, int64_t max_width,
                       int64_t convs_per_stage, int64_t patch) {
             NetworkPlan p = default_plan(num_classes, alpha);
             p.num_stages = num_stages;
             p.base_width = base_width;
             p.max_width = max_width;
             p.convs_per_stage = convs_per_stage;
             p.patch_size = {patch, patch, patch};
             p.validate();
             return p;
           }),
           py::arg("num_classes"), py::arg("alpha") = 1.0, py::arg("num_stages") = 4, py::arg("base_width") = 16,
           py::arg("max_width") = 128, py::arg("convs_per_stage") = 2, py::arg("patch") = 64)
      .def_readonly("num_classes", &NetworkPlan::num_classes)
      .def_readonly("alpha", &NetworkPlan::alpha)
      .def("stage_width", &NetworkPlan::stage_width)
      .def("manifest", &NetworkPlan::to_manifest);

  py::class_<CapacityReport>(m, "CapacityReport")
      .def_readonly("params", &CapacityReport::params)
      .def_readonly("flops_per_patch", &CapacityReport::flops_per_patch)
      .def_readonly("peak_activation_bytes", &CapacityReport::peak_activation_bytes);
  m.def("capacity", &capacity, py::arg("plan"));

  py::class_<Network>(m, "Network")
      .def_static("build", &Network::build, py::arg("plan"), py::arg("seed"))
      .def_property_readonly("plan", &Network::plan)
      .def_property_readonly("seed", &Network::seed)
      .def_property_readonly("frozen", &Network::frozen)
      .def("freeze", &Network::freeze)
      .def("param_count", &Network::param_count)
      .def("forward",
           [](const Network& net, const FloatArray& x) { return from_tensor(net.forward(to_tensor(x))); },
           py::arg("input"), "Forward pass on a [C_in,D,H,W] float32 array; returns [C,D,H,W] logits.")
      .def("save_bytes",
           [](const Network& net) {
             const auto bytes = save_checkpoint(net);
             return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
           })
      .def("save", [](const Network& net, const std::string& path) { write_file(path, save_checkpoint(net)); },
           py::arg("path"));

  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(read_file(path)); }, py::arg("path"));
  m.def("load_checkpoint_bytes", [](const py::bytes& b) {
    const std::string s = b;
    return load_checkpoint(std::vector<uint8_t>(s.begin(), s.end()));
  });

  m.def(
      "softmax",
      [](const FloatArray& logits, double tau) { return from_tensor(softmax_channels(to_tensor(logits), float(tau))); },
      py::arg("logits"), py::arg("tau") = 1.0, "Channel softmax over a [C,...] float32 array.");

  m.def(
      "conv3d",
      [](const FloatArray& x, const FloatArray& w, const FloatArray& b, int64_t stride, int64_t padding) {
        const Tensor wt = to_tensor(w);
        const ConvSpec spec{wt.dim(1), wt.dim(0), {wt.dim(2), wt.dim(3), wt.dim(4)},
                            {stride, stride, stride}, {padding, padding, padding}};
        return from_tensor(conv3d_forward(to_tensor(x), wt, to_tensor(b), spec));
      },
      py::arg("input"), py::arg("weights"), py::arg("bias"), py::arg("stride") = 1, py::arg("padding") = 1,
      "Dense 3-D convolution; input [Cin,D,H,W], weights [Cout,Cin,kd,kh,kw].");

  m.def(
      "kd_loss",
      [](const FloatArray& student, const FloatArray& teacher, double tau) {
        DistillConfig cfg;
        cfg.temperature = float(tau);
        auto [loss, grad] = kd_loss(to_tensor(student), to_tensor(teacher), cfg);
        return py::make_tuple(loss, from_tensor(grad));
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("tau") = 2.0,
      "Temperature-softened KL distillation loss and its gradient w.r.t. the student logits.");

  m.def(
      "seg_loss",
      [](const FloatArray& logits, const IntArray& labels) {
        auto [loss, grad] = seg_loss(to_tensor(logits), to_labelmap(labels, {1, 1, 1}), DistillConfig{});
        return py::make_tuple(loss, from_tensor(grad));
      },
      py::arg("logits"), py::arg("labels"), "Soft Dice + cross-entropy loss and gradient.");

  m.def(
      "total_loss",
      [](const FloatArray& student, const FloatArray& teacher, const IntArray& labels, double tau, double lam) {
        DistillConfig cfg;
        cfg.temperature = float(tau);
        cfg.kd_weight = float(lam);
        const Tensor t = to_tensor(teacher);
        const LossBreakdown lb = total_loss(to_tensor(student), &t, to_labelmap(labels, {1, 1, 1}), cfg);
        py::dict out;
        out["seg_loss"] = lb.seg_loss;
        out["kd_loss"] = lb.kd_loss;
        out["total"] = lb.total;
        out["grad"] = from_tensor(lb.grad_logits);
        return out;
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"), py::arg("tau") = 2.0,
      py::arg("lam") = 1.0);

  m.def(
      "predict",
      [](const Network& net, const FloatArray& vol, const std::array<double, 3>& spacing, int64_t patch,
         double overlap, const std::string& blend) {
        SlidingWindowConfig cfg;
        cfg.patch_size = {patch, patch, patch};
        cfg.overlap_fraction = overlap;
        cfg.blend = blend == "uniform" ? BlendMode::Uniform : BlendMode::Gaussian;
        const Prediction pred = predict(net, to_volume(vol, spacing), cfg);
        return py::make_tuple(from_labelmap(pred.labels), from_tensor(pred.prob_map));
      },
      py::arg("net"), py::arg("volume"), py::arg("spacing") = std::array<double, 3>{1, 1, 1}, py::arg("patch") = 64,
      py::arg("overlap") = 0.5, py::arg("blend") = "gaussian",
      "Sliding-window inference; returns (labels [D,H,W] int32, probs [C,D,H,W] float32).");

  m.def(
      "evaluate",
      [](const IntArray& pred, const IntArray& ref, const std::array<double, 3>& spacing, double nsd_tol_mm,
         bool include_background) {
        return report_to_dict(
            evaluate(to_labelmap(pred, spacing), to_labelmap(ref, spacing), SurfaceSpec{nsd_tol_mm}, include_background));
      },
      py::arg("pred"), py::arg("ref"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("nsd_tol_mm") = 1.0, py::arg("include_background") = false,
      "Dice/NSD/HD95 report as nested dicts; undefined metrics map to None.");

  m.def(
      "read_volume",
      [](const std::string& path) {
        const Volume v = read_volume(read_file(path));
        FloatArray arr({py::ssize_t(v.data.dim(1)), py::ssize_t(v.data.dim(2)), py::ssize_t(v.data.dim(3))});
        std::memcpy(arr.mutable_data(), v.data.data(), sizeof(float) * size_t(v.data.numel()));
        return py::make_tuple(arr, v.spacing);
      },
      py::arg("path"), "Read a .nii/.nii.gz volume; returns ([D,H,W] float32, spacing).");

  m.def(
      "read_labelmap",
      [](const std::string& path) {
        const LabelMap lm = read_labelmap(read_file(path));
        return py::make_tuple(from_labelmap(lm), lm.spacing);
      },
      py::arg("path"));

  m.def(
      "write_volume",
      [](const std::string& path, const FloatArray& vol, const std::array<double, 3>& spacing, bool gzip) {
        write_file(path, write_volume(to_volume(vol, spacing), nullptr, gzip));
      },
      py::arg("path"), py::arg("volume"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("gzip") = true);

  m.def(
      "write_labelmap",
      [](const std::string& path, const IntArray& labels, const std::array<double, 3>& spacing, bool gzip) {
        write_file(path, write_labelmap(to_labelmap(labels, spacing), nullptr, gzip));
      },
      py::arg("path"), py::arg("labels"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("gzip") = true);

  m.def(
      "generate_dataset",
      [](int64_t size, int64_t classes, int64_t n_train, int64_t n_val, double noise, uint64_t seed,
         const std::string& family) {
        SyntheticTaskSpec spec;
        spec.volume_size = {size, size, size};
        spec.num_classes = classes;
        spec.num_train = n_train;
        spec.num_val = n_val;
        spec.noise_sigma = noise;
        spec.seed = seed;
        spec.family = family == "blobs" ? ShapeFamily::BlobsWithThinShells : ShapeFamily::NestedEllipsoids;
        const Dataset d = generate_dataset(spec);
        const auto dump = [](const std::vector<Sample>& split) {
          py::list out;
          for (const auto& s : split) {
            FloatArray img({py::ssize_t(s.image.data.dim(1)), py::ssize_t(s.image.data.dim(2)),
                            py::ssize_t(s.image.data.dim(3))});
            std::memcpy(img.mutable_data(), s.image.data.data(), sizeof(float) * size_t(s.image.data.numel()));
            out.append(py::make_tuple(img, from_labelmap(s.labels)));
          }
          return out;
        };
        py::dict out;
        out["train"] = dump(d.train);
        out["val"] = dump(d.val);
        out["class_voxel_fraction"] = d.class_voxel_fraction;
        return out;
      },
      py::arg("size") = 64, py::arg("classes") = 3, py::arg("n_train") = 6, py::arg("n_val") = 2,
      py::arg("noise") = 0.1, py::arg("seed") = 0, py::arg("family") = "nested");
}
