// segkd: CPU-only distillation toolkit for 3D segmentation.
//
// Subcommands: gen-data, train, distill, infer, eval, bench, inspect.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "CLI11.hpp"
#include "segkd/bench.hpp"
#include "segkd/infer.hpp"
#include "segkd/kd.hpp"
#include "segkd/manifest.hpp"
#include "segkd/metrics.hpp"
#include "segkd/nifti.hpp"
#include "segkd/synth.hpp"
#include "segkd/trainer.hpp"
#include "segkd/unet.hpp"

namespace fs = std::filesystem;
using namespace segkd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

// Accepts "0.5" as well as "1/2"-style fractions.
double parse_alpha(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) return std::stod(s);
  const double num = std::stod(s.substr(0, slash));
  const double den = std::stod(s.substr(slash + 1));
  if (den == 0.0) throw CLI::ValidationError("--alpha", "fraction denominator is zero");
  return num / den;
}

BlendMode parse_blend(const std::string& s) {
  if (s == "gaussian") return BlendMode::Gaussian;
  if (s == "uniform") return BlendMode::Uniform;
  throw CLI::ValidationError("--blend", "expected 'gaussian' or 'uniform'");
}

std::string crc32_hex(const std::vector<uint8_t>& bytes) {
  const uint32_t crc = static_cast<uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

void write_with_hash(const fs::path& path, const std::vector<uint8_t>& bytes,
                     std::map<std::string, std::string>& manifest) {
  write_file(path.string(), bytes);
  manifest["artifact." + path.filename().string()] = crc32_hex(bytes);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_run_manifest(const fs::path& out_dir, std::map<std::string, std::string> kv) {
  write_text(out_dir / "manifest.txt", render_manifest(kv));
}

// ---- dataset on disk ------------------------------------------------------
//
// gen-data writes <split>_<index>_img.nii.gz / <split>_<index>_lbl.nii.gz;
// the loaders below accept any directory following that naming scheme.

std::vector<Sample> load_split(const fs::path& dir, const std::string& split) {
  std::vector<fs::path> imgs;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind(split + "_", 0) == 0 && name.find("_img.nii") != std::string::npos) imgs.push_back(e.path());
  }
  std::sort(imgs.begin(), imgs.end());
  std::vector<Sample> out;
  for (const auto& img : imgs) {
    std::string lbl = img.string();
    const auto pos = lbl.rfind("_img.nii");
    lbl.replace(pos, 8, "_lbl.nii");
    Sample s;
    s.image = read_volume(read_file(img.string()));
    s.labels = read_labelmap(read_file(lbl));
    if (s.labels.shape != s.image.shape())
      throw NiftiError(NiftiErrc::UnsupportedDims, 0, "image/label shape mismatch for " + img.string());
    out.push_back(std::move(s));
  }
  return out;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.train = load_split(dir, "train");
  d.val = load_split(dir, "val");
  if (d.train.empty()) throw NiftiError(NiftiErrc::UnsupportedDims, 0, "no train_*_img.nii* files in " + dir.string());
  int32_t classes = 0;
  for (const auto& s : d.train) classes = std::max(classes, s.labels.max_label() + 1);
  d.class_voxel_fraction.assign(static_cast<size_t>(classes), 0.0);
  int64_t total = 0;
  for (const auto& s : d.train) {
    for (int32_t v : s.labels.labels) d.class_voxel_fraction[static_cast<size_t>(v)] += 1.0;
    total += s.labels.numel();
  }
  for (double& f : d.class_voxel_fraction) f /= static_cast<double>(total);
  return d;
}

Network load_net(const std::string& path) { return load_checkpoint(read_file(path)); }

// ---- shared option bundles --------------------------------------------------

struct TrainOpts {
  std::string data_dir, out_dir = ".";
  std::string alpha = "1";
  int64_t epochs = 8, patches = 12, batch = 2, seed = 0;
  double lr = 0.01;
  int64_t patch = 64;
  int64_t classes = 0;  // 0: infer from data
};

void add_train_opts(CLI::App* cmd, TrainOpts& o) {
  cmd->add_option("--data-dir", o.data_dir, "dataset directory (gen-data layout)")->required();
  cmd->add_option("--out-dir", o.out_dir, "output directory");
  cmd->add_option("--alpha", o.alpha, "channel width scale, e.g. 0.5 or 1/2");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--patches-per-epoch", o.patches, "sampled patches per epoch");
  cmd->add_option("--batch", o.batch, "patches per optimizer step");
  cmd->add_option("--seed", o.seed, "RNG seed");
  cmd->add_option("--lr", o.lr, "initial learning rate");
  cmd->add_option("--patch", o.patch, "cubic training patch edge");
}

TrainRunConfig make_run(const TrainOpts& o, const Dataset& data) {
  int64_t classes = o.classes;
  if (classes == 0)
    for (const auto& s : data.train) classes = std::max<int64_t>(classes, s.labels.max_label() + 1);
  TrainRunConfig run;
  run.plan = default_plan(classes, parse_alpha(o.alpha));
  run.plan.patch_size = {o.patch, o.patch, o.patch};
  run.epochs = o.epochs;
  run.patches_per_epoch = o.patches;
  run.batch_size = o.batch;
  run.learning_rate = o.lr;
  run.seed = static_cast<uint64_t>(o.seed);
  return run;
}

void finish_training(const TrainOpts& o, const TrainRunConfig& run, const TrainResult& res,
                     std::map<std::string, std::string> extra) {
  fs::create_directories(o.out_dir);
  std::map<std::string, std::string> manifest = parse_manifest(run.plan.to_manifest());
  manifest["seed"] = std::to_string(run.seed);
  manifest["epochs"] = std::to_string(run.epochs);
  manifest["patches_per_epoch"] = std::to_string(run.patches_per_epoch);
  manifest["batch"] = std::to_string(run.batch_size);
  manifest["lr"] = format_double(run.learning_rate);
  manifest["data_dir"] = o.data_dir;
  for (auto& [k, v] : extra) manifest[k] = v;
  write_with_hash(fs::path(o.out_dir) / "model.ckpt", save_checkpoint(res.net), manifest);
  write_text(fs::path(o.out_dir) / "train_log.txt", res.log.to_lines());
  write_run_manifest(o.out_dir, manifest);
  std::cout << res.log.to_lines();
  std::cout << "checkpoint: " << (fs::path(o.out_dir) / "model.ckpt").string() << "\n";
  if (res.log.aborted_on_nan) std::cout << "warning: aborted on NaN; last finite epoch restored\n";
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_data(const SyntheticTaskSpec& spec, const std::string& family, const std::string& out_dir) {
  SyntheticTaskSpec s = spec;
  if (family == "blobs")
    s.family = ShapeFamily::BlobsWithThinShells;
  else if (family == "nested")
    s.family = ShapeFamily::NestedEllipsoids;
  else
    throw CLI::ValidationError("--family", "expected 'nested' or 'blobs'");
  const Dataset d = generate_dataset(s);
  fs::create_directories(out_dir);
  std::map<std::string, std::string> manifest{
      {"size", std::to_string(s.volume_size[0])},      {"classes", std::to_string(s.num_classes)},
      {"train", std::to_string(s.num_train)},          {"val", std::to_string(s.num_val)},
      {"noise_sigma", format_double(s.noise_sigma)},   {"seed", std::to_string(s.seed)},
      {"family", family},
  };
  const auto dump = [&](const std::vector<Sample>& split, const std::string& name) {
    for (size_t i = 0; i < split.size(); ++i) {
      char idx[16];
      std::snprintf(idx, sizeof(idx), "%03zu", i);
      write_with_hash(fs::path(out_dir) / (name + "_" + idx + "_img.nii.gz"),
                      write_volume(split[i].image, nullptr, true), manifest);
      write_with_hash(fs::path(out_dir) / (name + "_" + idx + "_lbl.nii.gz"),
                      write_labelmap(split[i].labels, nullptr, true), manifest);
    }
  };
  dump(d.train, "train");
  dump(d.val, "val");
  write_run_manifest(out_dir, manifest);
  std::cout << "wrote " << d.train.size() << " train + " << d.val.size() << " val volumes to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const TrainOpts& o) {
  const Dataset data = load_dataset(o.data_dir);
  const TrainRunConfig run = make_run(o, data);
  const TrainResult res = train(run, data);
  finish_training(o, run, res, {{"mode", "train"}});
  return kExitOk;
}

int cmd_distill(const TrainOpts& o, const std::string& teacher_path, double tau, double lambda) {
  const Dataset data = load_dataset(o.data_dir);
  Network teacher = load_net(teacher_path);
  teacher.freeze();
  TrainRunConfig run = make_run(o, data);
  run.plan.num_classes = teacher.plan().num_classes;
  run.teacher = &teacher;
  run.distill = DistillConfig{static_cast<float>(tau), static_cast<float>(lambda)};
  const TrainResult res = train(run, data);
  finish_training(o, run, res,
                  {{"mode", "distill"},
                   {"teacher", teacher_path},
                   {"teacher_crc32", crc32_hex(save_checkpoint(teacher))},
                   {"tau", format_double(tau)},
                   {"lambda", format_double(lambda)}});
  return kExitOk;
}

int cmd_infer(const std::string& ckpt, const std::string& input, const std::string& out_dir,
              const SlidingWindowConfig& swcfg, bool save_probs) {
  const Network net = load_net(ckpt);
  const Volume vol = read_volume(read_file(input));
  SlidingWindowConfig cfg = swcfg;
  const Prediction pred = predict(net, vol, cfg);
  fs::create_directories(out_dir);
  std::map<std::string, std::string> manifest{
      {"checkpoint", ckpt},
      {"input", input},
      {"overlap", format_double(cfg.overlap_fraction)},
      {"blend", cfg.blend == BlendMode::Gaussian ? "gaussian" : "uniform"},
      {"patch", std::to_string(cfg.patch_size[0])},
      {"analytic_flops", std::to_string(count_inference_cost(net, vol, cfg))},
  };
  write_with_hash(fs::path(out_dir) / "pred.nii.gz", write_labelmap(pred.labels, nullptr, true), manifest);
  if (save_probs) {
    Volume probs;
    probs.data = pred.prob_map;
    probs.spacing = vol.spacing;
    // Stored as one volume per class to stay within 3D single-frame files.
    const int64_t nvox = pred.labels.numel();
    for (int64_t c = 0; c < pred.prob_map.dim(0); ++c) {
      Volume pc;
      pc.spacing = vol.spacing;
      pc.data = Tensor({1, pred.prob_map.dim(1), pred.prob_map.dim(2), pred.prob_map.dim(3)});
      for (int64_t i = 0; i < nvox; ++i) pc.data[i] = pred.prob_map[c * nvox + i];
      write_with_hash(fs::path(out_dir) / ("prob_class" + std::to_string(c) + ".nii.gz"),
                      write_volume(pc, nullptr, true), manifest);
    }
  }
  write_run_manifest(out_dir, manifest);
  std::cout << "prediction: " << (fs::path(out_dir) / "pred.nii.gz").string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& pred_path, const std::string& ref_path, double nsd_tol_mm, bool include_bg,
             const std::string& out_dir) {
  const LabelMap pred = read_labelmap(read_file(pred_path));
  const LabelMap ref = read_labelmap(read_file(ref_path));
  const MetricsReport rep = evaluate(pred, ref, SurfaceSpec{nsd_tol_mm}, include_bg);
  std::cout << rep.to_table();
  if (rep.mean_dice) std::cout << "mean Dice " << rep.mean_dice.value() << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "metrics.tsv", rep.to_delimited());
    write_run_manifest(out_dir, {{"pred", pred_path}, {"ref", ref_path}, {"nsd_tol_mm", format_double(nsd_tol_mm)}});
  }
  return kExitOk;
}

int cmd_bench(const std::vector<std::string>& ckpts, const std::vector<std::string>& volume_paths,
              const std::string& data_dir, const SlidingWindowConfig& swcfg, const BenchConfig& bcfg,
              const std::string& out_dir) {
  std::vector<Network> nets;
  std::vector<std::string> names;
  for (const auto& p : ckpts) {
    nets.push_back(load_net(p));
    char label[64];
    std::snprintf(label, sizeof(label), "%s(a=%.4g)", fs::path(p).stem().string().c_str(), nets.back().plan().alpha);
    names.push_back(label);
  }
  std::vector<Volume> volumes;
  for (const auto& p : volume_paths) volumes.push_back(read_volume(read_file(p)));
  if (!data_dir.empty())
    for (const auto& s : load_split(data_dir, "val")) volumes.push_back(s.image);
  if (volumes.empty()) throw CLI::ValidationError("bench", "need --volume or --data-dir with val volumes");
  std::vector<const Network*> ptrs;
  for (const auto& n : nets) ptrs.push_back(&n);
  const BenchReport rep = bench(ptrs, names, volumes, swcfg, bcfg);
  std::cout << rep.to_table();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "bench.tsv", rep.to_delimited());
    std::map<std::string, std::string> manifest{{"runs", std::to_string(bcfg.n_runs)},
                                                {"warmup", std::to_string(bcfg.warmup)},
                                                {"threads", std::to_string(bcfg.threads)}};
    for (size_t i = 0; i < ckpts.size(); ++i) manifest["model." + std::to_string(i)] = ckpts[i];
    write_run_manifest(out_dir, manifest);
  }
  return kExitOk;
}

int cmd_inspect(const std::string& ckpt) {
  const Network net = load_net(ckpt);
  const CapacityReport cap = capacity(net.plan());
  std::cout << net.plan().to_manifest();
  std::cout << "seed=" << net.seed() << "\n";
  std::cout << "frozen=" << (net.frozen() ? 1 : 0) << "\n";
  std::cout << "params=" << cap.params << "\n";
  std::cout << "flops_per_patch=" << cap.flops_per_patch << "\n";
  std::cout << "gflops_per_patch=" << static_cast<double>(cap.flops_per_patch) / 1e9 << "\n";
  std::cout << "peak_activation_bytes=" << cap.peak_activation_bytes << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPU distillation toolkit for 3D medical image segmentation"};
  app.require_subcommand(1);

  // gen-data
  SyntheticTaskSpec gspec;
  std::string g_family = "nested", g_out = "data";
  int64_t g_size = 64;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled dataset");
  gen->add_option("--out-dir", g_out, "output directory");
  gen->add_option("--size", g_size, "cubic volume edge");
  gen->add_option("--classes", gspec.num_classes, "number of classes incl. background");
  gen->add_option("--train", gspec.num_train, "training volumes");
  gen->add_option("--val", gspec.num_val, "validation volumes");
  gen->add_option("--noise", gspec.noise_sigma, "intensity noise sigma");
  gen->add_option("--seed", gspec.seed, "RNG seed");
  gen->add_option("--family", g_family, "shape family: nested | blobs");

  // train
  TrainOpts topts;
  auto* tr = app.add_subcommand("train", "train a model from scratch");
  add_train_opts(tr, topts);

  // distill
  TrainOpts dopts;
  std::string d_teacher;
  double d_tau = 2.0, d_lambda = 1.0;
  auto* di = app.add_subcommand("distill", "train a student against a frozen teacher");
  add_train_opts(di, dopts);
  di->add_option("--teacher", d_teacher, "teacher checkpoint")->required();
  di->add_option("--tau", d_tau, "distillation temperature");
  di->add_option("--lambda", d_lambda, "distillation loss weight");

  // shared inference options
  std::string i_ckpt, i_input, i_out = "out";
  int64_t i_patch = 64;
  double i_overlap = 0.5;
  std::string i_blend = "gaussian";
  double e_nsd_tol = 1.0;
  int b_threads = 1;
  bool i_probs = false;
  auto* in = app.add_subcommand("infer", "sliding-window inference on a volume");
  in->add_option("--checkpoint", i_ckpt, "model checkpoint")->required();
  in->add_option("--input", i_input, "input volume (.nii/.nii.gz)")->required();
  in->add_option("--out-dir", i_out, "output directory");
  in->add_option("--patch", i_patch, "cubic patch edge");
  in->add_option("--overlap", i_overlap, "patch overlap fraction [0,1)");
  in->add_option("--blend", i_blend, "blend mode: gaussian | uniform");
  in->add_flag("--save-probs", i_probs, "also write per-class probability volumes");

  // eval
  std::string e_pred, e_ref, e_out;
  bool e_bg = false;
  auto* ev = app.add_subcommand("eval", "compare a prediction against a reference");
  ev->add_option("--pred", e_pred, "predicted label map")->required();
  ev->add_option("--ref", e_ref, "reference label map")->required();
  ev->add_option("--nsd-tol-mm", e_nsd_tol, "NSD surface tolerance in mm");
  ev->add_flag("--include-background", e_bg, "score class 0 as well");
  ev->add_option("--out-dir", e_out, "also write metrics.tsv here");

  // bench
  std::vector<std::string> b_ckpts, b_vols;
  std::string b_data, b_out, b_blend = "gaussian";
  int64_t b_runs = 5, b_warmup = 2, b_patch = 64;
  double b_overlap = 0.5;
  auto* be = app.add_subcommand("bench", "latency/capacity benchmark over checkpoints");
  be->add_option("--checkpoint", b_ckpts, "model checkpoint (repeatable)")->required();
  be->add_option("--volume", b_vols, "benchmark volume (repeatable)");
  be->add_option("--data-dir", b_data, "use this dataset's val volumes");
  be->add_option("--runs", b_runs, "measured runs per model (>= 5)");
  be->add_option("--warmup", b_warmup, "discarded warm-up runs (>= 2)");
  be->add_option("--threads", b_threads, "thread count recorded in the report");
  be->add_option("--patch", b_patch, "cubic patch edge");
  be->add_option("--overlap", b_overlap, "patch overlap fraction");
  be->add_option("--blend", b_blend, "blend mode: gaussian | uniform");
  be->add_option("--out-dir", b_out, "also write bench.tsv here");

  // inspect
  std::string s_ckpt;
  auto* ins = app.add_subcommand("inspect", "print a checkpoint's plan and capacity");
  ins->add_option("--checkpoint", s_ckpt, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      gspec.volume_size = {g_size, g_size, g_size};
      return cmd_gen_data(gspec, g_family, g_out);
    }
    if (tr->parsed()) return cmd_train(topts);
    if (di->parsed()) return cmd_distill(dopts, d_teacher, d_tau, d_lambda);
    if (in->parsed()) {
      SlidingWindowConfig cfg;
      cfg.patch_size = {i_patch, i_patch, i_patch};
      cfg.overlap_fraction = i_overlap;
      cfg.blend = parse_blend(i_blend);
      return cmd_infer(i_ckpt, i_input, i_out, cfg, i_probs);
    }
    if (ev->parsed()) return cmd_eval(e_pred, e_ref, e_nsd_tol, e_bg, e_out);
    if (be->parsed()) {
      SlidingWindowConfig cfg;
      cfg.patch_size = {b_patch, b_patch, b_patch};
      cfg.overlap_fraction = b_overlap;
      cfg.blend = parse_blend(b_blend);
      BenchConfig bcfg;
      bcfg.n_runs = b_runs;
      bcfg.warmup = b_warmup;
      bcfg.threads = b_threads;
      return cmd_bench(b_ckpts, b_vols, b_data, cfg, bcfg, b_out);
    }
    if (ins->parsed()) return cmd_inspect(s_ckpt);
    std::cerr << "no subcommand\n";
    return kExitUsage;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NiftiError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointIoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
