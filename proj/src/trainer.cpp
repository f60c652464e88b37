#include "segkd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>

#include "segkd/metrics.hpp"

namespace segkd {

namespace {

struct PatchPair {
  Tensor image;   // [1,pd,ph,pw]
  LabelMap labels;
};

PatchPair crop(const Sample& s, const std::array<int64_t, 3>& origin, const std::array<int64_t, 3>& size) {
  const auto vs = s.image.shape();
  PatchPair p;
  p.image = Tensor({1, size[0], size[1], size[2]});
  p.labels.shape = size;
  p.labels.spacing = s.labels.spacing;
  p.labels.labels.resize(static_cast<size_t>(size[0] * size[1] * size[2]));
  int64_t idx = 0;
  for (int64_t z = 0; z < size[0]; ++z)
    for (int64_t y = 0; y < size[1]; ++y)
      for (int64_t x = 0; x < size[2]; ++x, ++idx) {
        const int64_t src = ((origin[0] + z) * vs[1] + (origin[1] + y)) * vs[2] + (origin[2] + x);
        p.image[idx] = s.image.data[src];
        p.labels.labels[static_cast<size_t>(idx)] = s.labels.labels[static_cast<size_t>(src)];
      }
  return p;
}

void flip_axis(PatchPair& p, int axis) {
  const auto sz = p.labels.shape;
  PatchPair out = p;
  int64_t idx = 0;
  for (int64_t z = 0; z < sz[0]; ++z)
    for (int64_t y = 0; y < sz[1]; ++y)
      for (int64_t x = 0; x < sz[2]; ++x, ++idx) {
        const int64_t fz = axis == 0 ? sz[0] - 1 - z : z;
        const int64_t fy = axis == 1 ? sz[1] - 1 - y : y;
        const int64_t fx = axis == 2 ? sz[2] - 1 - x : x;
        const int64_t src = (fz * sz[1] + fy) * sz[2] + fx;
        out.image[idx] = p.image[src];
        out.labels.labels[static_cast<size_t>(idx)] = p.labels.labels[static_cast<size_t>(src)];
      }
  p = std::move(out);
}

// Per-volume voxel indices of each foreground class, built once.
std::vector<std::vector<std::vector<int64_t>>> foreground_index(const Dataset& data, int64_t num_classes) {
  std::vector<std::vector<std::vector<int64_t>>> fg(data.train.size());
  for (size_t i = 0; i < data.train.size(); ++i) {
    fg[i].resize(static_cast<size_t>(num_classes));
    const auto& lbl = data.train[i].labels.labels;
    for (size_t v = 0; v < lbl.size(); ++v)
      if (lbl[v] > 0 && lbl[v] < num_classes) fg[i][static_cast<size_t>(lbl[v])].push_back(static_cast<int64_t>(v));
  }
  return fg;
}

}  // namespace

double validation_dice(const Network& net, const Dataset& data) {
  if (data.val.empty()) return 0.0;
  SlidingWindowConfig cfg;
  cfg.patch_size = net.plan().patch_size;
  cfg.overlap_fraction = 0.0;
  cfg.blend = BlendMode::Uniform;
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& s : data.val) {
    Prediction pred = predict(net, s.image, cfg);
    MetricsReport rep = evaluate(pred.labels, s.labels, SurfaceSpec{});
    if (rep.mean_dice) {
      sum += *rep.mean_dice;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

TrainResult train(const TrainRunConfig& run, const Dataset& data) {
  run.plan.validate();
  if (run.distill.has_value() != (run.teacher != nullptr))
    throw std::invalid_argument("distill config and teacher checkpoint must be present together");
  if (run.teacher) {
    if (!run.teacher->frozen()) throw std::invalid_argument("teacher must be frozen before distillation");
    if (run.teacher->plan().num_classes != run.plan.num_classes)
      throw std::invalid_argument("teacher has " + std::to_string(run.teacher->plan().num_classes) +
                                  " classes, student plan has " + std::to_string(run.plan.num_classes));
  }
  if (data.train.empty()) throw std::invalid_argument("empty training set");

  Network net = Network::build(run.plan, run.seed);
  std::vector<Tensor> momentum_buf, grad_accum;
  net.visit_params([&](const Tensor& t) {
    momentum_buf.emplace_back(t.shape());
    grad_accum.emplace_back(t.shape());
  });

  const auto fg = foreground_index(data, run.plan.num_classes);
  std::mt19937_64 eng(run.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto pick = [&](uint64_t n) { return static_cast<int64_t>(eng() % n); };

  TrainLog log;
  DistillConfig cfg = run.distill.value_or(DistillConfig{});
  std::vector<uint8_t> last_good = save_checkpoint(net);

  for (int64_t epoch = 0; epoch < run.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double lr = run.learning_rate;
    if (epoch >= (run.epochs * 3) / 4) lr *= 0.1;  // 10x decay at 75% of the budget

    double seg_sum = 0.0, kd_sum = 0.0, total_sum = 0.0;
    int64_t in_batch = 0;
    bool nan_hit = false;

    for (int64_t step = 0; step < run.patches_per_epoch && !nan_hit; ++step) {
      const int64_t vol_idx = pick(data.train.size());
      const auto& sample = data.train[static_cast<size_t>(vol_idx)];
      const auto vs = sample.image.shape();
      const auto& ps = run.plan.patch_size;
      std::array<int64_t, 3> origin{};
      // 50% foreground-biased oversampling so rare classes receive signal.
      bool centered = false;
      if (eng() % 2 == 0) {
        const int64_t cls = 1 + pick(static_cast<uint64_t>(run.plan.num_classes - 1));
        const auto& voxels = fg[static_cast<size_t>(vol_idx)][static_cast<size_t>(cls)];
        if (!voxels.empty()) {
          const int64_t v = voxels[static_cast<size_t>(pick(voxels.size()))];
          const std::array<int64_t, 3> at{v / (vs[1] * vs[2]), (v / vs[2]) % vs[1], v % vs[2]};
          for (int a = 0; a < 3; ++a)
            origin[a] = std::clamp<int64_t>(at[a] - ps[a] / 2, 0, vs[a] - ps[a]);
          centered = true;
        }
      }
      if (!centered)
        for (int a = 0; a < 3; ++a) origin[a] = vs[a] > ps[a] ? pick(static_cast<uint64_t>(vs[a] - ps[a] + 1)) : 0;

      PatchPair patch = crop(sample, origin, ps);
      for (int a = 0; a < 3; ++a)
        if (eng() % 2 == 1) flip_axis(patch, a);

      Tensor teacher_logits;
      const Tensor* teacher_ptr = nullptr;
      if (run.teacher) {
        teacher_logits = run.teacher->forward(patch.image);
        teacher_ptr = &teacher_logits;
        ++log.teacher_forwards;
      }

      Network::Cache cache;
      Tensor logits = net.forward_cached(patch.image, cache);
      ++log.student_forwards;
      LossBreakdown lb = total_loss(logits, teacher_ptr, patch.labels, cfg);
      if (!std::isfinite(lb.total)) {
        nan_hit = true;
        break;
      }
      seg_sum += lb.seg_loss;
      kd_sum += lb.kd_loss;
      total_sum += lb.total;

      GradientSet gs = net.backward(cache, lb.grad_logits);
      ++log.student_backwards;
      for (size_t i = 0; i < gs.grads.size(); ++i)
        for (int64_t j = 0; j < gs.grads[i].numel(); ++j) grad_accum[i][j] += gs.grads[i][j];
      ++in_batch;

      if (in_batch == run.batch_size || step == run.patches_per_epoch - 1) {
        const float scale = 1.0f / static_cast<float>(in_batch);
        size_t pi = 0;
        net.visit_params_mutable([&](Tensor& p) {
          Tensor& m = momentum_buf[pi];
          Tensor& g = grad_accum[pi];
          for (int64_t j = 0; j < p.numel(); ++j) {
            m[j] = static_cast<float>(run.momentum) * m[j] + g[j] * scale;
            p[j] -= static_cast<float>(lr) * m[j];
            g[j] = 0.0f;
          }
          ++pi;
        });
        in_batch = 0;
      }
    }

    if (nan_hit) {
      log.aborted_on_nan = true;
      net = load_checkpoint(last_good);  // retain the last finite epoch
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double steps = static_cast<double>(run.patches_per_epoch);
    rec.seg_loss = seg_sum / steps;
    rec.kd_loss = kd_sum / steps;
    rec.total = total_sum / steps;
    if ((epoch + 1) % std::max<int64_t>(run.val_interval, 1) == 0 || epoch == run.epochs - 1)
      rec.val_dice = validation_dice(net, data);
    rec.wall_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
    last_good = save_checkpoint(net);
  }

  return {std::move(net), std::move(log)};
}

std::string TrainLog::to_lines() const {
  std::ostringstream os;
  char buf[256];
  for (const auto& e : epochs) {
    // wall_ms is kept out of the serialized record so logs from repeated
    // runs of the same manifest compare byte-identical.
    std::snprintf(buf, sizeof(buf), "epoch=%lld seg_loss=%.6f kd_loss=%.6f total=%.6f val_dice=%.6f\n",
                  static_cast<long long>(e.epoch), e.seg_loss, e.kd_loss, e.total, e.val_dice);
    os << buf;
  }
  os << "student_forwards=" << student_forwards << " student_backwards=" << student_backwards
     << " teacher_forwards=" << teacher_forwards << " aborted_on_nan=" << (aborted_on_nan ? 1 : 0) << "\n";
  return os.str();
}

namespace {

struct EvalStats {
  double dice = 0.0, nsd = 0.0, hd95 = 0.0;
};

EvalStats evaluate_on_val(const Network& net, const Dataset& data) {
  SlidingWindowConfig cfg;
  cfg.patch_size = net.plan().patch_size;
  cfg.overlap_fraction = 0.0;
  cfg.blend = BlendMode::Uniform;
  EvalStats st;
  int64_t n = 0;
  for (const auto& s : data.val) {
    Prediction pred = predict(net, s.image, cfg);
    MetricsReport rep = evaluate(pred.labels, s.labels, SurfaceSpec{});
    st.dice += rep.mean_dice.value_or(0.0);
    st.nsd += rep.mean_nsd.value_or(0.0);
    st.hd95 += rep.mean_hd95.value_or(0.0);
    ++n;
  }
  if (n) {
    st.dice /= static_cast<double>(n);
    st.nsd /= static_cast<double>(n);
    st.hd95 /= static_cast<double>(n);
  }
  return st;
}

std::string scale_name(double alpha) {
  if (alpha == 1.0) return "x1";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "x%.4g", alpha);
  return buf;
}

}  // namespace

ComparisonTable run_comparison_suite(const Dataset& data, const TrainRunConfig& proto,
                                     const std::vector<double>& alphas, const std::vector<uint64_t>& seeds,
                                     const DistillConfig& kd_cfg) {
  if (seeds.empty()) throw std::invalid_argument("comparison suite needs >= 1 seed");
  ComparisonTable table;

  TrainRunConfig teacher_run = proto;
  teacher_run.plan.alpha = 1.0;
  teacher_run.distill.reset();
  teacher_run.teacher = nullptr;
  TrainResult teacher = train(teacher_run, data);
  teacher.net.freeze();

  {
    EvalStats st = evaluate_on_val(teacher.net, data);
    table.rows.push_back({"Teacher", 1.0, capacity(teacher_run.plan).params, st.dice, 0.0, st.nsd, st.hd95, 1});
  }

  for (double alpha : alphas) {
    for (int kd = 0; kd < 2; ++kd) {
      std::vector<double> dices, nsds, hds;
      for (uint64_t seed : seeds) {
        TrainRunConfig r = proto;
        r.plan.alpha = alpha;
        r.seed = seed;
        if (kd) {
          r.distill = kd_cfg;
          r.teacher = &teacher.net;
        } else {
          r.distill.reset();
          r.teacher = nullptr;
        }
        TrainResult res = train(r, data);
        EvalStats st = evaluate_on_val(res.net, data);
        dices.push_back(st.dice);
        nsds.push_back(st.nsd);
        hds.push_back(st.hd95);
      }
      double mean = 0.0;
      for (double d : dices) mean += d;
      mean /= static_cast<double>(dices.size());
      double var = 0.0;
      for (double d : dices) var += (d - mean) * (d - mean);
      const double sd = dices.size() > 1 ? std::sqrt(var / static_cast<double>(dices.size() - 1)) : 0.0;
      double nsd_mean = 0.0, hd_mean = 0.0;
      for (double v : nsds) nsd_mean += v;
      for (double v : hds) hd_mean += v;
      NetworkPlan p = proto.plan;
      p.alpha = alpha;
      table.rows.push_back({std::string(kd ? "Student+KD " : "Student ") + scale_name(alpha), alpha,
                            capacity(p).params, mean, sd, nsd_mean / static_cast<double>(nsds.size()),
                            hd_mean / static_cast<double>(hds.size()), static_cast<int64_t>(seeds.size())});
    }
  }
  return table;
}

std::string ComparisonTable::to_table() const {
  std::ostringstream os;
  os << "model                alpha   params      dice      dice_sd   nsd       hd95\n";
  char buf[192];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-20s %-7.4g %-11lld %-9.4f %-9.4f %-9.4f %-9.4f\n", r.name.c_str(), r.alpha,
                  static_cast<long long>(r.params), r.dice_mean, r.dice_std, r.nsd_mean, r.hd95_mean);
    os << buf;
  }
  return os.str();
}

std::string ComparisonTable::to_delimited() const {
  std::ostringstream os;
  os << "model\talpha\tparams\tdice\tdice_sd\tnsd\thd95\tseeds\n";
  for (const auto& r : rows)
    os << r.name << "\t" << r.alpha << "\t" << r.params << "\t" << r.dice_mean << "\t" << r.dice_std << "\t"
       << r.nsd_mean << "\t" << r.hd95_mean << "\t" << r.seeds << "\n";
  return os.str();
}

}  // namespace segkd
