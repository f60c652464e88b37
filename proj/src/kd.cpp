#include "segkd/kd.hpp"

#include "segkd/nn_ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace segkd {

namespace {

void check_logits(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(0) < 2)
    throw std::invalid_argument("logits must be [C,D,H,W] with C >= 2, got " + shape_str(logits.shape()));
}

// Row-stable log-softmax over the class axis for one voxel.
void log_softmax_voxel(const Tensor& logits, int64_t nvox, int64_t v, double inv_t, std::vector<double>& out) {
  const int64_t c = logits.dim(0);
  double mx = -1e300;
  for (int64_t ch = 0; ch < c; ++ch) {
    out[static_cast<size_t>(ch)] = static_cast<double>(logits[ch * nvox + v]) * inv_t;
    mx = std::max(mx, out[static_cast<size_t>(ch)]);
  }
  double denom = 0.0;
  for (int64_t ch = 0; ch < c; ++ch) denom += std::exp(out[static_cast<size_t>(ch)] - mx);
  const double log_denom = mx + std::log(denom);
  for (int64_t ch = 0; ch < c; ++ch) out[static_cast<size_t>(ch)] -= log_denom;
}

}  // namespace

std::pair<double, Tensor> kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                                  const DistillConfig& cfg) {
  check_logits(student_logits);
  if (!student_logits.same_shape(teacher_logits))
    throw std::invalid_argument("kd_loss: student shape " + shape_str(student_logits.shape()) +
                                " != teacher shape " + shape_str(teacher_logits.shape()));
  if (!(cfg.temperature > 0.0f)) throw std::invalid_argument("kd_loss: temperature must be > 0");

  const int64_t c = student_logits.dim(0);
  const int64_t nvox = student_logits.numel() / c;
  const double tau = cfg.temperature;
  const double inv_t = 1.0 / tau;

  Tensor grad(student_logits.shape());
  std::vector<double> log_ps(static_cast<size_t>(c)), log_pt(static_cast<size_t>(c));
  double loss = 0.0;
  const double grad_scale = tau / static_cast<double>(nvox);
  for (int64_t v = 0; v < nvox; ++v) {
    log_softmax_voxel(student_logits, nvox, v, inv_t, log_ps);
    log_softmax_voxel(teacher_logits, nvox, v, inv_t, log_pt);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double pt = std::exp(log_pt[static_cast<size_t>(ch)]);
      const double ps = std::exp(log_ps[static_cast<size_t>(ch)]);
      loss += pt * (log_pt[static_cast<size_t>(ch)] - log_ps[static_cast<size_t>(ch)]);
      grad[ch * nvox + v] = static_cast<float>(grad_scale * (ps - pt));
    }
  }
  loss *= tau * tau / static_cast<double>(nvox);
  return {loss, std::move(grad)};
}

std::pair<double, Tensor> seg_loss(const Tensor& student_logits, const LabelMap& labels, const DistillConfig& cfg) {
  check_logits(student_logits);
  const int64_t c = student_logits.dim(0);
  const int64_t nvox = student_logits.numel() / c;
  if (labels.numel() != nvox)
    throw std::invalid_argument("seg_loss: label map has " + std::to_string(labels.numel()) + " voxels, logits have " +
                                std::to_string(nvox));
  for (int64_t v = 0; v < nvox; ++v) {
    const int32_t y = labels.labels[static_cast<size_t>(v)];
    if (y < 0 || y >= c)
      throw std::invalid_argument("seg_loss: label " + std::to_string(y) + " out of range [0," + std::to_string(c) +
                                  ") at voxel " + std::to_string(v));
  }

  // tau = 1 probabilities.
  Tensor probs = softmax_channels(student_logits, 1.0f);

  // Cross-entropy.
  double ce = 0.0;
  std::vector<double> log_p(static_cast<size_t>(c));
  Tensor grad(student_logits.shape());
  for (int64_t v = 0; v < nvox; ++v) {
    log_softmax_voxel(student_logits, nvox, v, 1.0, log_p);
    const int32_t y = labels.labels[static_cast<size_t>(v)];
    ce -= log_p[static_cast<size_t>(y)];
    for (int64_t ch = 0; ch < c; ++ch) {
      const double p = probs[ch * nvox + v];
      grad[ch * nvox + v] = static_cast<float>((p - (ch == y ? 1.0 : 0.0)) / static_cast<double>(nvox));
    }
  }
  ce /= static_cast<double>(nvox);

  // Soft Dice over classes (background included unless configured out).
  const int64_t c0 = cfg.dice_include_background ? 0 : 1;
  const int64_t nclasses = c - c0;
  const double eps = cfg.dice_smooth;
  std::vector<double> num(static_cast<size_t>(c), 0.0), den(static_cast<size_t>(c), 0.0);
  for (int64_t ch = c0; ch < c; ++ch) {
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (int64_t v = 0; v < nvox; ++v) {
      const double p = probs[ch * nvox + v];
      psum += p;
      if (labels.labels[static_cast<size_t>(v)] == ch) {
        inter += p;
        ysum += 1.0;
      }
    }
    num[static_cast<size_t>(ch)] = 2.0 * inter + eps;
    den[static_cast<size_t>(ch)] = psum + ysum + eps;
  }
  double dice_loss = 0.0;
  for (int64_t ch = c0; ch < c; ++ch)
    dice_loss += 1.0 - num[static_cast<size_t>(ch)] / den[static_cast<size_t>(ch)];
  dice_loss /= static_cast<double>(nclasses);

  // Dice gradient, chained through the tau=1 softmax.
  std::vector<double> dl_dp(static_cast<size_t>(c));
  for (int64_t v = 0; v < nvox; ++v) {
    const int32_t y = labels.labels[static_cast<size_t>(v)];
    double dot = 0.0;
    for (int64_t ch = 0; ch < c; ++ch) {
      double d = 0.0;
      if (ch >= c0) {
        const double yh = (ch == y) ? 1.0 : 0.0;
        const double dc = den[static_cast<size_t>(ch)];
        d = -(2.0 * yh * dc - num[static_cast<size_t>(ch)]) / (dc * dc) / static_cast<double>(nclasses);
      }
      dl_dp[static_cast<size_t>(ch)] = d;
      dot += d * probs[ch * nvox + v];
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      const double p = probs[ch * nvox + v];
      grad[ch * nvox + v] += static_cast<float>(p * (dl_dp[static_cast<size_t>(ch)] - dot));
    }
  }

  return {ce + dice_loss, std::move(grad)};
}

LossBreakdown total_loss(const Tensor& student_logits, const Tensor* teacher_logits, const LabelMap& labels,
                         const DistillConfig& cfg) {
  LossBreakdown out;
  auto [sl, sg] = seg_loss(student_logits, labels, cfg);
  out.seg_loss = sl;
  out.grad_logits = std::move(sg);
  if (teacher_logits) {
    auto [kl, kg] = kd_loss(student_logits, *teacher_logits, cfg);
    out.kd_loss = kl;
    const float lambda = cfg.kd_weight;
    for (int64_t i = 0; i < out.grad_logits.numel(); ++i) out.grad_logits[i] += lambda * kg[i];
  }
  out.total = out.seg_loss + static_cast<double>(cfg.kd_weight) * out.kd_loss;
  return out;
}

}  // namespace segkd
