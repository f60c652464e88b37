#pragma once

#include "segkd/tensor.hpp"
#include "segkd/volume.hpp"

namespace segkd {

struct DistillConfig {
  float temperature = 2.0f;  // tau
  float kd_weight = 1.0f;    // lambda
  float dice_smooth = 1e-5f;
  bool dice_include_background = true;
};

struct LossBreakdown {
  double seg_loss = 0.0;
  double kd_loss = 0.0;
  double total = 0.0;
  Tensor grad_logits;
};

// Voxel-wise KL distillation loss, tau^2-scaled and averaged over the voxel
// domain; the teacher side is treated as a constant. The gradient w.r.t. the
// student logits is (tau/|omega|) * (p_S - p_T); the tau^2 loss factor and
// the 1/tau chain-rule factor have already been combined here.
std::pair<double, Tensor> kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                                  const DistillConfig& cfg);

// Soft Dice (mean over classes, on tau=1 softmax probabilities against
// one-hot labels) plus mean voxel cross-entropy, with analytic gradient.
std::pair<double, Tensor> seg_loss(const Tensor& student_logits, const LabelMap& labels, const DistillConfig& cfg);

LossBreakdown total_loss(const Tensor& student_logits, const Tensor* teacher_logits, const LabelMap& labels,
                         const DistillConfig& cfg);

}  // namespace segkd
