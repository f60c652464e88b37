#pragma once

#include "segkd/unet.hpp"
#include "segkd/volume.hpp"

namespace segkd {

enum class BlendMode { Uniform, Gaussian };

struct SlidingWindowConfig {
  std::array<int64_t, 3> patch_size{64, 64, 64};
  double overlap_fraction = 0.5;       // in [0,1)
  BlendMode blend = BlendMode::Gaussian;
  double gaussian_sigma_scale = 0.125;  // sigma = patch * scale per axis

  std::array<int64_t, 3> step() const;  // ceil(patch * (1 - overlap)), >= 1
};

struct Prediction {
  LabelMap labels;          // argmax, ties broken toward the lower class index
  Tensor prob_map;          // [C,D,H,W], rows sum to 1
};

// Patch-based sliding-window inference with reflective edge padding and
// blend-weighted probability averaging (tau = 1 softmax per patch).
Prediction predict(const Network& net, const Volume& vol, const SlidingWindowConfig& cfg);

// Patch count x analytic per-patch FLOPs; bookkeeping only, no measurement.
int64_t count_inference_cost(const Network& net, const Volume& vol, const SlidingWindowConfig& cfg);
int64_t count_patches(const std::array<int64_t, 3>& volume_size, const SlidingWindowConfig& cfg);

// Patch start offsets along one axis: multiples of step, clamped so the last
// patch ends exactly at the volume edge.
std::vector<int64_t> patch_positions(int64_t extent, int64_t patch, int64_t step);

}  // namespace segkd
