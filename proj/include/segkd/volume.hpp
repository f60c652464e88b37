#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "segkd/tensor.hpp"

namespace segkd {

// Floating-point image on a voxel grid with physical spacing in mm.
struct Volume {
  Tensor data;  // [1,D,H,W]
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  std::array<int64_t, 3> shape() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
};

// Integer class map over the same grid; values in [0, C).
struct LabelMap {
  std::vector<int32_t> labels;
  std::array<int64_t, 3> shape{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
  int32_t max_label() const;
};

}  // namespace segkd
