#pragma once

#include <cstdint>
#include <vector>

#include "segkd/volume.hpp"

namespace segkd {

enum class ShapeFamily { NestedEllipsoids, BlobsWithThinShells };

struct SyntheticTaskSpec {
  std::array<int64_t, 3> volume_size{64, 64, 64};
  int64_t num_classes = 3;
  int64_t num_train = 6;
  int64_t num_val = 2;
  ShapeFamily family = ShapeFamily::NestedEllipsoids;
  double noise_sigma = 0.1;
  uint64_t seed = 0;
};

struct Sample {
  Volume image;
  LabelMap labels;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<double> class_voxel_fraction;  // prevalence over all volumes
};

// Deterministic given seed. Every volume contains at least one voxel of
// every class; a degenerate draw is regenerated with perturbed parameters,
// failing after 100 attempts.
Dataset generate_dataset(const SyntheticTaskSpec& spec);

}  // namespace segkd
