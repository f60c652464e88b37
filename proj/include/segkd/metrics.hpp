#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segkd/volume.hpp"

namespace segkd {

struct SurfaceSpec {
  double nsd_tolerance_mm = 1.0;
  // Boundary extraction uses face-6 connectivity; recorded in report metadata.
};

struct ClassMetrics {
  std::optional<double> dice;
  std::optional<double> nsd;
  std::optional<double> hd95;
};

struct MetricsReport {
  std::map<int32_t, ClassMetrics> per_class;
  std::optional<double> mean_dice, mean_nsd, mean_hd95;
  int undefined_dice = 0, undefined_nsd = 0, undefined_hd95 = 0;
  double nsd_tolerance_mm = 1.0;
  bool include_background = false;

  std::string to_table() const;
  std::string to_delimited() const;  // tab-separated with a metadata header
};

// 2|P∩R| / (|P|+|R|); UNDEFINED when both empty, 0 when exactly one is.
std::optional<double> dice(const LabelMap& pred, const LabelMap& ref, int32_t cls);

// Nearest-opposite-surface distances in mm between boundary voxel centers
// (face-6 boundary definition). Throws if the class is empty on either side.
struct SurfaceDistances {
  std::vector<double> pred_to_ref;
  std::vector<double> ref_to_pred;
};
SurfaceDistances surface_distances(const LabelMap& pred, const LabelMap& ref, int32_t cls);

std::optional<double> nsd(const LabelMap& pred, const LabelMap& ref, int32_t cls, const SurfaceSpec& spec);
std::optional<double> hd95(const LabelMap& pred, const LabelMap& ref, int32_t cls);

// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double pct);

MetricsReport evaluate(const LabelMap& pred, const LabelMap& ref, const SurfaceSpec& spec,
                       bool include_background = false);

}  // namespace segkd
