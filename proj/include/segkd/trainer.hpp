#pragma once

#include <optional>
#include <string>

#include "segkd/infer.hpp"
#include "segkd/kd.hpp"
#include "segkd/synth.hpp"
#include "segkd/unet.hpp"

namespace segkd {

struct TrainRunConfig {
  NetworkPlan plan;
  std::optional<DistillConfig> distill;   // present iff teacher is present
  const Network* teacher = nullptr;       // frozen; generates soft targets
  int64_t epochs = 8;
  int64_t batch_size = 2;
  int64_t patches_per_epoch = 12;
  double learning_rate = 0.01;
  double momentum = 0.9;
  uint64_t seed = 0;
  int64_t val_interval = 1;  // epochs between validation passes (>= 1)
};

struct EpochRecord {
  int64_t epoch = 0;
  double seg_loss = 0.0;
  double kd_loss = 0.0;
  double total = 0.0;
  double val_dice = 0.0;
  int64_t wall_ms = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int64_t student_forwards = 0;
  int64_t student_backwards = 0;
  int64_t teacher_forwards = 0;  // logged separately: KD-only cost
  bool aborted_on_nan = false;

  // Append-only line-delimited records.
  std::string to_lines() const;
};

struct TrainResult {
  Network net;
  TrainLog log;
};

// SGD with momentum over shuffled foreground-biased patches; axis-flip
// augmentation only. Bit-reproducible for a fixed (config, seed) at thread
// count 1. On a NaN loss the run aborts with the last finite epoch's
// weights restored.
TrainResult train(const TrainRunConfig& run, const Dataset& data);

// Mean validation Dice over foreground classes, via zero-overlap uniform
// sliding-window prediction.
double validation_dice(const Network& net, const Dataset& data);

struct ComparisonRow {
  std::string name;
  double alpha = 1.0;
  int64_t params = 0;
  double dice_mean = 0.0, dice_std = 0.0;
  double nsd_mean = 0.0;
  double hd95_mean = 0.0;
  int64_t seeds = 1;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::string to_table() const;
  std::string to_delimited() const;
};

// Teacher first, then Student / Student+KD at each scale, averaged over
// seeds under identical budgets.
ComparisonTable run_comparison_suite(const Dataset& data, const TrainRunConfig& proto,
                                     const std::vector<double>& alphas, const std::vector<uint64_t>& seeds,
                                     const DistillConfig& kd_cfg);

}  // namespace segkd
