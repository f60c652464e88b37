#pragma once

#include <string>
#include <vector>

#include "segkd/infer.hpp"

namespace segkd {

struct LatencyStats {
  double median_s = 0.0;
  double p5_s = 0.0;
  double p95_s = 0.0;
  int64_t n_runs = 0;
};

struct BenchRow {
  std::string name;
  double alpha = 1.0;
  int64_t params = 0;
  double gflops = 0.0;                 // analytic, per supplied volume set
  int64_t peak_activation_bytes = 0;   // analytic estimate
  int64_t measured_peak_rss_bytes = 0; // process peak-resident, measured
  LatencyStats cpu_latency;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string cpu_model;
  int threads = 1;
  int cores = 0;

  std::string to_table() const;
  std::string to_delimited() const;
};

struct BenchConfig {
  int64_t n_runs = 5;   // measured runs per model, >= 5
  int64_t warmup = 2;   // discarded warm-up runs, >= 2
  int threads = 1;      // recorded; kernels are single-threaded
};

// Measures full predict() latency per model over the volume set, interleaving
// models run-by-run (A,B,A,B,...) to decorrelate thermal drift. Analytic
// capacity numbers are never mixed with measured ones.
BenchReport bench(const std::vector<const Network*>& models, const std::vector<std::string>& names,
                  const std::vector<Volume>& volumes, const SlidingWindowConfig& swcfg, const BenchConfig& cfg);

int64_t process_peak_rss_bytes();
std::string cpu_model_string();

}  // namespace segkd
