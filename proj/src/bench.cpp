#include "segkd/bench.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "segkd/metrics.hpp"

namespace segkd {

int64_t process_peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<int64_t>(ru.ru_maxrss) * 1024;  // linux reports KiB
}

std::string cpu_model_string() {
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(colon + 2);
    }
  }
  return "unknown";
}

BenchReport bench(const std::vector<const Network*>& models, const std::vector<std::string>& names,
                  const std::vector<Volume>& volumes, const SlidingWindowConfig& swcfg, const BenchConfig& cfg) {
  if (models.empty() || volumes.empty()) throw std::invalid_argument("bench needs >= 1 model and >= 1 volume");
  if (models.size() != names.size()) throw std::invalid_argument("bench: one name per model");
  if (cfg.n_runs < 5 || cfg.warmup < 2) throw std::invalid_argument("bench needs >= 5 runs after >= 2 warm-ups");
  const int64_t classes = models[0]->plan().num_classes;
  for (const Network* m : models)
    if (m->plan().num_classes != classes)
      throw std::invalid_argument("bench models have differing num_classes; results would not be comparable");

  const auto run_once = [&](const Network* m) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& v : volumes) predict(*m, v, swcfg);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  std::vector<std::vector<double>> samples(models.size());
  // Interleaved order: A,B,...,A,B,... including warm-ups.
  for (int64_t r = 0; r < cfg.warmup + cfg.n_runs; ++r)
    for (size_t mi = 0; mi < models.size(); ++mi) {
      const double t = run_once(models[mi]);
      if (r >= cfg.warmup) samples[mi].push_back(t);
    }

  BenchReport rep;
  rep.cpu_model = cpu_model_string();
  rep.threads = cfg.threads;
  rep.cores = static_cast<int>(std::thread::hardware_concurrency());
  for (size_t mi = 0; mi < models.size(); ++mi) {
    NetworkPlan plan = models[mi]->plan();
    plan.patch_size = swcfg.patch_size;
    const CapacityReport cap = capacity(plan);
    BenchRow row;
    row.name = names[mi];
    row.alpha = plan.alpha;
    row.params = cap.params;
    double flops = 0.0;
    for (const auto& v : volumes)
      flops += static_cast<double>(count_inference_cost(*models[mi], v, swcfg));
    row.gflops = flops / 1e9;
    row.peak_activation_bytes = cap.peak_activation_bytes;
    row.measured_peak_rss_bytes = process_peak_rss_bytes();
    row.cpu_latency.n_runs = static_cast<int64_t>(samples[mi].size());
    row.cpu_latency.median_s = percentile(samples[mi], 50.0);
    row.cpu_latency.p5_s = percentile(samples[mi], 5.0);
    row.cpu_latency.p95_s = percentile(samples[mi], 95.0);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string BenchReport::to_table() const {
  std::ostringstream os;
  os << "cpu: " << cpu_model << " (" << cores << " cores, " << threads << " thread(s) used)\n";
  os << "model                alpha   params      gflops    act_mb    rss_mb    cpu_median_s  p5        p95\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-20s %-7.4g %-11lld %-9.2f %-9.1f %-9.1f %-13.4f %-9.4f %-9.4f\n",
                  r.name.c_str(), r.alpha, static_cast<long long>(r.params), r.gflops,
                  static_cast<double>(r.peak_activation_bytes) / 1048576.0,
                  static_cast<double>(r.measured_peak_rss_bytes) / 1048576.0, r.cpu_latency.median_s,
                  r.cpu_latency.p5_s, r.cpu_latency.p95_s);
    os << buf;
  }
  return os.str();
}

std::string BenchReport::to_delimited() const {
  std::ostringstream os;
  os << "# cpu_model=" << cpu_model << "\n# cores=" << cores << "\n# threads=" << threads << "\n";
  os << "model\talpha\tparams\tgflops\tpeak_activation_bytes\tmeasured_peak_rss_bytes\tcpu_median_s\tp5_s\tp95_s\tn_"
        "runs\n";
  for (const auto& r : rows)
    os << r.name << "\t" << r.alpha << "\t" << r.params << "\t" << r.gflops << "\t" << r.peak_activation_bytes << "\t"
       << r.measured_peak_rss_bytes << "\t" << r.cpu_latency.median_s << "\t" << r.cpu_latency.p5_s << "\t"
       << r.cpu_latency.p95_s << "\t" << r.cpu_latency.n_runs << "\n";
  return os.str();
}

}  // namespace segkd
