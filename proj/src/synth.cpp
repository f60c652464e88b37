#include "segkd/synth.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace segkd {

namespace {

double uniform(std::mt19937_64& eng, double lo, double hi) {
  const double u = static_cast<double>(eng() >> 11) * (1.0 / 9007199254740992.0);
  return lo + u * (hi - lo);
}

double gaussian(std::mt19937_64& eng) {
  double u1 = uniform(eng, 0.0, 1.0);
  if (u1 < 1e-300) u1 = 1e-300;
  const double u2 = uniform(eng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Nested ellipsoids: class k occupies ellipsoid k minus ellipsoid k+1, so
// label k+1 sits strictly inside label k.
void draw_nested_ellipsoids(std::mt19937_64& eng, const SyntheticTaskSpec& spec, LabelMap& lm) {
  const auto [d, h, w] = spec.volume_size;
  const int64_t fg_classes = spec.num_classes - 1;
  const std::array<double, 3> center{uniform(eng, 0.40, 0.60) * static_cast<double>(d),
                                     uniform(eng, 0.40, 0.60) * static_cast<double>(h),
                                     uniform(eng, 0.40, 0.60) * static_cast<double>(w)};
  std::array<double, 3> outer{uniform(eng, 0.28, 0.38) * static_cast<double>(d),
                              uniform(eng, 0.28, 0.38) * static_cast<double>(h),
                              uniform(eng, 0.28, 0.38) * static_cast<double>(w)};
  const double shrink = uniform(eng, 0.52, 0.62);
  std::fill(lm.labels.begin(), lm.labels.end(), 0);
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dz = (static_cast<double>(z) - center[0]);
        const double dy = (static_cast<double>(y) - center[1]);
        const double dx = (static_cast<double>(x) - center[2]);
        int32_t label = 0;
        double az = outer[0], ay = outer[1], ax = outer[2];
        for (int64_t k = 1; k <= fg_classes; ++k) {
          const double r = (dz / az) * (dz / az) + (dy / ay) * (dy / ay) + (dx / ax) * (dx / ax);
          if (r <= 1.0)
            label = static_cast<int32_t>(k);
          else
            break;
          az *= shrink;
          ay *= shrink;
          ax *= shrink;
        }
        lm.labels[static_cast<size_t>((z * h + y) * w + x)] = label;
      }
}

// Solid blobs wrapped in thin shells: odd classes are shells around the
// even-class cores, exercising boundary-sensitive metrics.
void draw_blobs_with_shells(std::mt19937_64& eng, const SyntheticTaskSpec& spec, LabelMap& lm) {
  const auto [d, h, w] = spec.volume_size;
  const int64_t fg_classes = spec.num_classes - 1;
  std::fill(lm.labels.begin(), lm.labels.end(), 0);
  const int64_t num_blobs = (fg_classes + 1) / 2;
  for (int64_t b = 0; b < num_blobs; ++b) {
    const std::array<double, 3> center{uniform(eng, 0.25, 0.75) * static_cast<double>(d),
                                       uniform(eng, 0.25, 0.75) * static_cast<double>(h),
                                       uniform(eng, 0.25, 0.75) * static_cast<double>(w)};
    const double radius = uniform(eng, 0.12, 0.20) * static_cast<double>(std::min({d, h, w}));
    const double shell = std::max(1.5, radius * 0.25);
    const int32_t core_label = static_cast<int32_t>(2 * b + 1);
    const int32_t shell_label = (2 * b + 2 <= fg_classes) ? static_cast<int32_t>(2 * b + 2) : 0;
    for (int64_t z = 0; z < d; ++z)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const double dz = static_cast<double>(z) - center[0];
          const double dy = static_cast<double>(y) - center[1];
          const double dx = static_cast<double>(x) - center[2];
          const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
          auto& cell = lm.labels[static_cast<size_t>((z * h + y) * w + x)];
          if (r <= radius)
            cell = core_label;
          else if (shell_label != 0 && r <= radius + shell && cell == 0)
            cell = shell_label;
        }
  }
}

bool all_classes_present(const LabelMap& lm, int64_t num_classes) {
  std::vector<bool> seen(static_cast<size_t>(num_classes), false);
  for (int32_t v : lm.labels) seen[static_cast<size_t>(v)] = true;
  for (bool s : seen)
    if (!s) return false;
  return true;
}

Sample make_sample(std::mt19937_64& eng, const SyntheticTaskSpec& spec) {
  const auto [d, h, w] = spec.volume_size;
  Sample s;
  s.labels.shape = spec.volume_size;
  s.labels.spacing = {1.0, 1.0, 1.0};
  s.labels.labels.assign(static_cast<size_t>(d * h * w), 0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    if (spec.family == ShapeFamily::NestedEllipsoids)
      draw_nested_ellipsoids(eng, spec, s.labels);
    else
      draw_blobs_with_shells(eng, spec, s.labels);
    if (all_classes_present(s.labels, spec.num_classes)) {
      s.image.data = Tensor({1, d, h, w});
      s.image.spacing = {1.0, 1.0, 1.0};
      for (int64_t i = 0; i < s.image.data.numel(); ++i) {
        const double base = static_cast<double>(s.labels.labels[static_cast<size_t>(i)]);
        const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * gaussian(eng) : 0.0;
        s.image.data[i] = static_cast<float>(base + noise);
      }
      return s;
    }
  }
  throw std::runtime_error("synthetic volume generation failed: a class stayed empty after 100 attempts");
}

}  // namespace

Dataset generate_dataset(const SyntheticTaskSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("synthetic task needs >= 2 classes");
  if (spec.num_train < 1 || spec.num_val < 0) throw std::invalid_argument("invalid dataset sizes");
  std::mt19937_64 eng(spec.seed);
  Dataset ds;
  std::vector<int64_t> counts(static_cast<size_t>(spec.num_classes), 0);
  int64_t total = 0;
  for (int64_t i = 0; i < spec.num_train + spec.num_val; ++i) {
    Sample s = make_sample(eng, spec);
    for (int32_t v : s.labels.labels) ++counts[static_cast<size_t>(v)];
    total += s.labels.numel();
    if (i < spec.num_train)
      ds.train.push_back(std::move(s));
    else
      ds.val.push_back(std::move(s));
  }
  for (int64_t c = 0; c < spec.num_classes; ++c)
    ds.class_voxel_fraction.push_back(static_cast<double>(counts[static_cast<size_t>(c)]) /
                                      static_cast<double>(total));
  return ds;
}

}  // namespace segkd
