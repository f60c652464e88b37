#include "segkd/infer.hpp"

#include <cmath>
#include <stdexcept>

#include "segkd/nn_ops.hpp"

namespace segkd {

namespace {

// Reflect index into [0, n) without repeating the edge sample.
int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

Tensor blend_weights(const std::array<int64_t, 3>& patch, const SlidingWindowConfig& cfg) {
  Tensor w({patch[0], patch[1], patch[2]});
  if (cfg.blend == BlendMode::Uniform) {
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = 1.0f;
    return w;
  }
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch[a]) * cfg.gaussian_sigma_scale;
    const double center = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    axis[a].resize(static_cast<size_t>(patch[a]));
    for (int64_t i = 0; i < patch[a]; ++i) {
      const double d = (static_cast<double>(i) - center) / sigma;
      axis[a][static_cast<size_t>(i)] = std::exp(-0.5 * d * d);
    }
  }
  int64_t idx = 0;
  for (int64_t z = 0; z < patch[0]; ++z)
    for (int64_t y = 0; y < patch[1]; ++y)
      for (int64_t x = 0; x < patch[2]; ++x, ++idx) {
        const double v = axis[0][static_cast<size_t>(z)] * axis[1][static_cast<size_t>(y)] *
                         axis[2][static_cast<size_t>(x)];
        w[idx] = static_cast<float>(std::max(v, 1e-8));
      }
  return w;
}

}  // namespace

std::array<int64_t, 3> SlidingWindowConfig::step() const {
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
    throw std::invalid_argument("overlap_fraction must be in [0,1)");
  std::array<int64_t, 3> s{};
  for (int a = 0; a < 3; ++a) {
    s[a] = static_cast<int64_t>(std::ceil(static_cast<double>(patch_size[a]) * (1.0 - overlap_fraction)));
    s[a] = std::max<int64_t>(s[a], 1);
  }
  return s;
}

std::vector<int64_t> patch_positions(int64_t extent, int64_t patch, int64_t step) {
  std::vector<int64_t> pos;
  for (int64_t p = 0;; p += step) {
    if (p + patch >= extent) {
      pos.push_back(extent - patch);
      break;
    }
    pos.push_back(p);
  }
  return pos;
}

int64_t count_patches(const std::array<int64_t, 3>& volume_size, const SlidingWindowConfig& cfg) {
  const auto st = cfg.step();
  int64_t n = 1;
  for (int a = 0; a < 3; ++a) {
    const int64_t extent = std::max(volume_size[a], cfg.patch_size[a]);
    n *= static_cast<int64_t>(patch_positions(extent, cfg.patch_size[a], st[a]).size());
  }
  return n;
}

Prediction predict(const Network& net, const Volume& vol, const SlidingWindowConfig& cfg) {
  const auto vs = vol.shape();
  const auto& patch = cfg.patch_size;
  // Reflective padding can supply at most extent-1 voxels per side.
  for (int a = 0; a < 3; ++a) {
    if (vs[a] < patch[a] && patch[a] > 2 * vs[a] - 1)
      throw std::invalid_argument("volume axis " + std::to_string(a) + " of size " + std::to_string(vs[a]) +
                                  " is too small for patch " + std::to_string(patch[a]) +
                                  "; required minimum is " + std::to_string((patch[a] + 1) / 2));
  }
  std::array<int64_t, 3> padded{std::max(vs[0], patch[0]), std::max(vs[1], patch[1]), std::max(vs[2], patch[2])};

  Tensor padded_vol({1, padded[0], padded[1], padded[2]});
  for (int64_t z = 0; z < padded[0]; ++z)
    for (int64_t y = 0; y < padded[1]; ++y)
      for (int64_t x = 0; x < padded[2]; ++x) {
        const int64_t sz = reflect(z, vs[0]), sy = reflect(y, vs[1]), sx = reflect(x, vs[2]);
        padded_vol[(z * padded[1] + y) * padded[2] + x] = vol.data[(sz * vs[1] + sy) * vs[2] + sx];
      }

  const int64_t num_classes = net.plan().num_classes;
  const auto st = cfg.step();
  const Tensor weights = blend_weights(patch, cfg);
  const int64_t pvox = patch[0] * patch[1] * patch[2];
  const int64_t ovox = padded[0] * padded[1] * padded[2];

  // Fixed-order accumulation: patches visited in deterministic raster order.
  std::vector<double> prob_accum(static_cast<size_t>(num_classes * ovox), 0.0);
  std::vector<double> weight_accum(static_cast<size_t>(ovox), 0.0);

  const auto pz = patch_positions(padded[0], patch[0], st[0]);
  const auto py = patch_positions(padded[1], patch[1], st[1]);
  const auto px = patch_positions(padded[2], patch[2], st[2]);
  Tensor patch_in({1, patch[0], patch[1], patch[2]});
  for (int64_t z0 : pz)
    for (int64_t y0 : py)
      for (int64_t x0 : px) {
        for (int64_t z = 0; z < patch[0]; ++z)
          for (int64_t y = 0; y < patch[1]; ++y)
            for (int64_t x = 0; x < patch[2]; ++x)
              patch_in[(z * patch[1] + y) * patch[2] + x] =
                  padded_vol[((z0 + z) * padded[1] + (y0 + y)) * padded[2] + (x0 + x)];
        Tensor probs = softmax_channels(net.forward(patch_in), 1.0f);
        for (int64_t c = 0; c < num_classes; ++c)
          for (int64_t z = 0; z < patch[0]; ++z)
            for (int64_t y = 0; y < patch[1]; ++y)
              for (int64_t x = 0; x < patch[2]; ++x) {
                const int64_t pi = (z * patch[1] + y) * patch[2] + x;
                const int64_t oi = ((z0 + z) * padded[1] + (y0 + y)) * padded[2] + (x0 + x);
                prob_accum[static_cast<size_t>(c * ovox + oi)] +=
                    static_cast<double>(probs[c * pvox + pi]) * weights[pi];
                if (c == 0) weight_accum[static_cast<size_t>(oi)] += weights[pi];
              }
      }

  Prediction out;
  out.prob_map = Tensor({num_classes, vs[0], vs[1], vs[2]});
  out.labels.shape = vs;
  out.labels.spacing = vol.spacing;
  out.labels.labels.assign(static_cast<size_t>(vs[0] * vs[1] * vs[2]), 0);
  const int64_t nvox = vs[0] * vs[1] * vs[2];
  for (int64_t z = 0; z < vs[0]; ++z)
    for (int64_t y = 0; y < vs[1]; ++y)
      for (int64_t x = 0; x < vs[2]; ++x) {
        const int64_t oi = (z * padded[1] + y) * padded[2] + x;  // padded regions discarded
        const int64_t vi = (z * vs[1] + y) * vs[2] + x;
        const double wsum = weight_accum[static_cast<size_t>(oi)];
        int32_t best = 0;
        float best_p = -1.0f;
        for (int64_t c = 0; c < num_classes; ++c) {
          const float p = static_cast<float>(prob_accum[static_cast<size_t>(c * ovox + oi)] / wsum);
          out.prob_map[c * nvox + vi] = p;
          if (p > best_p) {
            best_p = p;
            best = static_cast<int32_t>(c);
          }
        }
        out.labels.labels[static_cast<size_t>(vi)] = best;
      }
  return out;
}

int64_t count_inference_cost(const Network& net, const Volume& vol, const SlidingWindowConfig& cfg) {
  NetworkPlan plan = net.plan();
  plan.patch_size = cfg.patch_size;
  return count_patches(vol.shape(), cfg) * capacity(plan).flops_per_patch;
}

}  // namespace segkd
