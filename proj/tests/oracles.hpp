// Independent reference implementations used only by tests. These stay
// deliberately naive (nested loops, all-pairs scans) so they cannot share
// bugs with the library's optimized paths.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "segkd/nn_ops.hpp"
#include "segkd/volume.hpp"

namespace oracle {

using segkd::ConvSpec;
using segkd::Tensor;

inline Tensor naive_conv3d(const Tensor& input, const Tensor& w, const Tensor& b, const ConvSpec& s) {
  const auto is = std::array<int64_t, 3>{input.dim(1), input.dim(2), input.dim(3)};
  const auto os = s.output_size(is);
  Tensor out({s.out_channels, os[0], os[1], os[2]});
  for (int64_t co = 0; co < s.out_channels; ++co)
    for (int64_t oz = 0; oz < os[0]; ++oz)
      for (int64_t oy = 0; oy < os[1]; ++oy)
        for (int64_t ox = 0; ox < os[2]; ++ox) {
          double acc = b[co];
          for (int64_t ci = 0; ci < s.in_channels; ++ci)
            for (int64_t kz = 0; kz < s.kernel[0]; ++kz)
              for (int64_t ky = 0; ky < s.kernel[1]; ++ky)
                for (int64_t kx = 0; kx < s.kernel[2]; ++kx) {
                  const int64_t iz = oz * s.stride[0] - s.padding[0] + kz;
                  const int64_t iy = oy * s.stride[1] - s.padding[1] + ky;
                  const int64_t ix = ox * s.stride[2] - s.padding[2] + kx;
                  if (iz < 0 || iz >= is[0] || iy < 0 || iy >= is[1] || ix < 0 || ix >= is[2]) continue;
                  const double xv = input[((ci * is[0] + iz) * is[1] + iy) * is[2] + ix];
                  const double wv = w[(((co * s.in_channels + ci) * s.kernel[0] + kz) * s.kernel[1] + ky) * s.kernel[2] + kx];
                  acc += xv * wv;
                }
          out[((co * os[0] + oz) * os[1] + oy) * os[2] + ox] = static_cast<float>(acc);
        }
  return out;
}

inline Tensor naive_transposed_conv3d(const Tensor& input, const Tensor& w, const Tensor& b, const ConvSpec& s) {
  const auto is = std::array<int64_t, 3>{input.dim(1), input.dim(2), input.dim(3)};
  const auto os = s.transposed_output_size(is);
  Tensor out({s.out_channels, os[0], os[1], os[2]});
  for (int64_t co = 0; co < s.out_channels; ++co)
    for (int64_t i = 0; i < os[0] * os[1] * os[2]; ++i) out[co * os[0] * os[1] * os[2] + i] = b[co];
  for (int64_t ci = 0; ci < s.in_channels; ++ci)
    for (int64_t iz = 0; iz < is[0]; ++iz)
      for (int64_t iy = 0; iy < is[1]; ++iy)
        for (int64_t ix = 0; ix < is[2]; ++ix) {
          const double xv = input[((ci * is[0] + iz) * is[1] + iy) * is[2] + ix];
          for (int64_t co = 0; co < s.out_channels; ++co)
            for (int64_t kz = 0; kz < s.kernel[0]; ++kz)
              for (int64_t ky = 0; ky < s.kernel[1]; ++ky)
                for (int64_t kx = 0; kx < s.kernel[2]; ++kx) {
                  const int64_t oz = iz * s.stride[0] - s.padding[0] + kz;
                  const int64_t oy = iy * s.stride[1] - s.padding[1] + ky;
                  const int64_t ox = ix * s.stride[2] - s.padding[2] + kx;
                  if (oz < 0 || oz >= os[0] || oy < 0 || oy >= os[1] || ox < 0 || ox >= os[2]) continue;
                  const double wv = w[(((ci * s.out_channels + co) * s.kernel[0] + kz) * s.kernel[1] + ky) * s.kernel[2] + kx];
                  out[((co * os[0] + oz) * os[1] + oy) * os[2] + ox] += static_cast<float>(xv * wv);
                }
        }
  return out;
}

// Central finite differences of a scalar functional w.r.t. one tensor.
inline Tensor finite_diff(Tensor& x, const std::function<double()>& loss, double eps = 1e-3) {
  Tensor g(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const float orig = x[i];
    x[i] = static_cast<float>(orig + eps);
    const double up = loss();
    x[i] = static_cast<float>(orig - eps);
    const double down = loss();
    x[i] = orig;
    g[i] = static_cast<float>((up - down) / (2.0 * eps));
  }
  return g;
}

// Max entry difference relative to the gradient's own magnitude scale.
// Entrywise ratios are meaningless for near-zero entries because float32
// storage of intermediate activations injects noise of order 1e-7 * |value|
// into the finite-difference quotient.
inline double scaled_max_err(const Tensor& a, const Tensor& b) {
  double scale = 1e-8, worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    scale = std::max({scale, std::fabs(double(a[i])), std::fabs(double(b[i]))});
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(double(a[i]) - double(b[i])));
  return worst / scale;
}

// Max relative error with an absolute floor, for gradient checks.
inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-4) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::fabs(double(a[i])), std::fabs(double(b[i])), floor});
    worst = std::max(worst, std::fabs(double(a[i]) - double(b[i])) / denom);
  }
  return worst;
}

inline void fill_random(Tensor& t, std::mt19937_64& eng, double scale = 1.0) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double u = static_cast<double>(eng() >> 11) * (1.0 / 9007199254740992.0);
    t[i] = static_cast<float>((2.0 * u - 1.0) * scale);
  }
}

// All-pairs nearest-distance oracle between boundary voxel centers.
struct BruteSurface {
  std::vector<double> pred_to_ref, ref_to_pred;
};

inline std::vector<std::array<int64_t, 3>> brute_boundary(const segkd::LabelMap& m, int32_t cls) {
  const auto [d, h, w] = m.shape;
  auto fg = [&](int64_t z, int64_t y, int64_t x) {
    return m.labels[static_cast<size_t>((z * h + y) * w + x)] == cls;
  };
  std::vector<std::array<int64_t, 3>> out;
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (!fg(z, y, x)) continue;
        bool bnd = z == 0 || z == d - 1 || y == 0 || y == h - 1 || x == 0 || x == w - 1;
        if (!bnd)
          bnd = !fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
                !fg(z, y, x + 1);
        if (bnd) out.push_back({z, y, x});
      }
  return out;
}

inline BruteSurface brute_surface_distances(const segkd::LabelMap& pred, const segkd::LabelMap& ref, int32_t cls) {
  const auto bp = brute_boundary(pred, cls);
  const auto br = brute_boundary(ref, cls);
  const auto& sp = pred.spacing;
  auto nearest = [&](const std::array<int64_t, 3>& a, const std::vector<std::array<int64_t, 3>>& set) {
    double best = 1e300;
    for (const auto& b : set) {
      const double dz = static_cast<double>(a[0] - b[0]) * sp[0];
      const double dy = static_cast<double>(a[1] - b[1]) * sp[1];
      const double dx = static_cast<double>(a[2] - b[2]) * sp[2];
      best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
    }
    return best;
  };
  BruteSurface out;
  for (const auto& a : bp) out.pred_to_ref.push_back(nearest(a, br));
  for (const auto& a : br) out.ref_to_pred.push_back(nearest(a, bp));
  return out;
}

}  // namespace oracle
