#include "segkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace segkd {

namespace {

constexpr double kInf = 1e15;

void check_comparable(const LabelMap& pred, const LabelMap& ref) {
  if (pred.shape != ref.shape)
    throw std::invalid_argument("label maps have different shapes");
  if (pred.spacing != ref.spacing)
    throw std::invalid_argument("label maps have different spacings");
}

int64_t class_volume(const LabelMap& m, int32_t cls) {
  int64_t n = 0;
  for (int32_t v : m.labels)
    if (v == cls) ++n;
  return n;
}

// Foreground voxels with a face-adjacent background (or volume-edge) neighbor.
std::vector<uint8_t> boundary_mask(const LabelMap& m, int32_t cls) {
  const auto [d, h, w] = m.shape;
  std::vector<uint8_t> out(static_cast<size_t>(d * h * w), 0);
  auto fg = [&](int64_t z, int64_t y, int64_t x) { return m.labels[static_cast<size_t>((z * h + y) * w + x)] == cls; };
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (!fg(z, y, x)) continue;
        const bool edge = z == 0 || z == d - 1 || y == 0 || y == h - 1 || x == 0 || x == w - 1;
        bool bnd = edge;
        if (!bnd)
          bnd = !fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
                !fg(z, y, x + 1);
        if (bnd) out[static_cast<size_t>((z * h + y) * w + x)] = 1;
      }
  return out;
}

// 1D squared distance transform (lower envelope of parabolas), sample
// positions i * h.
void dt1d(std::vector<double>& f, int64_t n, int64_t stride, int64_t offset, double h, std::vector<double>& scratch,
          std::vector<int64_t>& v, std::vector<double>& z) {
  scratch.resize(static_cast<size_t>(n));
  v.resize(static_cast<size_t>(n));
  z.resize(static_cast<size_t>(n + 1));
  auto x = [&](int64_t i) { return static_cast<double>(i) * h; };
  int64_t k = 0;
  v[0] = 0;
  z[0] = -kInf * 10;
  z[1] = kInf * 10;
  for (int64_t q = 1; q < n; ++q) {
    const double fq = f[static_cast<size_t>(offset + q * stride)];
    double s;
    while (true) {
      const double fv = f[static_cast<size_t>(offset + v[static_cast<size_t>(k)] * stride)];
      s = ((fq + x(q) * x(q)) - (fv + x(v[static_cast<size_t>(k)]) * x(v[static_cast<size_t>(k)]))) /
          (2.0 * x(q) - 2.0 * x(v[static_cast<size_t>(k)]));
      if (s <= z[static_cast<size_t>(k)] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k + 1)] = kInf * 10;
  }
  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k + 1)] < x(q)) ++k;
    const double dx = x(q) - x(v[static_cast<size_t>(k)]);
    scratch[static_cast<size_t>(q)] = dx * dx + f[static_cast<size_t>(offset + v[static_cast<size_t>(k)] * stride)];
  }
  for (int64_t q = 0; q < n; ++q) f[static_cast<size_t>(offset + q * stride)] = scratch[static_cast<size_t>(q)];
}

// Exact Euclidean squared distance (mm^2) to the nearest set voxel center.
std::vector<double> edt_squared(const std::vector<uint8_t>& seeds, const std::array<int64_t, 3>& shape,
                                const std::array<double, 3>& spacing) {
  const auto [d, h, w] = shape;
  std::vector<double> f(seeds.size());
  for (size_t i = 0; i < seeds.size(); ++i) f[i] = seeds[i] ? 0.0 : kInf;
  std::vector<double> scratch, z;
  std::vector<int64_t> v;
  for (int64_t zz = 0; zz < d; ++zz)
    for (int64_t yy = 0; yy < h; ++yy) dt1d(f, w, 1, (zz * h + yy) * w, spacing[2], scratch, v, z);
  for (int64_t zz = 0; zz < d; ++zz)
    for (int64_t xx = 0; xx < w; ++xx) dt1d(f, h, w, zz * h * w + xx, spacing[1], scratch, v, z);
  for (int64_t yy = 0; yy < h; ++yy)
    for (int64_t xx = 0; xx < w; ++xx) dt1d(f, d, h * w, yy * w + xx, spacing[0], scratch, v, z);
  return f;
}

std::vector<double> sample_distances(const std::vector<uint8_t>& from_boundary, const std::vector<double>& to_edt_sq) {
  std::vector<double> out;
  for (size_t i = 0; i < from_boundary.size(); ++i)
    if (from_boundary[i]) out.push_back(std::sqrt(to_edt_sq[i]));
  return out;
}

std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "UNDEFINED";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

std::optional<double> dice(const LabelMap& pred, const LabelMap& ref, int32_t cls) {
  check_comparable(pred, ref);
  int64_t p = 0, r = 0, inter = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool ip = pred.labels[i] == cls, ir = ref.labels[i] == cls;
    p += ip;
    r += ir;
    inter += ip && ir;
  }
  if (p == 0 && r == 0) return std::nullopt;
  if (p == 0 || r == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + r);
}

SurfaceDistances surface_distances(const LabelMap& pred, const LabelMap& ref, int32_t cls) {
  check_comparable(pred, ref);
  if (class_volume(pred, cls) == 0 || class_volume(ref, cls) == 0)
    throw std::domain_error("surface_distances: class " + std::to_string(cls) + " is empty on one side");
  const auto bp = boundary_mask(pred, cls);
  const auto br = boundary_mask(ref, cls);
  const auto edt_p = edt_squared(bp, pred.shape, pred.spacing);
  const auto edt_r = edt_squared(br, ref.shape, ref.spacing);
  SurfaceDistances out;
  out.pred_to_ref = sample_distances(bp, edt_r);
  out.ref_to_pred = sample_distances(br, edt_p);
  return out;
}

std::optional<double> nsd(const LabelMap& pred, const LabelMap& ref, int32_t cls, const SurfaceSpec& spec) {
  check_comparable(pred, ref);
  if (!(spec.nsd_tolerance_mm > 0.0)) throw std::invalid_argument("nsd tolerance must be > 0");
  const bool pe = class_volume(pred, cls) == 0, re = class_volume(ref, cls) == 0;
  if (pe && re) return std::nullopt;
  if (pe || re) return 0.0;
  const auto sd = surface_distances(pred, ref, cls);
  int64_t within = 0;
  for (double d : sd.pred_to_ref) within += d <= spec.nsd_tolerance_mm;
  for (double d : sd.ref_to_pred) within += d <= spec.nsd_tolerance_mm;
  return static_cast<double>(within) / static_cast<double>(sd.pred_to_ref.size() + sd.ref_to_pred.size());
}

std::optional<double> hd95(const LabelMap& pred, const LabelMap& ref, int32_t cls) {
  check_comparable(pred, ref);
  if (class_volume(pred, cls) == 0 || class_volume(ref, cls) == 0) return std::nullopt;
  auto sd = surface_distances(pred, ref, cls);
  std::vector<double> pooled = std::move(sd.pred_to_ref);
  pooled.insert(pooled.end(), sd.ref_to_pred.begin(), sd.ref_to_pred.end());
  return percentile(std::move(pooled), 95.0);
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile of empty list");
  std::sort(values.begin(), values.end());
  const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

MetricsReport evaluate(const LabelMap& pred, const LabelMap& ref, const SurfaceSpec& spec, bool include_background) {
  check_comparable(pred, ref);
  MetricsReport rep;
  rep.nsd_tolerance_mm = spec.nsd_tolerance_mm;
  rep.include_background = include_background;
  const int32_t num_classes = std::max(pred.max_label(), ref.max_label()) + 1;
  double sd = 0, sn = 0, sh = 0;
  int nd = 0, nn = 0, nh = 0;
  for (int32_t c = include_background ? 0 : 1; c < num_classes; ++c) {
    ClassMetrics cm;
    cm.dice = dice(pred, ref, c);
    cm.nsd = nsd(pred, ref, c, spec);
    cm.hd95 = hd95(pred, ref, c);
    if (cm.dice) {
      sd += *cm.dice;
      ++nd;
    } else
      ++rep.undefined_dice;
    if (cm.nsd) {
      sn += *cm.nsd;
      ++nn;
    } else
      ++rep.undefined_nsd;
    if (cm.hd95) {
      sh += *cm.hd95;
      ++nh;
    } else
      ++rep.undefined_hd95;
    rep.per_class[c] = cm;
  }
  if (nd) rep.mean_dice = sd / nd;
  if (nn) rep.mean_nsd = sn / nn;
  if (nh) rep.mean_hd95 = sh / nh;
  return rep;
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << "nsd_tolerance_mm=" << nsd_tolerance_mm << " connectivity=face-6 background="
     << (include_background ? "included" : "excluded") << "\n";
  os << "class      dice      nsd       hd95_mm\n";
  char buf[128];
  for (const auto& [c, m] : per_class) {
    std::snprintf(buf, sizeof(buf), "%-10d %-9s %-9s %s\n", c, fmt_metric(m.dice).c_str(), fmt_metric(m.nsd).c_str(),
                  fmt_metric(m.hd95).c_str());
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-10s %-9s %-9s %s\n", "mean", fmt_metric(mean_dice).c_str(),
                fmt_metric(mean_nsd).c_str(), fmt_metric(mean_hd95).c_str());
  os << buf;
  os << "undefined: dice=" << undefined_dice << " nsd=" << undefined_nsd << " hd95=" << undefined_hd95 << "\n";
  return os.str();
}

std::string MetricsReport::to_delimited() const {
  std::ostringstream os;
  os << "# nsd_tolerance_mm=" << nsd_tolerance_mm << "\n";
  os << "# connectivity=face-6\n";
  os << "# background=" << (include_background ? "included" : "excluded") << "\n";
  os << "class\tdice\tnsd\thd95_mm\n";
  for (const auto& [c, m] : per_class)
    os << c << "\t" << fmt_metric(m.dice) << "\t" << fmt_metric(m.nsd) << "\t" << fmt_metric(m.hd95) << "\n";
  os << "mean\t" << fmt_metric(mean_dice) << "\t" << fmt_metric(mean_nsd) << "\t" << fmt_metric(mean_hd95) << "\n";
  return os.str();
}

}  // namespace segkd
