#include "segkd/nn_ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace segkd {

namespace {

using MatrixXd = Eigen::MatrixXd;
using RowMajorMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int64_t kChunkColumns = 16384;
constexpr const char* kAxisNames[3] = {"D", "H", "W"};

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::array<int64_t, 3> spatial_of(const Tensor& t, const char* what) {
  require(t.rank() == 4, std::string(what) + " must be rank-4 [C,D,H,W], got " + shape_str(t.shape()));
  return {t.dim(1), t.dim(2), t.dim(3)};
}

void check_conv_args(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& spec,
                     bool transposed) {
  auto sp = spatial_of(input, "conv input");
  (void)sp;
  require(input.dim(0) == spec.in_channels,
          "conv input has " + std::to_string(input.dim(0)) + " channels, spec expects " +
              std::to_string(spec.in_channels) + " (axis C)");
  require(weights.rank() == 5, "conv weights must be rank-5, got " + shape_str(weights.shape()));
  const int64_t w0 = transposed ? spec.in_channels : spec.out_channels;
  const int64_t w1 = transposed ? spec.out_channels : spec.in_channels;
  require(weights.dim(0) == w0 && weights.dim(1) == w1,
          "conv weights channel dims " + shape_str(weights.shape()) + " do not match spec (" + std::to_string(w0) +
              "," + std::to_string(w1) + ",...) (axis C)");
  for (int a = 0; a < 3; ++a) {
    require(weights.dim(2 + a) == spec.kernel[a],
            "conv weights kernel size mismatch on axis " + std::string(kAxisNames[a]));
    if (!transposed)
      require(spec.kernel[a] % 2 == 1, "conv kernel must be odd on axis " + std::string(kAxisNames[a]));
    require(spec.stride[a] >= 1 && spec.padding[a] >= 0,
            "conv stride/padding invalid on axis " + std::string(kAxisNames[a]));
  }
  if (bias) require(bias->rank() == 1 && bias->dim(0) == spec.out_channels, "conv bias must be [out_channels]");
}

// Gathers im2col columns [Cin*K x n] for output voxels [j0, j0+n).
// Row order (ci,kz,ky,kx) matches the row-major weight layout.
void gather_columns(const float* in, const std::array<int64_t, 3>& is, int64_t cin, const ConvSpec& spec,
                    const std::array<int64_t, 3>& os, int64_t j0, int64_t n, MatrixXd& cols) {
  const int64_t ohw = os[1] * os[2];
  int64_t row = 0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    const float* chan = in + ci * is[0] * is[1] * is[2];
    for (int64_t kz = 0; kz < spec.kernel[0]; ++kz)
      for (int64_t ky = 0; ky < spec.kernel[1]; ++ky)
        for (int64_t kx = 0; kx < spec.kernel[2]; ++kx, ++row) {
          double* dst = cols.data() + row;  // column-major: stride between columns = rows
          const int64_t rows = cols.rows();
          for (int64_t j = 0; j < n; ++j) {
            const int64_t o = j0 + j;
            const int64_t oz = o / ohw, oy = (o % ohw) / os[2], ox = o % os[2];
            const int64_t iz = oz * spec.stride[0] - spec.padding[0] + kz;
            const int64_t iy = oy * spec.stride[1] - spec.padding[1] + ky;
            const int64_t ix = ox * spec.stride[2] - spec.padding[2] + kx;
            double v = 0.0;
            if (iz >= 0 && iz < is[0] && iy >= 0 && iy < is[1] && ix >= 0 && ix < is[2])
              v = static_cast<double>(chan[(iz * is[1] + iy) * is[2] + ix]);
            dst[j * rows] = v;
          }
        }
  }
}

// Scatter-adds columns back into the input-shaped accumulator (col2im).
void scatter_columns(const MatrixXd& cols, const std::array<int64_t, 3>& is, int64_t cin, const ConvSpec& spec,
                     const std::array<int64_t, 3>& os, int64_t j0, int64_t n, double* accum) {
  const int64_t ohw = os[1] * os[2];
  int64_t row = 0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    double* chan = accum + ci * is[0] * is[1] * is[2];
    for (int64_t kz = 0; kz < spec.kernel[0]; ++kz)
      for (int64_t ky = 0; ky < spec.kernel[1]; ++ky)
        for (int64_t kx = 0; kx < spec.kernel[2]; ++kx, ++row) {
          const double* src = cols.data() + row;
          const int64_t rows = cols.rows();
          for (int64_t j = 0; j < n; ++j) {
            const int64_t o = j0 + j;
            const int64_t oz = o / ohw, oy = (o % ohw) / os[2], ox = o % os[2];
            const int64_t iz = oz * spec.stride[0] - spec.padding[0] + kz;
            const int64_t iy = oy * spec.stride[1] - spec.padding[1] + ky;
            const int64_t ix = ox * spec.stride[2] - spec.padding[2] + kx;
            if (iz >= 0 && iz < is[0] && iy >= 0 && iy < is[1] && ix >= 0 && ix < is[2])
              chan[(iz * is[1] + iy) * is[2] + ix] += src[j * rows];
          }
        }
  }
}

MatrixXd weights_as_matrix(const Tensor& w, int64_t rows) {
  const int64_t cols = w.numel() / rows;
  Eigen::Map<const RowMajorMatrixXf> m(w.data(), rows, cols);
  return m.cast<double>();
}

// out[Cout, os] = W[Cout, CinK] · im2col(input) + bias
Tensor gemm_conv_forward(const Tensor& input, const MatrixXd& wmat, const Tensor* bias, const ConvSpec& spec,
                         const std::array<int64_t, 3>& is, const std::array<int64_t, 3>& os, int64_t cin,
                         int64_t cout) {
  const int64_t nvox = os[0] * os[1] * os[2];
  Tensor out({cout, os[0], os[1], os[2]});
  MatrixXd cols(cin * spec.kernel_volume(), std::min<int64_t>(kChunkColumns, nvox));
  for (int64_t j0 = 0; j0 < nvox; j0 += kChunkColumns) {
    const int64_t n = std::min<int64_t>(kChunkColumns, nvox - j0);
    gather_columns(input.data(), is, cin, spec, os, j0, n, cols);
    MatrixXd prod = wmat * cols.leftCols(n);  // Cout x n
    for (int64_t co = 0; co < cout; ++co) {
      const double b = bias ? static_cast<double>((*bias)[co]) : 0.0;
      float* dst = out.data() + co * nvox + j0;
      for (int64_t j = 0; j < n; ++j) dst[j] = static_cast<float>(prod(co, j) + b);
    }
  }
  return out;
}

// grad_input = col2im(Wᵀ · grad_out) for the conv described by spec,
// where grad_out lives on the output grid and the result on the input grid.
Tensor gemm_conv_backward_input(const MatrixXd& wmat, const Tensor& grad_out, const ConvSpec& spec,
                                const std::array<int64_t, 3>& is, const std::array<int64_t, 3>& os, int64_t cin,
                                int64_t cout) {
  const int64_t nvox = os[0] * os[1] * os[2];
  std::vector<double> accum(static_cast<size_t>(cin * is[0] * is[1] * is[2]), 0.0);
  MatrixXd wt = wmat.transpose();
  for (int64_t j0 = 0; j0 < nvox; j0 += kChunkColumns) {
    const int64_t n = std::min<int64_t>(kChunkColumns, nvox - j0);
    MatrixXd g(cout, n);
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t j = 0; j < n; ++j) g(co, j) = static_cast<double>(grad_out[co * nvox + j0 + j]);
    MatrixXd cols = wt * g;  // CinK x n
    scatter_columns(cols, is, cin, spec, os, j0, n, accum.data());
  }
  Tensor gin({cin, is[0], is[1], is[2]});
  for (int64_t i = 0; i < gin.numel(); ++i) gin[i] = static_cast<float>(accum[static_cast<size_t>(i)]);
  return gin;
}

// grad_W = grad_out · im2col(input)ᵀ, grad_b = Σ grad_out
void gemm_conv_grad_weights(const Tensor& input, const Tensor& grad_out, const ConvSpec& spec,
                            const std::array<int64_t, 3>& is, const std::array<int64_t, 3>& os, int64_t cin,
                            int64_t cout, MatrixXd& gw, std::vector<double>& gb) {
  const int64_t nvox = os[0] * os[1] * os[2];
  gw = MatrixXd::Zero(cout, cin * spec.kernel_volume());
  gb.assign(static_cast<size_t>(cout), 0.0);
  MatrixXd cols(cin * spec.kernel_volume(), std::min<int64_t>(kChunkColumns, nvox));
  for (int64_t j0 = 0; j0 < nvox; j0 += kChunkColumns) {
    const int64_t n = std::min<int64_t>(kChunkColumns, nvox - j0);
    gather_columns(input.data(), is, cin, spec, os, j0, n, cols);
    MatrixXd g(cout, n);
    for (int64_t co = 0; co < cout; ++co) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double v = static_cast<double>(grad_out[co * nvox + j0 + j]);
        g(co, j) = v;
        s += v;
      }
      gb[static_cast<size_t>(co)] += s;
    }
    gw.noalias() += g * cols.leftCols(n).transpose();
  }
}

Tensor matrix_to_weights(const MatrixXd& m, const std::vector<int64_t>& shape) {
  Tensor w(shape);
  Eigen::Map<RowMajorMatrixXf> dst(w.data(), m.rows(), m.cols());
  dst = m.cast<float>();
  return w;
}

}  // namespace

std::array<int64_t, 3> ConvSpec::output_size(const std::array<int64_t, 3>& in) const {
  std::array<int64_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const int64_t num = in[a] + 2 * padding[a] - kernel[a];
    out[a] = num >= 0 ? num / stride[a] + 1 : 0;
    if (out[a] < 1)
      throw std::invalid_argument("conv output collapses on axis " + std::string(kAxisNames[a]) + ": input " +
                                  std::to_string(in[a]) + ", kernel " + std::to_string(kernel[a]) + ", padding " +
                                  std::to_string(padding[a]));
  }
  return out;
}

std::array<int64_t, 3> ConvSpec::transposed_output_size(const std::array<int64_t, 3>& in) const {
  std::array<int64_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    out[a] = (in[a] - 1) * stride[a] - 2 * padding[a] + kernel[a];
    if (out[a] < 1)
      throw std::invalid_argument("transposed conv output collapses on axis " + std::string(kAxisNames[a]));
  }
  return out;
}

Tensor conv3d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec) {
  check_conv_args(input, weights, &bias, spec, false);
  const auto is = spatial_of(input, "conv input");
  const auto os = spec.output_size(is);
  MatrixXd wmat = weights_as_matrix(weights, spec.out_channels);
  return gemm_conv_forward(input, wmat, &bias, spec, is, os, spec.in_channels, spec.out_channels);
}

ConvGrads conv3d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out, const ConvSpec& spec) {
  check_conv_args(input, weights, nullptr, spec, false);
  const auto is = spatial_of(input, "conv input");
  const auto os = spec.output_size(is);
  const auto gs = spatial_of(grad_out, "conv grad_out");
  require(grad_out.dim(0) == spec.out_channels && gs == os,
          "conv grad_out shape " + shape_str(grad_out.shape()) + " does not match forward output");
  MatrixXd wmat = weights_as_matrix(weights, spec.out_channels);
  ConvGrads g;
  g.grad_input = gemm_conv_backward_input(wmat, grad_out, spec, is, os, spec.in_channels, spec.out_channels);
  MatrixXd gw;
  std::vector<double> gb;
  gemm_conv_grad_weights(input, grad_out, spec, is, os, spec.in_channels, spec.out_channels, gw, gb);
  g.grad_weights = matrix_to_weights(gw, weights.shape());
  g.grad_bias = Tensor({spec.out_channels});
  for (int64_t co = 0; co < spec.out_channels; ++co) g.grad_bias[co] = static_cast<float>(gb[static_cast<size_t>(co)]);
  return g;
}

Tensor transposed_conv3d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                                 const ConvSpec& spec) {
  check_conv_args(input, weights, &bias, spec, true);
  const auto is = spatial_of(input, "transposed conv input");
  const auto os = spec.transposed_output_size(is);
  // Equivalent regular conv mapping the output grid back to the input grid:
  // its backward-input pass realizes the transposed forward.
  ConvSpec cs = spec;
  cs.in_channels = spec.out_channels;
  cs.out_channels = spec.in_channels;
  MatrixXd wmat = weights_as_matrix(weights, spec.in_channels);
  Tensor out = gemm_conv_backward_input(wmat, input, cs, os, is, spec.out_channels, spec.in_channels);
  const int64_t nvox = os[0] * os[1] * os[2];
  for (int64_t co = 0; co < spec.out_channels; ++co) {
    float* dst = out.data() + co * nvox;
    const float b = bias[co];
    for (int64_t j = 0; j < nvox; ++j) dst[j] += b;
  }
  return out;
}

ConvGrads transposed_conv3d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                                     const ConvSpec& spec) {
  check_conv_args(input, weights, nullptr, spec, true);
  const auto is = spatial_of(input, "transposed conv input");
  const auto os = spec.transposed_output_size(is);
  const auto gs = spatial_of(grad_out, "transposed conv grad_out");
  require(grad_out.dim(0) == spec.out_channels && gs == os,
          "transposed conv grad_out shape " + shape_str(grad_out.shape()) + " does not match forward output");
  ConvSpec cs = spec;
  cs.in_channels = spec.out_channels;
  cs.out_channels = spec.in_channels;
  MatrixXd wmat = weights_as_matrix(weights, spec.in_channels);
  ConvGrads g;
  g.grad_input = gemm_conv_forward(grad_out, wmat, nullptr, cs, os, is, spec.out_channels, spec.in_channels);
  MatrixXd gw;
  std::vector<double> gb_unused;
  gemm_conv_grad_weights(grad_out, input, cs, os, is, spec.out_channels, spec.in_channels, gw, gb_unused);
  g.grad_weights = matrix_to_weights(gw, weights.shape());
  g.grad_bias = Tensor({spec.out_channels});
  const int64_t nvox = os[0] * os[1] * os[2];
  for (int64_t co = 0; co < spec.out_channels; ++co) {
    double s = 0.0;
    for (int64_t j = 0; j < nvox; ++j) s += static_cast<double>(grad_out[co * nvox + j]);
    g.grad_bias[co] = static_cast<float>(s);
  }
  return g;
}

Tensor instance_norm_forward(const Tensor& input, const Tensor& gain, const Tensor& shift, float eps) {
  const auto is = spatial_of(input, "instance_norm input");
  const int64_t c = input.dim(0), nvox = is[0] * is[1] * is[2];
  require(nvox > 1, "instance_norm requires > 1 voxel per channel, got " + std::to_string(nvox));
  require(gain.rank() == 1 && gain.dim(0) == c && shift.rank() == 1 && shift.dim(0) == c,
          "instance_norm gain/shift must be [C]");
  Tensor out(input.shape());
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* x = input.data() + ch * nvox;
    float* y = out.data() + ch * nvox;
    double mean = 0.0;
    for (int64_t i = 0; i < nvox; ++i) mean += x[i];
    mean /= static_cast<double>(nvox);
    double var = 0.0;
    for (int64_t i = 0; i < nvox; ++i) {
      const double d = x[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(nvox);
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
    const double g = gain[ch], b = shift[ch];
    for (int64_t i = 0; i < nvox; ++i) y[i] = static_cast<float>((x[i] - mean) * inv_std * g + b);
  }
  return out;
}

InstanceNormGrads instance_norm_backward(const Tensor& input, const Tensor& gain, const Tensor& grad_out, float eps) {
  const auto is = spatial_of(input, "instance_norm input");
  require(grad_out.same_shape(input), "instance_norm grad_out shape mismatch");
  const int64_t c = input.dim(0), nvox = is[0] * is[1] * is[2];
  require(nvox > 1, "instance_norm requires > 1 voxel per channel");
  InstanceNormGrads g{Tensor(input.shape()), Tensor({c}), Tensor({c})};
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* x = input.data() + ch * nvox;
    const float* go = grad_out.data() + ch * nvox;
    float* gi = g.grad_input.data() + ch * nvox;
    double mean = 0.0;
    for (int64_t i = 0; i < nvox; ++i) mean += x[i];
    mean /= static_cast<double>(nvox);
    double var = 0.0;
    for (int64_t i = 0; i < nvox; ++i) {
      const double d = x[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(nvox);
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
    double sum_g = 0.0, sum_gx = 0.0, sum_gshift = 0.0;
    for (int64_t i = 0; i < nvox; ++i) {
      const double xhat = (x[i] - mean) * inv_std;
      sum_g += go[i];
      sum_gx += go[i] * xhat;
      sum_gshift += go[i];
    }
    g.grad_gain[ch] = static_cast<float>(sum_gx);
    g.grad_shift[ch] = static_cast<float>(sum_gshift);
    const double mg = sum_g / static_cast<double>(nvox);
    const double mgx = sum_gx / static_cast<double>(nvox);
    const double scale = static_cast<double>(gain[ch]) * inv_std;
    for (int64_t i = 0; i < nvox; ++i) {
      const double xhat = (x[i] - mean) * inv_std;
      gi[i] = static_cast<float>(scale * (go[i] - mg - xhat * mgx));
    }
  }
  return g;
}

Tensor leaky_relu_forward(const Tensor& input, float slope) {
  Tensor out(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) out[i] = input[i] >= 0.0f ? input[i] : slope * input[i];
  return out;
}

Tensor leaky_relu_backward(const Tensor& input, const Tensor& grad_out, float slope) {
  require(grad_out.same_shape(input), "leaky_relu grad_out shape mismatch");
  Tensor gi(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) gi[i] = input[i] >= 0.0f ? grad_out[i] : slope * grad_out[i];
  return gi;
}

Tensor softmax_channels(const Tensor& input, float temperature) {
  require(temperature > 0.0f, "softmax temperature must be > 0, got " + std::to_string(temperature));
  require(input.rank() >= 1 && input.dim(0) >= 2, "softmax needs a class axis with C >= 2");
  const int64_t c = input.dim(0), nvox = input.numel() / c;
  Tensor out(input.shape());
  const double inv_t = 1.0 / static_cast<double>(temperature);
  std::vector<double> scaled(static_cast<size_t>(c));
  for (int64_t v = 0; v < nvox; ++v) {
    double mx = -1e300;
    for (int64_t ch = 0; ch < c; ++ch) {
      scaled[static_cast<size_t>(ch)] = static_cast<double>(input[ch * nvox + v]) * inv_t;
      mx = std::max(mx, scaled[static_cast<size_t>(ch)]);
    }
    double denom = 0.0;
    for (int64_t ch = 0; ch < c; ++ch) denom += std::exp(scaled[static_cast<size_t>(ch)] - mx);
    for (int64_t ch = 0; ch < c; ++ch)
      out[ch * nvox + v] = static_cast<float>(std::exp(scaled[static_cast<size_t>(ch)] - mx) / denom);
  }
  return out;
}

}  // namespace segkd
