#include "segkd/unet.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include "segkd/manifest.hpp"

namespace segkd {

namespace {

// Box-Muller on explicit mt19937_64 draws; bit-reproducible across
// standard libraries, unlike std::normal_distribution.
class NormalRng {
 public:
  explicit NormalRng(uint64_t seed) : eng_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  double uniform() { return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0); }

  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

void he_init(Tensor& w, int64_t fan_in, NormalRng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.next() * std_dev);
}

ConvBlock make_block(int64_t cin, int64_t cout, int64_t stride, NormalRng& rng) {
  ConvBlock b;
  b.spec = ConvSpec{cin, cout, {3, 3, 3}, {stride, stride, stride}, {1, 1, 1}};
  b.w = Tensor({cout, cin, 3, 3, 3});
  he_init(b.w, cin * 27, rng);
  b.b = Tensor({cout});
  b.gain = Tensor::full({cout}, 1.0f);
  b.shift = Tensor({cout});
  return b;
}

Tensor block_forward(const ConvBlock& blk, const Tensor& x, const NetworkPlan& plan, BlockCache* cache) {
  Tensor conv_out = conv3d_forward(x, blk.w, blk.b, blk.spec);
  Tensor norm_out = instance_norm_forward(conv_out, blk.gain, blk.shift, plan.norm_eps);
  Tensor act = leaky_relu_forward(norm_out, plan.leaky_slope);
  if (cache) {
    cache->input = x;
    cache->conv_out = std::move(conv_out);
    cache->norm_out = std::move(norm_out);
  }
  return act;
}

// Returns grad w.r.t. the block input; writes (w,b,gain,shift) grads at
// grads[base..base+3].
Tensor block_backward(const ConvBlock& blk, const BlockCache& cache, const Tensor& grad_act, const NetworkPlan& plan,
                      std::vector<Tensor>& grads, size_t base) {
  Tensor g_norm = leaky_relu_backward(cache.norm_out, grad_act, plan.leaky_slope);
  InstanceNormGrads ing = instance_norm_backward(cache.conv_out, blk.gain, g_norm, plan.norm_eps);
  ConvGrads cg = conv3d_backward(cache.input, blk.w, ing.grad_input, blk.spec);
  grads[base] = std::move(cg.grad_weights);
  grads[base + 1] = std::move(cg.grad_bias);
  grads[base + 2] = std::move(ing.grad_gain);
  grads[base + 3] = std::move(ing.grad_shift);
  return std::move(cg.grad_input);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  std::vector<int64_t> shape = a.shape();
  shape[0] += b.dim(0);
  Tensor out(shape);
  std::memcpy(out.data(), a.data(), sizeof(float) * static_cast<size_t>(a.numel()));
  std::memcpy(out.data() + a.numel(), b.data(), sizeof(float) * static_cast<size_t>(b.numel()));
  return out;
}

void split_channels(const Tensor& g, int64_t first_channels, Tensor& ga, Tensor& gb) {
  std::vector<int64_t> sa = g.shape(), sb = g.shape();
  sa[0] = first_channels;
  sb[0] = g.dim(0) - first_channels;
  ga = Tensor(sa);
  gb = Tensor(sb);
  std::memcpy(ga.data(), g.data(), sizeof(float) * static_cast<size_t>(ga.numel()));
  std::memcpy(gb.data(), g.data() + ga.numel(), sizeof(float) * static_cast<size_t>(gb.numel()));
}

void add_into(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

template <typename T>
void append_le(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T read_le(const std::vector<uint8_t>& in, size_t& pos) {
  if (pos + sizeof(T) > in.size())
    throw CheckpointIoError(CheckpointError::Truncated, "checkpoint truncated at byte " + std::to_string(pos));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

constexpr char kMagic[8] = {'S', 'E', 'G', 'K', 'D', 'C', 'K', '1'};
constexpr uint16_t kVersion = 1;

}  // namespace

int64_t NetworkPlan::stage_width(int64_t stage) const {
  const int64_t unscaled = std::min(base_width << stage, max_width);
  const int64_t scaled = static_cast<int64_t>(std::floor(static_cast<double>(unscaled) * alpha));
  return std::max<int64_t>(scaled, 2);
}

void NetworkPlan::validate() const {
  if (num_classes < 2) throw std::invalid_argument("plan: num_classes must be >= 2");
  if (input_channels < 1 || num_stages < 2 || base_width < 1 || max_width < base_width || convs_per_stage < 1)
    throw std::invalid_argument("plan: invalid structural field");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("plan: alpha must be in (0, 1]");
  const int64_t div = int64_t{1} << (num_stages - 1);
  for (int a = 0; a < 3; ++a) {
    if (patch_size[a] < div || patch_size[a] % div != 0) {
      const int64_t minimal = ((patch_size[a] + div - 1) / div) * div;
      throw std::invalid_argument("plan: patch size " + std::to_string(patch_size[a]) + " on axis " +
                                  std::to_string(a) + " must be divisible by " + std::to_string(div) +
                                  "; minimal valid size is " + std::to_string(std::max(minimal, div)));
    }
  }
}

std::string NetworkPlan::to_manifest() const {
  std::map<std::string, std::string> kv{
      {"num_classes", std::to_string(num_classes)},
      {"input_channels", std::to_string(input_channels)},
      {"num_stages", std::to_string(num_stages)},
      {"base_width", std::to_string(base_width)},
      {"max_width", std::to_string(max_width)},
      {"convs_per_stage", std::to_string(convs_per_stage)},
      {"alpha", format_double(alpha)},
      {"patch_d", std::to_string(patch_size[0])},
      {"patch_h", std::to_string(patch_size[1])},
      {"patch_w", std::to_string(patch_size[2])},
      {"norm_eps", format_double(norm_eps)},
      {"leaky_slope", format_double(leaky_slope)},
  };
  return render_manifest(kv);
}

NetworkPlan NetworkPlan::from_manifest(const std::map<std::string, std::string>& kv) {
  NetworkPlan p;
  try {
    p.num_classes = std::stoll(kv.at("num_classes"));
    p.input_channels = std::stoll(kv.at("input_channels"));
    p.num_stages = std::stoll(kv.at("num_stages"));
    p.base_width = std::stoll(kv.at("base_width"));
    p.max_width = std::stoll(kv.at("max_width"));
    p.convs_per_stage = std::stoll(kv.at("convs_per_stage"));
    p.alpha = std::stod(kv.at("alpha"));
    p.patch_size = {std::stoll(kv.at("patch_d")), std::stoll(kv.at("patch_h")), std::stoll(kv.at("patch_w"))};
    p.norm_eps = std::stof(kv.at("norm_eps"));
    p.leaky_slope = std::stof(kv.at("leaky_slope"));
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("plan manifest is missing a required key");
  }
  p.validate();
  return p;
}

NetworkPlan default_plan(int64_t num_classes, double alpha) {
  NetworkPlan p;
  p.num_classes = num_classes;
  p.alpha = alpha;
  return p;
}

Network Network::build(const NetworkPlan& plan, uint64_t seed) {
  plan.validate();
  Network net;
  net.plan_ = plan;
  net.seed_ = seed;
  NormalRng rng(seed);

  const int64_t stages = plan.num_stages;
  for (int64_t s = 0; s < stages; ++s) {
    EncoderStage st;
    for (int64_t k = 0; k < plan.convs_per_stage; ++k) {
      const int64_t cin = (k > 0) ? plan.stage_width(s) : (s == 0 ? plan.input_channels : plan.stage_width(s - 1));
      const int64_t stride = (k == 0 && s > 0) ? 2 : 1;
      st.blocks.push_back(make_block(cin, plan.stage_width(s), stride, rng));
    }
    net.encoder_.push_back(std::move(st));
  }
  for (int64_t s = stages - 2; s >= 0; --s) {
    DecoderStage ds;
    const int64_t cin = plan.stage_width(s + 1), cout = plan.stage_width(s);
    ds.up_spec = ConvSpec{cin, cout, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}};
    ds.up_w = Tensor({cin, cout, 2, 2, 2});
    he_init(ds.up_w, cin * 8, rng);
    ds.up_b = Tensor({cout});
    for (int64_t k = 0; k < plan.convs_per_stage; ++k)
      ds.blocks.push_back(make_block(k == 0 ? 2 * cout : cout, cout, 1, rng));
    net.decoder_.push_back(std::move(ds));
  }
  net.final_spec_ = ConvSpec{plan.stage_width(0), plan.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  net.final_w_ = Tensor({plan.num_classes, plan.stage_width(0), 1, 1, 1});
  he_init(net.final_w_, plan.stage_width(0), rng);
  net.final_b_ = Tensor({plan.num_classes});
  return net;
}

void Network::check_input(const Tensor& input) const {
  if (input.rank() != 4 || input.dim(0) != plan_.input_channels)
    throw std::invalid_argument("network input must be [" + std::to_string(plan_.input_channels) +
                                ",D,H,W], got " + shape_str(input.shape()));
  const int64_t div = int64_t{1} << (plan_.num_stages - 1);
  for (int a = 0; a < 3; ++a)
    if (input.dim(1 + a) % div != 0 || input.dim(1 + a) < div)
      throw std::invalid_argument("network input spatial size " + std::to_string(input.dim(1 + a)) + " on axis " +
                                  std::to_string(a) + " must be a positive multiple of " + std::to_string(div));
}

Tensor Network::forward(const Tensor& input) const {
  Cache scratch;
  return forward_cached(input, scratch);
}

Tensor Network::forward_cached(const Tensor& input, Cache& cache) const {
  check_input(input);
  cache.enc.assign(encoder_.size(), {});
  cache.enc_out.clear();
  cache.dec.clear();

  Tensor x = input;
  for (size_t s = 0; s < encoder_.size(); ++s) {
    cache.enc[s].resize(encoder_[s].blocks.size());
    for (size_t k = 0; k < encoder_[s].blocks.size(); ++k)
      x = block_forward(encoder_[s].blocks[k], x, plan_, &cache.enc[s][k]);
    cache.enc_out.push_back(x);
  }
  for (size_t i = 0; i < decoder_.size(); ++i) {
    Cache::Dec dc;
    dc.up_in = x;
    Tensor up = transposed_conv3d_forward(x, decoder_[i].up_w, decoder_[i].up_b, decoder_[i].up_spec);
    const size_t skip_stage = encoder_.size() - 2 - i;
    dc.concat = concat_channels(cache.enc_out[skip_stage], up);
    x = dc.concat;
    dc.blocks.resize(decoder_[i].blocks.size());
    for (size_t k = 0; k < decoder_[i].blocks.size(); ++k)
      x = block_forward(decoder_[i].blocks[k], x, plan_, &dc.blocks[k]);
    cache.dec.push_back(std::move(dc));
  }
  cache.final_in = x;
  return conv3d_forward(x, final_w_, final_b_, final_spec_);
}

GradientSet Network::backward(const Cache& cache, const Tensor& grad_logits) const {
  GradientSet gs;
  std::vector<Tensor> grads;
  {
    size_t n = 0;
    visit_params([&](const Tensor&) { ++n; });
    grads.resize(n);
  }

  // Canonical parameter order offsets.
  const size_t per_block = 4;
  std::vector<size_t> enc_base(encoder_.size());
  size_t idx = 0;
  for (size_t s = 0; s < encoder_.size(); ++s) {
    enc_base[s] = idx;
    idx += encoder_[s].blocks.size() * per_block;
  }
  std::vector<size_t> dec_base(decoder_.size());
  for (size_t i = 0; i < decoder_.size(); ++i) {
    dec_base[i] = idx;
    idx += 2 + decoder_[i].blocks.size() * per_block;
  }
  const size_t final_base = idx;

  // Final classifier.
  ConvGrads fg = conv3d_backward(cache.final_in, final_w_, grad_logits, final_spec_);
  grads[final_base] = std::move(fg.grad_weights);
  grads[final_base + 1] = std::move(fg.grad_bias);
  Tensor g = std::move(fg.grad_input);

  // Skip gradients accumulated from decoder concats.
  std::vector<Tensor> g_skip(encoder_.size());

  for (size_t ii = decoder_.size(); ii-- > 0;) {
    const auto& ds = decoder_[ii];
    const auto& dc = cache.dec[ii];
    for (size_t k = ds.blocks.size(); k-- > 0;)
      g = block_backward(ds.blocks[k], dc.blocks[k], g, plan_, grads, dec_base[ii] + 2 + k * per_block);
    const size_t skip_stage = encoder_.size() - 2 - ii;
    const int64_t skip_channels = cache.enc_out[skip_stage].dim(0);
    Tensor g_skip_part, g_up;
    split_channels(g, skip_channels, g_skip_part, g_up);
    g_skip[skip_stage] = std::move(g_skip_part);
    ConvGrads ug = transposed_conv3d_backward(dc.up_in, ds.up_w, g_up, ds.up_spec);
    grads[dec_base[ii]] = std::move(ug.grad_weights);
    grads[dec_base[ii] + 1] = std::move(ug.grad_bias);
    g = std::move(ug.grad_input);
  }

  for (size_t s = encoder_.size(); s-- > 0;) {
    if (g_skip[s].numel() > 0) add_into(g, g_skip[s]);
    for (size_t k = encoder_[s].blocks.size(); k-- > 0;)
      g = block_backward(encoder_[s].blocks[k], cache.enc[s][k], g, plan_, grads, enc_base[s] + k * per_block);
  }

  gs.grads = std::move(grads);
  return gs;
}

void Network::visit_params(const std::function<void(const Tensor&)>& fn) const {
  for (const auto& st : encoder_)
    for (const auto& blk : st.blocks) {
      fn(blk.w);
      fn(blk.b);
      fn(blk.gain);
      fn(blk.shift);
    }
  for (const auto& ds : decoder_) {
    fn(ds.up_w);
    fn(ds.up_b);
    for (const auto& blk : ds.blocks) {
      fn(blk.w);
      fn(blk.b);
      fn(blk.gain);
      fn(blk.shift);
    }
  }
  fn(final_w_);
  fn(final_b_);
}

void Network::visit_params_mutable(const std::function<void(Tensor&)>& fn) {
  if (frozen_) throw std::logic_error("network is frozen; weight mutation rejected");
  for (auto& st : encoder_)
    for (auto& blk : st.blocks) {
      fn(blk.w);
      fn(blk.b);
      fn(blk.gain);
      fn(blk.shift);
    }
  for (auto& ds : decoder_) {
    fn(ds.up_w);
    fn(ds.up_b);
    for (auto& blk : ds.blocks) {
      fn(blk.w);
      fn(blk.b);
      fn(blk.gain);
      fn(blk.shift);
    }
  }
  fn(final_w_);
  fn(final_b_);
}

int64_t Network::param_count() const {
  int64_t n = 0;
  visit_params([&](const Tensor& t) { n += t.numel(); });
  return n;
}

CapacityReport capacity(const NetworkPlan& plan) {
  plan.validate();
  CapacityReport rep;
  const auto vox = [&](int64_t stage) {
    int64_t v = 1;
    for (int a = 0; a < 3; ++a) v *= plan.patch_size[a] >> stage;
    return v;
  };
  int64_t peak = 0;
  std::vector<int64_t> skip_floats;
  int64_t live_skips = 0;

  const auto conv_block = [&](int64_t cin, int64_t cout, int64_t invox, int64_t outvox, int64_t kvol) {
    rep.params += cout * cin * kvol + cout + 2 * cout;  // conv + bias + norm gain/shift
    rep.flops_per_patch += 2 * outvox * cin * cout * kvol;                  // MACs x 2
    rep.flops_per_patch += outvox * cout + 6 * outvox * cout + outvox * cout;  // bias, norm, activation
    peak = std::max(peak, live_skips + cin * invox + cout * outvox);
  };

  for (int64_t s = 0; s < plan.num_stages; ++s) {
    const int64_t w = plan.stage_width(s);
    for (int64_t k = 0; k < plan.convs_per_stage; ++k) {
      const int64_t cin = (k > 0) ? w : (s == 0 ? plan.input_channels : plan.stage_width(s - 1));
      const int64_t invox = (k == 0 && s > 0) ? vox(s - 1) : vox(s);
      conv_block(cin, w, invox, vox(s), 27);
    }
    if (s < plan.num_stages - 1) {
      skip_floats.push_back(w * vox(s));
      live_skips += w * vox(s);
    }
  }
  for (int64_t s = plan.num_stages - 2; s >= 0; --s) {
    const int64_t cin = plan.stage_width(s + 1), cout = plan.stage_width(s);
    rep.params += cin * cout * 8 + cout;
    rep.flops_per_patch += 2 * vox(s + 1) * cin * cout * 8 + vox(s) * cout;
    peak = std::max(peak, live_skips + cin * vox(s + 1) + cout * vox(s));
    live_skips -= skip_floats[static_cast<size_t>(s)];  // skip consumed by concat
    for (int64_t k = 0; k < plan.convs_per_stage; ++k)
      conv_block(k == 0 ? 2 * cout : cout, cout, vox(s), vox(s), 27);
  }
  const int64_t w0 = plan.stage_width(0);
  rep.params += plan.num_classes * w0 + plan.num_classes;
  rep.flops_per_patch += 2 * vox(0) * w0 * plan.num_classes + vox(0) * plan.num_classes;
  peak = std::max(peak, w0 * vox(0) + plan.num_classes * vox(0));
  rep.peak_activation_bytes = peak * 4;
  return rep;
}

std::vector<uint8_t> save_checkpoint(const Network& net) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  append_le<uint16_t>(out, kVersion);
  std::string manifest = net.plan().to_manifest();
  manifest += "seed=" + std::to_string(net.seed()) + "\n";
  manifest += std::string("frozen=") + (net.frozen() ? "1" : "0") + "\n";
  append_le<uint32_t>(out, static_cast<uint32_t>(manifest.size()));
  out.insert(out.end(), manifest.begin(), manifest.end());
  net.visit_params([&](const Tensor& t) {
    append_le<uint64_t>(out, static_cast<uint64_t>(t.numel()) * 4);
    const auto* bytes = reinterpret_cast<const uint8_t*>(t.data());
    out.insert(out.end(), bytes, bytes + t.numel() * 4);
  });
  const uint32_t crc = static_cast<uint32_t>(crc32(0L, out.data(), static_cast<uInt>(out.size())));
  append_le<uint32_t>(out, crc);
  return out;
}

Network load_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 + 2 + 4 + 4) throw CheckpointIoError(CheckpointError::Truncated, "checkpoint too short");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointIoError(CheckpointError::BadMagic, "checkpoint magic mismatch");
  const uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24);
  const uint32_t actual_crc =
      static_cast<uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc)
    throw CheckpointIoError(CheckpointError::ChecksumMismatch, "checkpoint CRC-32 mismatch");

  size_t pos = 8;
  const uint16_t version = read_le<uint16_t>(bytes, pos);
  if (version != kVersion)
    throw CheckpointIoError(CheckpointError::BadVersion, "unsupported checkpoint version " + std::to_string(version));
  const uint32_t mlen = read_le<uint32_t>(bytes, pos);
  if (pos + mlen > bytes.size() - 4)
    throw CheckpointIoError(CheckpointError::Truncated, "checkpoint manifest truncated");
  const std::string manifest(bytes.begin() + static_cast<ptrdiff_t>(pos),
                             bytes.begin() + static_cast<ptrdiff_t>(pos + mlen));
  pos += mlen;
  auto kv = parse_manifest(manifest);
  NetworkPlan plan;
  uint64_t seed = 0;
  bool frozen = false;
  try {
    plan = NetworkPlan::from_manifest(kv);
    seed = std::stoull(kv.at("seed"));
    frozen = kv.at("frozen") == "1";
  } catch (const std::exception& e) {
    throw CheckpointIoError(CheckpointError::BadManifest, std::string("checkpoint manifest invalid: ") + e.what());
  }

  Network net = Network::build(plan, seed);
  net.visit_params_mutable([&](Tensor& t) {
    const uint64_t len = read_le<uint64_t>(bytes, pos);
    if (len != static_cast<uint64_t>(t.numel()) * 4)
      throw CheckpointIoError(CheckpointError::BadManifest,
                              "checkpoint weight block length " + std::to_string(len) + " does not match plan");
    if (pos + len > bytes.size() - 4)
      throw CheckpointIoError(CheckpointError::Truncated, "checkpoint weight block truncated");
    std::memcpy(t.data(), bytes.data() + pos, len);
    pos += len;
  });
  if (pos != bytes.size() - 4)
    throw CheckpointIoError(CheckpointError::Truncated, "checkpoint has trailing bytes before CRC");
  if (frozen) net.freeze();
  return net;
}

}  // namespace segkd
