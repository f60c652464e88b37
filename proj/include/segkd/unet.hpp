#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "segkd/nn_ops.hpp"
#include "segkd/tensor.hpp"

namespace segkd {

// Encoder-decoder architecture description. Stage widths follow
// max(floor(min(base_width * 2^s, max_width) * alpha), 2) and the decoder
// mirrors the encoder so skip concatenation sees equal resolutions.
struct NetworkPlan {
  int64_t num_classes = 2;
  int64_t input_channels = 1;
  int64_t num_stages = 4;
  int64_t base_width = 16;
  int64_t max_width = 128;
  int64_t convs_per_stage = 2;
  double alpha = 1.0;
  std::array<int64_t, 3> patch_size{64, 64, 64};

  // Fixed backbone constants, recorded here so every checkpoint carries them.
  float norm_eps = 1e-5f;
  float leaky_slope = 0.01f;

  int64_t stage_width(int64_t stage) const;
  void validate() const;

  std::string to_manifest() const;
  static NetworkPlan from_manifest(const std::map<std::string, std::string>& kv);

  bool operator==(const NetworkPlan&) const = default;
};

NetworkPlan default_plan(int64_t num_classes, double alpha);

struct CapacityReport {
  int64_t params = 0;
  int64_t flops_per_patch = 0;  // multiply-accumulates x 2, plus norm/activation terms
  int64_t peak_activation_bytes = 0;
};

CapacityReport capacity(const NetworkPlan& plan);

struct ConvBlock {
  Tensor w, b;          // conv
  Tensor gain, shift;   // instance norm
  ConvSpec spec;
};

struct EncoderStage {
  std::vector<ConvBlock> blocks;
};

struct DecoderStage {
  Tensor up_w, up_b;  // stride-2 transposed conv
  ConvSpec up_spec;
  std::vector<ConvBlock> blocks;
};

class Network;

// Per-parameter gradient buffers in the network's canonical parameter order.
struct GradientSet {
  std::vector<Tensor> grads;
};

class Network {
 public:
  static Network build(const NetworkPlan& plan, uint64_t seed);

  const NetworkPlan& plan() const { return plan_; }
  uint64_t seed() const { return seed_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  Tensor forward(const Tensor& input) const;

  struct Cache;
  Tensor forward_cached(const Tensor& input, Cache& cache) const;
  GradientSet backward(const Cache& cache, const Tensor& grad_logits) const;

  // Visits every parameter tensor in canonical order (used by the optimizer,
  // checkpointing, and capacity cross-checks). The mutable overload rejects
  // frozen networks.
  void visit_params(const std::function<void(const Tensor&)>& fn) const;
  void visit_params_mutable(const std::function<void(Tensor&)>& fn);
  int64_t param_count() const;

 private:
  Network() = default;
  void check_input(const Tensor& input) const;

  NetworkPlan plan_;
  uint64_t seed_ = 0;
  bool frozen_ = false;
  std::vector<EncoderStage> encoder_;
  std::vector<DecoderStage> decoder_;
  Tensor final_w_, final_b_;
  ConvSpec final_spec_;
};

struct BlockCache {
  Tensor input, conv_out, norm_out;
};

struct Network::Cache {
  std::vector<std::vector<BlockCache>> enc;
  std::vector<Tensor> enc_out;  // skip features per encoder stage
  struct Dec {
    Tensor up_in, concat;
    std::vector<BlockCache> blocks;
  };
  std::vector<Dec> dec;
  Tensor final_in;
};

// Checkpoint container: magic "SEGKDCK1", u16 version, u32-length-prefixed
// key=value manifest, per-parameter u64-length-prefixed raw little-endian f32
// blocks, trailing CRC-32 over everything prior.
enum class CheckpointError { BadMagic, BadVersion, Truncated, ChecksumMismatch, BadManifest };

class CheckpointIoError : public std::runtime_error {
 public:
  CheckpointIoError(CheckpointError code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  CheckpointError code() const { return code_; }

 private:
  CheckpointError code_;
};

std::vector<uint8_t> save_checkpoint(const Network& net);
Network load_checkpoint(const std::vector<uint8_t>& bytes);

}  // namespace segkd
