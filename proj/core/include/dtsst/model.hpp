#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dtsst/tensor.hpp"

namespace dtsst {

// Architecture of the dual-branch network. Defaults are the full-size model
// for 22-channel, 1000-sample, 40-frequency, 4-class input.
struct ModelConfig {
  std::size_t channels = 22;
  std::size_t samples = 1000;  // T
  std::size_t freqs = 40;      // F
  std::size_t n_classes = 4;

  std::size_t d1 = 40;   // branch channel width
  std::size_t d2 = 120;  // embedding width
  std::size_t tc1 = 30;  // Branch I temporal kernel
  std::size_t tc2 = 125; // Branch II temporal kernel
  std::size_t pool1 = 120;
  std::size_t pool1_stride = 12;
  std::size_t pool2 = 64;
  std::size_t pool2_stride = 32;

  std::size_t encoder_layers = 4;
  std::size_t heads = 10;
  std::size_t encoder_mlp_ratio = 2;
  std::size_t mlp_hidden = 64;  // classifier hidden width

  bool use_branch1 = true;
  bool use_branch2_in1 = true;
  bool use_branch2_in2 = true;
  bool use_transformer = true;

  // Scale attention logits by sqrt(d2 / heads) instead of sqrt(d2).
  bool per_head_scaling = false;
  double dropout = 0.0;

  // Throws DataError on any violated cross-field invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct Geometry {
  std::size_t branch1_len = 0;  // L1
  std::size_t branch2_len = 0;  // L2, per view
  std::size_t fused_len = 0;    // L over enabled branches
};

// Sequence lengths implied by the config; ShapeError when T is too short.
Geometry geometry(const ModelConfig& cfg);

// Exact number of trainable scalars.
std::size_t param_count(const ModelConfig& cfg);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

struct NamedTensor {
  std::string name;
  Tensor value;
};

class DualTsst {
 public:
  DualTsst(ModelConfig cfg, std::uint64_t seed);
  DualTsst(const DualTsst&) = delete;
  DualTsst& operator=(const DualTsst&) = delete;
  DualTsst(DualTsst&&) = default;
  DualTsst& operator=(DualTsst&&) = default;

  const ModelConfig& config() const { return cfg_; }

  // eeg [N, ch, T] -> [N, L1, D2]
  Tensor branch1_forward(const Tensor& eeg, bool training);
  // x1 [N, ch, F, T], x2 [N, F, ch, T] -> ([N, L2, D2], [N, L2, D2]).
  // Disabled views come back undefined.
  std::pair<Tensor, Tensor> branch2_forward(const Tensor& x1, const Tensor& x2, bool training);

  // Concatenates the defined parts along the sequence axis in the given order.
  static Tensor fuse(const std::vector<Tensor>& parts);

  // [N, L, D2] -> [N, L, D2]. When `attention` is non-null the per-layer
  // attention weights [N, heads, L, L] are appended to it.
  Tensor encoder_forward(const Tensor& fused, bool training,
                         std::vector<Tensor>* attention = nullptr);

  // Pooled features [N, D2] -> raw logits [N, n_classes].
  Tensor classify(const Tensor& encoded);

  // Pre-classifier pooled features [N, D2].
  Tensor features(const Tensor& eeg, const Tensor& tfr, bool training);

  // eeg [N, ch, T], tfr [N, ch, F, T] -> logits [N, n_classes].
  Tensor forward(const Tensor& eeg, const Tensor& tfr, bool training);

  // Trainable parameters in deterministic registry order.
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  // Non-trainable state (batch-norm running statistics).
  std::vector<NamedTensor>& buffers() { return buffers_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }

  Tensor& parameter(const std::string& name);

  std::size_t trainable_count() const;
  void zero_grad();

 private:
  struct ConvBranch {
    std::size_t in_channels = 0;  // input channels of the temporal conv
    std::size_t height = 0;       // axis collapsed by the depthwise conv
    std::size_t time_kernel = 0;
    std::size_t pool = 0;
    std::size_t pool_stride = 0;
    Tensor tc_w;
    Tensor bn1_g, bn1_b, bn1_mean, bn1_var;
    Tensor sc_w;
    Tensor bn2_g, bn2_b, bn2_mean, bn2_var;
    Tensor pw_w, pw_b;
  };

  struct EncoderLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor w1, b1, w2, b2;
    Tensor ln2_g, ln2_b;
  };

  void build_branch(ConvBranch& b, const std::string& prefix);
  Tensor run_branch(ConvBranch& b, const Tensor& x, bool training);
  Tensor attention_block(const EncoderLayer& layer, const Tensor& x,
                         std::vector<Tensor>* attention);
  Tensor register_param(const std::string& name, Shape shape, double bound);
  Tensor register_const(const std::string& name, Shape shape, double value, bool trainable);
  void check_inputs(const Tensor& eeg, const Tensor& tfr) const;

  ModelConfig cfg_;
  Geometry geom_;
  std::mt19937_64 init_rng_;
  std::mt19937_64 dropout_rng_;

  ConvBranch branch1_;
  ConvBranch view1_;
  ConvBranch view2_;
  Tensor pos_;
  std::vector<EncoderLayer> layers_;
  Tensor head_w1_, head_b1_, head_w2_, head_b2_;

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

// Checkpoint file: "DTSS", u32 version, u32 config length + config JSON, u32
// tensor count, then per tensor u32 name length, name, u8 rank, rank x u32
// extents, little-endian float32 payload. Parameters come first in registry
// order, then buffers.
void save_checkpoint(const DualTsst& model, const std::filesystem::path& path);
DualTsst load_checkpoint(const std::filesystem::path& path);

}  // namespace dtsst
