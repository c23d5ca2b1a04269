#pragma once

// Multiple-input classifier: a tabular MLP branch plus one 3D vision
// transformer branch per ROI (tubelet embedding, class token, pre-norm
// encoder blocks), fused by concatenation into a two-way softmax head.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mimd/random.hpp"
#include "mimd/tensor.hpp"

namespace mimd {

enum class InputMode { Mixed, ImageOnly };

std::string to_string(InputMode mode);
InputMode parse_input_mode(const std::string& s);

struct ImageDims {
  Index slices = 25, height = 32, width = 32, channels = 3;
  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

struct Tubelet {
  Index t = 5, h = 8, w = 8;
  friend bool operator==(const Tubelet&, const Tubelet&) = default;
};

struct ModelConfig {
  ImageDims image;
  Tubelet tubelet;
  Index embed_dim = 64;
  Index depth = 4;
  Index heads = 4;
  Index mlp_ratio = 2;
  double dropout_rate = 0.2;  // forward passes take the rate from ForwardContext; train() uses TrainConfig::dropout
  Index tabular_dim = 4;
  std::vector<Index> tabular_hidden{16, 8};
  Index num_branches = 1;
  Index num_classes = 2;
  InputMode mode = InputMode::Mixed;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  Index token_count() const;
  Index tubelet_width() const { return tubelet.t * tubelet.h * tubelet.w * image.channels; }
  Index tabular_embedding_width() const;
  Index fusion_width() const;
};

/// N = (T/t)(H/h)(W/w); throws ConfigError unless every axis divides exactly.
Index count_tokens(const ImageDims& image, const Tubelet& tubelet);

/// Named learnable tensors of the whole model, ordered by name.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {}

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  Index parameter_count() const;

  /// Tape-tracked aliases of every tensor (storage shared with this object).
  ModelParams tracked(Tape& tape) const;
  ModelParams clone() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Expected shape of every parameter, computed from the configuration alone.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);

/// Names of parameters whose shape differs from parameter_shapes (plus missing
/// and unexpected names). Empty means the audit passed.
std::vector<std::string> audit_shapes(const ModelConfig& config, const ModelParams& params);

/// Truncated-normal (|z| <= 2, std 0.02) weights (tabular layers use the Glorot
/// std sqrt(2 / (fan_in + fan_out)) instead), zero biases and class tokens,
/// normal std 0.02 positional tables, unit layer-norm scales. Each tensor uses
/// its own stream derived from (seed, name), so branches do not depend on
/// which other branches exist.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Forward-pass switches shared by every layer.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  double dropout_rate = 0.0;
};

/// Volume (T,H,W,C) -> tokens (N, d). Tubelets are flattened slice-major, then
/// row, column, channel; tokens are ordered by (temporal, height, width) block.
Tensor tubelet_embed(const Tensor& volume, const ModelConfig& config, const ModelParams& params,
                     Index branch);
/// Gather indices implementing the tubelet flattening for one volume.
std::shared_ptr<const std::vector<Index>> tubelet_index(const ImageDims& image, const Tubelet& tubelet);

Tensor add_cls_and_pos(const Tensor& tokens, const ModelParams& params, Index branch);

/// Pre-norm encoder block. When `attention_out` is given, the per-head
/// attention matrices (after softmax, before dropout) are appended to it.
Tensor attention_block(const Tensor& tokens, const ModelConfig& config, const ModelParams& params,
                       Index branch, Index block, const ForwardContext& ctx,
                       std::vector<Tensor>* attention_out = nullptr);

/// Class-token embedding (length d) of one ROI volume with values in [0, 1];
/// the volume is mapped to [-1, 1] before tubelet embedding.
Tensor encode_image_branch(const Tensor& volume, const ModelConfig& config, const ModelParams& params,
                           Index branch, const ForwardContext& ctx);

/// Dense layers with GELU between them; the last hidden output is the embedding.
Tensor mlp_branch_forward(const Tensor& features, const ModelConfig& config, const ModelParams& params,
                          const ForwardContext& ctx);

/// Concat -> dropout -> dense -> softmax. Returns class probabilities (2).
Tensor fuse_classify(std::span<const Tensor> embeddings, const ModelParams& params,
                     const ForwardContext& ctx);

/// One model input: scaled tabular features and one (T,H,W,C) volume per branch.
struct MixedSample {
  Tensor tabular;              // (F)
  std::vector<Tensor> images;  // num_branches entries
};

Tensor forward(const MixedSample& sample, const ModelConfig& config, const ModelParams& params,
               const ForwardContext& ctx);

}  // namespace mimd
