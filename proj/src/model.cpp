#include "mimd/model.hpp"

#include <cmath>

#include "mimd/error.hpp"

namespace mimd {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kInitStd = 0.02;

std::string branch_prefix(Index branch) { return "img" + std::to_string(branch) + "."; }
std::string block_prefix(Index branch, Index block) {
  return branch_prefix(branch) + "block" + std::to_string(block) + ".";
}

bool is_bias_like(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".b") || ends_with(".b1") || ends_with(".b2") || ends_with(".beta") ||
         ends_with(".cls");
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace

std::string to_string(InputMode mode) { return mode == InputMode::Mixed ? "mixed" : "image-only"; }

InputMode parse_input_mode(const std::string& s) {
  if (s == "mixed") return InputMode::Mixed;
  if (s == "image-only") return InputMode::ImageOnly;
  throw ConfigError("unknown mode '" + s + "' (expected mixed or image-only)");
}

Index count_tokens(const ImageDims& image, const Tubelet& tubelet) {
  if (tubelet.t <= 0 || tubelet.h <= 0 || tubelet.w <= 0 || image.slices <= 0 || image.height <= 0 ||
      image.width <= 0) {
    throw ConfigError("image and tubelet dimensions must be positive");
  }
  if (image.slices % tubelet.t || image.height % tubelet.h || image.width % tubelet.w) {
    throw ConfigError("tubelet (" + std::to_string(tubelet.t) + "," + std::to_string(tubelet.h) + "," +
                      std::to_string(tubelet.w) + ") does not divide image (" +
                      std::to_string(image.slices) + "," + std::to_string(image.height) + "," +
                      std::to_string(image.width) + ")");
  }
  return (image.slices / tubelet.t) * (image.height / tubelet.h) * (image.width / tubelet.w);
}

void ModelConfig::validate() const {
  count_tokens(image, tubelet);
  if (image.channels <= 0) throw ConfigError("channel count must be positive");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  if (depth < 0) throw ConfigError("depth must be non-negative");
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout must be in [0,1)");
  if (tabular_dim <= 0) throw ConfigError("tabular_dim must be positive");
  for (Index w : tabular_hidden) {
    if (w <= 0) throw ConfigError("tabular hidden widths must be positive");
  }
  if (num_branches < 1) throw ConfigError("at least one image branch is required");
  if (num_classes != 2) throw ConfigError("only binary classification (num_classes = 2) is supported");
}

Index ModelConfig::token_count() const { return count_tokens(image, tubelet); }

Index ModelConfig::tabular_embedding_width() const {
  if (mode == InputMode::ImageOnly) return 0;
  return tabular_hidden.empty() ? tabular_dim : tabular_hidden.back();
}

Index ModelConfig::fusion_width() const { return tabular_embedding_width() + num_branches * embed_dim; }

// ---- ModelParams -----------------------------------------------------------

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Index ModelParams::parameter_count() const {
  Index n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

ModelParams ModelParams::tracked(Tape& tape) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : tensors_) out.emplace(name, tape.track(t));
  return ModelParams(std::move(out));
}

ModelParams ModelParams::clone() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : tensors_) out.emplace(name, t.clone());
  return ModelParams(std::move(out));
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& config) {
  config.validate();
  const Index d = config.embed_dim;
  const Index hidden = config.mlp_ratio * d;
  std::map<std::string, Shape> shapes;
  for (Index br = 0; br < config.num_branches; ++br) {
    const std::string p = branch_prefix(br);
    shapes[p + "embed.w"] = {config.tubelet_width(), d};
    shapes[p + "embed.b"] = {d};
    shapes[p + "cls"] = {1, d};
    shapes[p + "pos"] = {config.token_count() + 1, d};
    for (Index l = 0; l < config.depth; ++l) {
      const std::string q = block_prefix(br, l);
      for (const char* ln : {"ln1", "ln2"}) {
        shapes[q + ln + ".gamma"] = {d};
        shapes[q + ln + ".beta"] = {d};
      }
      for (const char* w : {"wq", "wk", "wv", "wo"}) shapes[q + "attn." + w] = {d, d};
      shapes[q + "mlp.w1"] = {d, hidden};
      shapes[q + "mlp.b1"] = {hidden};
      shapes[q + "mlp.w2"] = {hidden, d};
      shapes[q + "mlp.b2"] = {d};
    }
    shapes[p + "norm.gamma"] = {d};
    shapes[p + "norm.beta"] = {d};
  }
  if (config.mode == InputMode::Mixed) {
    Index in = config.tabular_dim;
    for (std::size_t j = 0; j < config.tabular_hidden.size(); ++j) {
      const std::string p = "tab.dense" + std::to_string(j) + ".";
      shapes[p + "w"] = {in, config.tabular_hidden[j]};
      shapes[p + "b"] = {config.tabular_hidden[j]};
      in = config.tabular_hidden[j];
    }
  }
  shapes["head.w"] = {config.fusion_width(), config.num_classes};
  shapes["head.b"] = {config.num_classes};
  return shapes;
}

std::vector<std::string> audit_shapes(const ModelConfig& config, const ModelParams& params) {
  std::vector<std::string> problems;
  auto expected = parameter_shapes(config);
  for (const auto& [name, shape] : expected) {
    if (!params.contains(name)) {
      problems.push_back("missing " + name);
    } else if (params.at(name).shape() != shape) {
      problems.push_back(name + " has " + shape_string(params.at(name).shape()) + ", expected " +
                         shape_string(shape));
    }
  }
  for (const auto& [name, _] : params.tensors()) {
    if (!expected.count(name)) problems.push_back("unexpected " + name);
  }
  return problems;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Rng rng(derive_seed(seed, stable_hash(name)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Array values(shape_size(shape));
    auto ends_with = [&](const char* s) { return name.ends_with(s); };
    if (ends_with(".gamma")) {
      values.setOnes();
    } else if (is_bias_like(name)) {
      values.setZero();
    } else if (ends_with(".pos")) {
      for (Index i = 0; i < values.size(); ++i) values(i) = kInitStd * normal(rng);
    } else {
      // Tabular layers get Glorot scale: at 0.02 the stacked MLP starts so
      // close to zero that the layer-normed image embedding dominates the head.
      const double sd = name.starts_with("tab.")
                            ? std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]))
                            : kInitStd;
      for (Index i = 0; i < values.size(); ++i) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        values(i) = sd * z;
      }
    }
    tensors.emplace(name, Tensor(shape, std::move(values)));
  }
  return ModelParams(std::move(tensors));
}

// ---- forward pieces --------------------------------------------------------

std::shared_ptr<const std::vector<Index>> tubelet_index(const ImageDims& image, const Tubelet& tb) {
  const Index nt = image.slices / tb.t, nh = image.height / tb.h, nw = image.width / tb.w;
  const Index C = image.channels, H = image.height, W = image.width;
  auto index = std::make_shared<std::vector<Index>>();
  index->reserve(static_cast<std::size_t>(image.slices * H * W * C));
  for (Index bt = 0; bt < nt; ++bt)
    for (Index bh = 0; bh < nh; ++bh)
      for (Index bw = 0; bw < nw; ++bw)
        for (Index a = 0; a < tb.t; ++a)
          for (Index b = 0; b < tb.h; ++b)
            for (Index c = 0; c < tb.w; ++c)
              for (Index ch = 0; ch < C; ++ch) {
                index->push_back((((bt * tb.t + a) * H + bh * tb.h + b) * W + bw * tb.w + c) * C + ch);
              }
  return index;
}

Tensor tubelet_embed(const Tensor& volume, const ModelConfig& config, const ModelParams& params,
                     Index branch) {
  const ImageDims& im = config.image;
  if (volume.shape() != Shape{im.slices, im.height, im.width, im.channels}) {
    throw ShapeError("volume shape " + shape_string(volume.shape()) + " does not match configured " +
                     shape_string({im.slices, im.height, im.width, im.channels}));
  }
  const Index n = config.token_count();
  // Index tables depend only on the geometry; reuse the last one per thread.
  thread_local ImageDims cached_image{0, 0, 0, 0};
  thread_local Tubelet cached_tubelet{0, 0, 0};
  thread_local std::shared_ptr<const std::vector<Index>> cached_index;
  if (!cached_index || !(cached_image == im) || !(cached_tubelet == config.tubelet)) {
    cached_index = tubelet_index(im, config.tubelet);
    cached_image = im;
    cached_tubelet = config.tubelet;
  }
  Tensor patches = gather(volume, cached_index, {n, config.tubelet_width()});
  const std::string p = branch_prefix(branch);
  return dense(patches, params.at(p + "embed.w"), params.at(p + "embed.b"));
}

Tensor add_cls_and_pos(const Tensor& tokens, const ModelParams& params, Index branch) {
  const std::string p = branch_prefix(branch);
  std::vector<Tensor> rows{params.at(p + "cls"), tokens};
  return add(concat(rows, 0), params.at(p + "pos"));
}

Tensor attention_block(const Tensor& tokens, const ModelConfig& config, const ModelParams& params,
                       Index branch, Index block, const ForwardContext& ctx,
                       std::vector<Tensor>* attention_out) {
  const std::string p = block_prefix(branch, block);
  const Index d = config.embed_dim, head_dim = d / config.heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  auto drop = [&](const Tensor& t) {
    if (!ctx.training || ctx.dropout_rate == 0.0) return t;
    return dropout(t, ctx.dropout_rate, true, *ctx.rng);
  };

  Tensor h = layer_norm(tokens, params.at(p + "ln1.gamma"), params.at(p + "ln1.beta"), kLayerNormEps);
  Tensor q = matmul(h, params.at(p + "attn.wq"));
  Tensor k = matmul(h, params.at(p + "attn.wk"));
  Tensor v = matmul(h, params.at(p + "attn.wv"));
  std::vector<Tensor> heads;
  for (Index i = 0; i < config.heads; ++i) {
    Tensor qh = narrow(q, 1, i * head_dim, head_dim);
    Tensor kh = narrow(k, 1, i * head_dim, head_dim);
    Tensor vh = narrow(v, 1, i * head_dim, head_dim);
    Tensor weights = softmax(scale(matmul(qh, transpose(kh)), inv_scale), 1);
    if (attention_out) attention_out->push_back(weights);
    heads.push_back(matmul(drop(weights), vh));
  }
  Tensor attended = matmul(concat(heads, 1), params.at(p + "attn.wo"));
  Tensor x = add(tokens, attended);

  Tensor h2 = layer_norm(x, params.at(p + "ln2.gamma"), params.at(p + "ln2.beta"), kLayerNormEps);
  Tensor m = gelu(dense(h2, params.at(p + "mlp.w1"), params.at(p + "mlp.b1")));
  m = dense(m, params.at(p + "mlp.w2"), params.at(p + "mlp.b2"));
  return add(x, drop(m));
}

Tensor encode_image_branch(const Tensor& volume, const ModelConfig& config, const ModelParams& params,
                           Index branch, const ForwardContext& ctx) {
  // Crops arrive in [0, 1]; mapping to [-1, 1] keeps flat tissue patches from
  // collapsing to one direction under the per-token layer norm.
  Tensor centred = sub(scale(volume, 2.0), Tensor::filled(volume.shape(), 1.0));
  Tensor x = add_cls_and_pos(tubelet_embed(centred, config, params, branch), params, branch);
  for (Index l = 0; l < config.depth; ++l) x = attention_block(x, config, params, branch, l, ctx);
  const std::string p = branch_prefix(branch);
  x = layer_norm(x, params.at(p + "norm.gamma"), params.at(p + "norm.beta"), kLayerNormEps);
  return reshape(narrow(x, 0, 0, 1), {config.embed_dim});
}

Tensor mlp_branch_forward(const Tensor& features, const ModelConfig& config, const ModelParams& params,
                          const ForwardContext&) {
  if (features.size() != config.tabular_dim) {
    throw ShapeError("tabular feature count " + std::to_string(features.size()) + " != configured " +
                     std::to_string(config.tabular_dim));
  }
  Tensor x = reshape(features, {1, config.tabular_dim});
  const std::size_t layers = config.tabular_hidden.size();
  for (std::size_t j = 0; j < layers; ++j) {
    const std::string p = "tab.dense" + std::to_string(j) + ".";
    x = dense(x, params.at(p + "w"), params.at(p + "b"));
    if (j + 1 < layers) x = gelu(x);
  }
  return reshape(x, {x.size()});
}

Tensor fuse_classify(std::span<const Tensor> embeddings, const ModelParams& params,
                     const ForwardContext& ctx) {
  if (embeddings.empty()) throw ShapeError("fuse_classify needs at least one branch embedding");
  Tensor fused = concat(embeddings, 0);
  if (ctx.training && ctx.dropout_rate > 0.0) fused = dropout(fused, ctx.dropout_rate, true, *ctx.rng);
  Tensor logits = dense(reshape(fused, {1, fused.size()}), params.at("head.w"), params.at("head.b"));
  Tensor probs = softmax(logits, 1);
  return reshape(probs, {probs.size()});
}

Tensor forward(const MixedSample& sample, const ModelConfig& config, const ModelParams& params,
               const ForwardContext& ctx) {
  if (static_cast<Index>(sample.images.size()) != config.num_branches) {
    throw DataError("sample supplies " + std::to_string(sample.images.size()) + " ROI volumes, model expects " +
                    std::to_string(config.num_branches));
  }
  if (ctx.training && ctx.dropout_rate > 0.0 && !ctx.rng) {
    throw std::logic_error("training forward with dropout needs an RNG");
  }
  std::vector<Tensor> embeddings;
  if (config.mode == InputMode::Mixed) {
    if (sample.tabular.size() == 0) throw DataError("mixed mode needs tabular features");
    embeddings.push_back(mlp_branch_forward(sample.tabular, config, params, ctx));
  }
  for (Index br = 0; br < config.num_branches; ++br) {
    embeddings.push_back(encode_image_branch(sample.images[static_cast<std::size_t>(br)], config, params, br, ctx));
  }
  return fuse_classify(embeddings, params, ctx);
}

}  // namespace mimd
