// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale models with per-layer representation taps.
//
// Layers are the L tapped blocks of the encoder: hidden layers of an MLP, or
// transformer blocks of a tiny ViT. They are 0-based here; reports label them
// 1..L. The head (classifier or decoder) is never tapped.
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ilens/ops.hpp"
#include "ilens/rng.hpp"
#include "ilens/tensor.hpp"

namespace ilens {

enum class ModelKind { mlp, tiny_vit };
enum class HeadKind { classification, reconstruction };
enum class Activation { relu, identity };
/// How a token matrix becomes one row per sample.
enum class TapAggregation { flatten, mean_tokens };

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t numel() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct VitConfig {
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 4;
  std::size_t depth = 4;
  double mlp_ratio = 2.0;

  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * embed_dim)); }
  bool operator==(const VitConfig&) const = default;
};

struct ModelConfig {
  ModelKind kind = ModelKind::tiny_vit;
  ImageShape input;
  std::vector<std::size_t> mlp_widths{64, 64};
  Activation mlp_activation = Activation::relu;
  VitConfig vit;
  std::size_t num_classes = 3;
  HeadKind head = HeadKind::classification;
  TapAggregation taps = TapAggregation::flatten;

  std::size_t layer_count() const { return kind == ModelKind::mlp ? mlp_widths.size() : vit.depth; }
  std::size_t patch_count() const {
    return (input.height / vit.patch_size) * (input.width / vit.patch_size);
  }
  /// Patches plus the class token.
  std::size_t token_count() const { return patch_count() + 1; }

  void validate() const {
    if (input.numel() == 0) throw ConfigError("model input shape has a zero dimension");
    if (head == HeadKind::classification && num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (kind == ModelKind::mlp) {
      if (mlp_widths.empty()) throw ConfigError("mlp_widths must list at least one hidden layer");
      for (auto w : mlp_widths)
        if (w == 0) throw ConfigError("mlp_widths entries must be positive");
      if (head == HeadKind::reconstruction) throw UnsupportedError("reconstruction head requires a tiny_vit encoder");
      return;
    }
    if (vit.patch_size == 0 || input.height % vit.patch_size || input.width % vit.patch_size) {
      throw ConfigError("input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                        " is not divisible by patch_size " + std::to_string(vit.patch_size));
    }
    if (vit.num_heads == 0 || vit.embed_dim % vit.num_heads) {
      throw ConfigError("embed_dim " + std::to_string(vit.embed_dim) + " is not divisible by num_heads " +
                        std::to_string(vit.num_heads));
    }
    if (vit.depth == 0) throw ConfigError("depth must be >= 1");
    if (vit.mlp_hidden() == 0) throw ConfigError("mlp_ratio gives an empty MLP");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

template <class T>
struct Representation {
  int layer = 0;
  Tensor<T> matrix;  // [n x d]
};

template <class T>
struct ForwardResult {
  std::map<int, Representation<T>> taps;
  Tensor<T> head;  // logits [n x C] or image [n x C x H x W]
};

namespace detail {
template <class T>
Tensor<T> scaled_normal(Shape shape, std::size_t fan_in, Rng rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
  return Tensor<T>(std::move(shape), std::move(v));
}
template <class T>
Tensor<T> normal_init(Shape shape, double sd, Rng rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
  return Tensor<T>(std::move(shape), std::move(v));
}
}  // namespace detail

/// Per-patch linear un-embedding followed by a sigmoid, mapping the final
/// token matrix [B, P+1, D] (class token first, ignored) to [B, C, H, W].
template <class T>
struct Decoder {
  ModelConfig encoder;
  Tensor<T> weight;  // [D x C*p*p]
  Tensor<T> bias;    // [C*p*p]

  Tensor<T> forward(const Tensor<T>& tokens) const {
    const auto& c = encoder;
    const std::size_t P = c.patch_count();
    if (tokens.rank() != 3 || tokens.dim(1) != P + 1 || tokens.dim(2) != c.vit.embed_dim) {
      throw DimensionError("decoder: expected tokens [B, " + std::to_string(P + 1) + ", " +
                           std::to_string(c.vit.embed_dim) + "], got " + to_string(tokens.shape()));
    }
    const Tensor<T> patches = linear(slice_tokens(tokens, 1, P), weight, bias);
    return unpatchify(sigmoid(patches), c.input.channels, c.input.height, c.input.width, c.vit.patch_size);
  }
};

template <class T>
void append_decoder_params(std::vector<NamedParam<T>>& out, const ModelConfig& enc, const Rng& rng) {
  const std::size_t D = enc.vit.embed_dim;
  const std::size_t pd = enc.input.channels * enc.vit.patch_size * enc.vit.patch_size;
  out.push_back({"decoder.w", detail::scaled_normal<T>({D, pd}, D, rng.derive("decoder.w"))});
  out.push_back({"decoder.b", Tensor<T>::zeros({pd})});
}

template <class T>
Decoder<T> build_decoder(const ModelConfig& encoder, const Rng& rng) {
  if (encoder.kind != ModelKind::tiny_vit) throw UnsupportedError("decoder needs a tiny_vit encoder");
  ModelConfig enc = encoder;
  enc.head = HeadKind::classification;
  enc.validate();
  std::vector<NamedParam<T>> p;
  append_decoder_params(p, enc, rng);
  return Decoder<T>{encoder, p[0].value, p[1].value};
}

template <class T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<NamedParam<T>> params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    reindex();
  }

  const ModelConfig& config() const { return config_; }
  std::size_t layer_count() const { return config_.layer_count(); }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  const Tensor<T>& param(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ArgumentError("model has no parameter '" + std::string(name) + "'");
    return params_[it->second].value;
  }
  Tensor<T>& param(std::string_view name) {
    return const_cast<Tensor<T>&>(static_cast<const Model&>(*this).param(name));
  }
  bool has_param(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.value.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Deep copy; parameters of the copy share nothing with this model.
  Model clone() const {
    std::vector<NamedParam<T>> copy;
    copy.reserve(params_.size());
    for (const auto& p : params_) {
      Tensor<T> t = p.value.detach();
      t.set_requires_grad(p.value.requires_grad());
      copy.push_back({p.name, t});
    }
    return Model(config_, std::move(copy));
  }
  /// Deep copy whose parameters never receive gradients.
  Model frozen() const {
    Model m = clone();
    m.set_requires_grad(false);
    return m;
  }

  template <class U>
  Model<U> cast() const {
    std::vector<NamedParam<U>> out;
    for (const auto& p : params_) {
      std::vector<U> v(p.value.data().begin(), p.value.data().end());
      Tensor<U> t(p.value.shape(), std::move(v));
      t.set_requires_grad(p.value.requires_grad());
      out.push_back({p.name, t});
    }
    return Model<U>(config_, std::move(out));
  }

  // ------------------------------------------------------------ forward pieces

  /// Input batch [n, C, H, W] to the stream consumed by block 0.
  Tensor<T> embed(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t n = x.dim(0);
    if (config_.kind == ModelKind::mlp) return reshape(x, {n, config_.input.numel()});
    const Tensor<T> patches = patchify(x, config_.vit.patch_size);
    const Tensor<T> tokens = linear(patches, param("patch_embed.w"), param("patch_embed.b"));
    return add(prepend_token(tokens, param("cls_token")), param("pos_embed"));
  }

  /// Block `layer` applied to the stream h.
  Tensor<T> apply_block(const Tensor<T>& h, int layer) const {
    check_layer(layer);
    const std::string pre = prefix(layer);
    if (config_.kind == ModelKind::mlp) {
      const Tensor<T> z = linear(h, param(pre + "w"), param(pre + "b"));
      return config_.mlp_activation == Activation::relu ? relu(z) : z;
    }
    const Tensor<T> a = attention(affine_norm(h, pre + "ln1."), pre + "attn.");
    const Tensor<T> h1 = add(h, a);
    const Tensor<T> m1 = gelu(linear(affine_norm(h1, pre + "ln2."), param(pre + "mlp.fc1.w"), param(pre + "mlp.fc1.b")));
    const Tensor<T> m2 = linear(m1, param(pre + "mlp.fc2.w"), param(pre + "mlp.fc2.b"));
    return add(h1, m2);
  }

  /// Stream h after the last block to the head output.
  Tensor<T> apply_head(const Tensor<T>& h) const {
    if (config_.kind == ModelKind::mlp) return linear(h, param("head.w"), param("head.b"));
    const Tensor<T> normed = affine_norm(h, "final_norm.");
    if (config_.head == HeadKind::reconstruction) {
      return Decoder<T>{config_, param("decoder.w"), param("decoder.b")}.forward(normed);
    }
    const Tensor<T> cls = reshape(slice_tokens(normed, 0, 1), {h.dim(0), config_.vit.embed_dim});
    return linear(cls, param("head.w"), param("head.b"));
  }

  /// One row per sample from a block output.
  Tensor<T> tap(const Tensor<T>& h) const {
    if (config_.kind == ModelKind::mlp) return h;
    if (config_.taps == TapAggregation::mean_tokens) return mean_tokens(h);
    return reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  }

  /// Raw block output of `layer`, stopping the forward pass there.
  Tensor<T> block_output(const Tensor<T>& x, int layer) const {
    check_layer(layer);
    Tensor<T> h = embed(x);
    for (int b = 0; b <= layer; ++b) h = apply_block(h, b);
    return h;
  }

  /// Representation [n x d] of `layer`, stopping the forward pass there.
  Tensor<T> representation(const Tensor<T>& x, int layer) const { return tap(block_output(x, layer)); }

  Tensor<T> forward(const Tensor<T>& x) const { return forward_with_taps(x, {}).head; }

  ForwardResult<T> forward_with_taps(const Tensor<T>& x, std::span<const int> layers) const {
    std::vector<bool> wanted(layer_count(), false);
    for (int l : layers) {
      check_layer(l);
      wanted[static_cast<std::size_t>(l)] = true;
    }
    ForwardResult<T> out;
    Tensor<T> h = embed(x);
    for (std::size_t b = 0; b < layer_count(); ++b) {
      h = apply_block(h, static_cast<int>(b));
      if (wanted[b]) out.taps[static_cast<int>(b)] = Representation<T>{static_cast<int>(b), tap(h)};
    }
    out.head = apply_head(h);
    return out;
  }

  ForwardResult<T> forward_with_taps(const Tensor<T>& x, std::initializer_list<int> layers) const {
    const std::vector<int> v(layers);
    return forward_with_taps(x, std::span<const int>(v));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
  }

  void check_layer(int layer) const {
    if (layer < 0 || static_cast<std::size_t>(layer) >= layer_count()) {
      throw IndexError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(layer_count()) + ")");
    }
  }

  void check_input(const Tensor<T>& x) const {
    const auto& in = config_.input;
    if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width) {
      throw DimensionError("model expects [n, " + std::to_string(in.channels) + ", " + std::to_string(in.height) +
                           ", " + std::to_string(in.width) + "], got " + to_string(x.shape()));
    }
  }

  std::string prefix(int layer) const {
    return (config_.kind == ModelKind::mlp ? "layers." : "blocks.") + std::to_string(layer) + ".";
  }

  Tensor<T> affine_norm(const Tensor<T>& h, const std::string& pre) const {
    return add(mul(layernorm_lastdim(h), param(pre + "g")), param(pre + "b"));
  }

  Tensor<T> attention(const Tensor<T>& h, const std::string& pre) const {
    const std::size_t B = h.dim(0), Tn = h.dim(1), D = h.dim(2);
    const std::size_t H = config_.vit.num_heads, Dh = D / H;
    auto heads = [&](const std::string& name) {
      const Tensor<T> proj = linear(h, param(pre + name + ".w"), param(pre + name + ".b"));
      return reshape(swap_axes_12(reshape(proj, {B, Tn, H, Dh})), {B * H, Tn, Dh});
    };
    const Tensor<T> q = heads("q"), k = heads("k"), v = heads("v");
    const T s = T(1) / std::sqrt(static_cast<T>(Dh));
    const Tensor<T> weights = softmax_lastdim(scale(bmm(q, k, true), s));
    const Tensor<T> ctx = swap_axes_12(reshape(bmm(weights, v), {B, H, Tn, Dh}));
    return linear(reshape(ctx, {B, Tn, D}), param(pre + "proj.w"), param(pre + "proj.b"));
  }

  ModelConfig config_;
  std::vector<NamedParam<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void append_head_params(std::vector<NamedParam<T>>& p, const ModelConfig& c, const Rng& rng) {
  if (c.head == HeadKind::reconstruction) {
    append_decoder_params(p, c, rng);
    return;
  }
  const std::size_t in = c.kind == ModelKind::mlp ? c.mlp_widths.back() : c.vit.embed_dim;
  p.push_back({"head.w", scaled_normal<T>({in, c.num_classes}, in, rng.derive("head.w"))});
  p.push_back({"head.b", Tensor<T>::zeros({c.num_classes})});
}

template <class T>
std::vector<NamedParam<T>> encoder_params(const ModelConfig& c, const Rng& rng) {
  std::vector<NamedParam<T>> p;
  auto lin = [&](const std::string& name, std::size_t in, std::size_t out) {
    p.push_back({name + "w", scaled_normal<T>({in, out}, in, rng.derive(name + "w"))});
    p.push_back({name + "b", Tensor<T>::zeros({out})});
  };
  auto norm = [&](const std::string& name, std::size_t d) {
    p.push_back({name + "g", Tensor<T>::full({d}, T(1))});
    p.push_back({name + "b", Tensor<T>::zeros({d})});
  };
  if (c.kind == ModelKind::mlp) {
    std::size_t in = c.input.numel();
    for (std::size_t l = 0; l < c.mlp_widths.size(); ++l) {
      lin("layers." + std::to_string(l) + ".", in, c.mlp_widths[l]);
      in = c.mlp_widths[l];
    }
    return p;
  }
  const std::size_t D = c.vit.embed_dim, pd = c.input.channels * c.vit.patch_size * c.vit.patch_size;
  lin("patch_embed.", pd, D);
  p.push_back({"cls_token", normal_init<T>({D}, 0.02, rng.derive("cls_token"))});
  p.push_back({"pos_embed", normal_init<T>({c.token_count(), D}, 0.02, rng.derive("pos_embed"))});
  for (std::size_t b = 0; b < c.vit.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    norm(pre + "ln1.", D);
    for (const char* name : {"q", "k", "v", "proj"}) lin(pre + "attn." + name + ".", D, D);
    norm(pre + "ln2.", D);
    lin(pre + "mlp.fc1.", D, c.vit.mlp_hidden());
    lin(pre + "mlp.fc2.", c.vit.mlp_hidden(), D);
  }
  norm("final_norm.", D);
  return p;
}

}  // namespace detail

/// Fresh model; parameter names, shapes and values are a pure function of
/// (config, rng).
template <class T>
Model<T> build_model(const ModelConfig& config, const Rng& rng) {
  config.validate();
  auto params = detail::encoder_params<T>(config, rng);
  detail::append_head_params(params, config, rng);
  Model<T> m(config, std::move(params));
  m.set_requires_grad(true);
  return m;
}

/// Copy of the encoder of `source` with a freshly initialized head for
/// `target` (same encoder architecture, possibly different head).
template <class T>
Model<T> rehead(const Model<T>& source, const ModelConfig& target, const Rng& rng) {
  ModelConfig probe = target;
  probe.head = source.config().head;
  probe.num_classes = source.config().num_classes;
  if (!(probe == source.config())) throw ConfigError("rehead: encoder configuration differs from the source model");
  target.validate();
  std::vector<NamedParam<T>> params;
  const auto enc = detail::encoder_params<T>(target, rng);
  for (const auto& p : enc) {
    Tensor<T> t = source.param(p.name).detach();
    params.push_back({p.name, t});
  }
  detail::append_head_params(params, target, rng);
  Model<T> m(target, std::move(params));
  m.set_requires_grad(true);
  return m;
}

}  // namespace ilens
