#include "fvt/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "fvt/errors.hpp"
#include "fvt/ops.hpp"

namespace fvt {
inline namespace FVT_NS {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kVit: return "vit";
    case Variant::kLlama: return "llama";
    case Variant::kOpt: return "opt";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "vit") return Variant::kVit;
  if (s == "llama") return Variant::kLlama;
  if (s == "opt") return Variant::kOpt;
  throw ConfigError("unknown block variant '" + std::string(s) + "' (expected vit|llama|opt)");
}

std::string_view to_string(FfnActivation a) {
  return a == FfnActivation::kGelu ? "gelu" : "relu";
}

FfnActivation parse_activation(std::string_view s) {
  if (s == "gelu") return FfnActivation::kGelu;
  if (s == "relu") return FfnActivation::kRelu;
  throw ConfigError("unknown ffn activation '" + std::string(s) + "' (expected gelu|relu)");
}

const std::vector<std::string>& BlockWeights::field_names(Variant variant) {
  static const std::vector<std::string> llama = {
      "attn.wq", "attn.wk", "attn.wv", "attn.wo", "norm1.weight", "norm2.weight",
      "ffn.gate", "ffn.up", "ffn.down"};
  static const std::vector<std::string> biased = {
      "attn.wq",      "attn.wk",     "attn.wv",      "attn.wo",     "attn.bq",
      "attn.bk",      "attn.bv",     "attn.bo",      "norm1.weight", "norm1.bias",
      "norm2.weight", "norm2.bias",  "ffn.fc1",      "ffn.fc1_bias", "ffn.fc2",
      "ffn.fc2_bias"};
  return variant == Variant::kLlama ? llama : biased;
}

Shape BlockWeights::field_shape(std::string_view f, std::size_t dim, std::size_t hidden) {
  if (f == "attn.wq" || f == "attn.wk" || f == "attn.wv" || f == "attn.wo") return {dim, dim};
  if (f == "ffn.gate" || f == "ffn.up" || f == "ffn.fc1") return {dim, hidden};
  if (f == "ffn.down" || f == "ffn.fc2") return {hidden, dim};
  if (f == "ffn.fc1_bias") return {hidden};
  return {dim};
}

Tensor& BlockWeights::field(std::string_view f) {
  if (f == "attn.wq") return wq;
  if (f == "attn.wk") return wk;
  if (f == "attn.wv") return wv;
  if (f == "attn.wo") return wo;
  if (f == "attn.bq") return bq;
  if (f == "attn.bk") return bk;
  if (f == "attn.bv") return bv;
  if (f == "attn.bo") return bo;
  if (f == "norm1.weight") return norm1_weight;
  if (f == "norm1.bias") return norm1_bias;
  if (f == "norm2.weight") return norm2_weight;
  if (f == "norm2.bias") return norm2_bias;
  if (f == "ffn.fc1") return fc1;
  if (f == "ffn.fc1_bias") return fc1_bias;
  if (f == "ffn.fc2") return fc2;
  if (f == "ffn.fc2_bias") return fc2_bias;
  if (f == "ffn.gate") return gate;
  if (f == "ffn.up") return up;
  if (f == "ffn.down") return down;
  throw ContractError("unknown block field '" + std::string(f) + "'");
}

const Tensor& BlockWeights::field(std::string_view f) const {
  return const_cast<BlockWeights*>(this)->field(f);
}

std::vector<std::pair<std::string, Tensor>> BlockWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& name : field_names(variant)) out.emplace_back(name, field(name));
  return out;
}

BlockWeights BlockWeights::zeros(Variant variant, std::size_t dim, std::size_t n_heads,
                                 std::size_t ffn_hidden) {
  BlockWeights w;
  w.variant = variant;
  w.dim = dim;
  w.n_heads = n_heads;
  w.ffn_hidden = ffn_hidden;
  w.norm_eps = variant == Variant::kLlama ? kRmsNormEps : kLayerNormEps;
  for (const auto& name : field_names(variant)) {
    const bool unit = name == "norm1.weight" || name == "norm2.weight";
    w.field(name) = Tensor::full(field_shape(name, dim, ffn_hidden), unit ? real{1} : real{0});
  }
  return w;
}

void BlockWeights::validate() const {
  if (dim == 0 || n_heads == 0 || ffn_hidden == 0) {
    throw ContractError("block dimensions must be positive");
  }
  if (dim % n_heads != 0) {
    throw ContractError("block dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  }
  const auto& names = field_names(variant);
  for (const auto& name : names) {
    const Tensor& t = field(name);
    if (!t.defined()) {
      throw ContractError(std::string(to_string(variant)) + " block is missing '" + name + "'");
    }
    const Shape expect = field_shape(name, dim, ffn_hidden);
    if (t.shape() != expect) {
      throw ContractError("block field '" + name + "' has shape " + shape_str(t.shape()) +
                          ", expected " + shape_str(expect));
    }
  }
  // fields belonging to the other family must be absent
  const auto& other = field_names(variant == Variant::kLlama ? Variant::kOpt : Variant::kLlama);
  for (const auto& name : other) {
    if (std::find(names.begin(), names.end(), name) == names.end() && field(name).defined()) {
      throw ContractError(std::string(to_string(variant)) + " block must not carry '" + name +
                          "'");
    }
  }
}

BlockWeights BlockWeights::clone() const {
  BlockWeights w = *this;
  for (const auto& name : field_names(variant)) w.field(name) = field(name).clone();
  return w;
}

void BlockWeights::set_trainable(bool trainable) {
  for (const auto& name : field_names(variant)) field(name).set_requires_grad(trainable);
}

BlockWeights init_vit_block(std::size_t dim, std::size_t n_heads, std::size_t ffn_hidden,
                            Rng& rng) {
  BlockWeights w = BlockWeights::zeros(Variant::kVit, dim, n_heads, ffn_hidden);
  for (const char* name : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.fc1", "ffn.fc2"}) {
    Tensor& t = w.field(name);
    const double bound = std::sqrt(6.0 / double(t.dim(0) + t.dim(1)));
    t = rng.uniform_tensor(t.shape(), -bound, bound);
  }
  w.validate();
  return w;
}

Tensor block_norm(const Tensor& x, const BlockWeights& w, int which) {
  const Tensor& weight = which == 1 ? w.norm1_weight : w.norm2_weight;
  if (w.variant == Variant::kLlama) return rms_norm(x, weight, w.norm_eps);
  return layer_norm(x, weight, which == 1 ? w.norm1_bias : w.norm2_bias, w.norm_eps);
}

AttentionResult multi_head_attention(const Tensor& x, const BlockWeights& w,
                                     std::span<const std::uint8_t> valid) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("attention input must be [T,D] or [B,T,D], got " + shape_str(x.shape()));
  }
  if (x.dim(-1) != w.dim) {
    throw ShapeError("attention input width " + std::to_string(x.dim(-1)) +
                     " does not match block dim " + std::to_string(w.dim));
  }
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t tokens = x.dim(-2);
  const std::size_t heads = w.n_heads;
  const std::size_t head_dim = w.dim / heads;
  if (!valid.empty() && valid.size() != tokens) {
    throw ShapeError("padding mask length " + std::to_string(valid.size()) + " != " +
                     std::to_string(tokens) + " tokens");
  }

  auto split_heads = [&](const Tensor& t) {
    // [B,T,D] -> [B,T,H,dh] -> [B,H,T,dh] -> [B*H,T,dh]
    Tensor r = reshape(t, {batch, tokens, heads, head_dim});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {batch * heads, tokens, head_dim});
  };
  const Tensor q = split_heads(linear(x, w.wq, w.bq));
  const Tensor k = split_heads(linear(x, w.wk, w.bk));
  const Tensor v = split_heads(linear(x, w.wv, w.bv));

  Tensor logits = scale(bmm(q, transpose(k)), static_cast<real>(1.0 / std::sqrt(double(head_dim))));
  const bool any_padded =
      std::any_of(valid.begin(), valid.end(), [](std::uint8_t f) { return f == 0; });
  if (any_padded) {
    std::vector<real> bias(tokens, real{0});
    for (std::size_t j = 0; j < tokens; ++j) {
      if (!valid[j]) bias[j] = kPaddedLogit;
    }
    logits = add_broadcast(logits, Tensor::from({tokens}, std::move(bias)));
  }
  const Tensor scores = softmax(logits, -1);

  Tensor mixed = bmm(scores, v);
  mixed = reshape(mixed, {batch, heads, tokens, head_dim});
  mixed = permute(mixed, {0, 2, 1, 3});
  mixed = reshape(mixed, batched ? Shape{batch, tokens, w.dim} : Shape{tokens, w.dim});

  AttentionResult result;
  result.output = linear(mixed, w.wo, w.bo);
  result.scores = reshape(scores, batched ? Shape{batch, heads, tokens, tokens}
                                          : Shape{heads, tokens, tokens});
  return result;
}

BlockOutput block_forward(const Tensor& x, const BlockWeights& w,
                          std::span<const std::uint8_t> valid) {
  w.validate();
  AttentionResult attn = multi_head_attention(block_norm(x, w, 1), w, valid);
  const Tensor h = add(x, attn.output);
  const Tensor n2 = block_norm(h, w, 2);
  Tensor ffn;
  if (w.variant == Variant::kLlama) {
    ffn = linear(mul(silu(linear(n2, w.gate)), linear(n2, w.up)), w.down);
  } else {
    Tensor hidden = linear(n2, w.fc1, w.fc1_bias);
    hidden = w.activation == FfnActivation::kGelu ? gelu(hidden) : relu(hidden);
    ffn = linear(hidden, w.fc2, w.fc2_bias);
  }
  BlockOutput out;
  out.y = add(h, ffn);
  out.trace.scores = attn.scores;
  out.trace.post_attention = h;
  out.trace.post_ffn = out.y;
  return out;
}

}  // namespace FVT_NS
}  // namespace fvt
