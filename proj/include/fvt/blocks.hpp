#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fvt/rng.hpp"
#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

enum class Variant { kVit, kLlama, kOpt };
enum class FfnActivation { kGelu, kRelu };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
std::string_view to_string(FfnActivation a);
FfnActivation parse_activation(std::string_view s);

// Parameters of one pre-norm transformer block. Matrices are stored
// [in, out] so that token rows multiply on the left. VIT/OPT blocks use
// LayerNorm, biased projections and a two-layer MLP; LLAMA blocks use
// RMSNorm, no biases, and a SwiGLU feedforward.
struct BlockWeights {
  Variant variant = Variant::kLlama;
  std::size_t dim = 0;
  std::size_t n_heads = 0;
  std::size_t ffn_hidden = 0;
  FfnActivation activation = FfnActivation::kGelu;  // VIT/OPT only
  real norm_eps = 0;

  Tensor wq, wk, wv, wo;
  Tensor bq, bk, bv, bo;
  Tensor norm1_weight, norm1_bias;
  Tensor norm2_weight, norm2_bias;
  Tensor fc1, fc1_bias, fc2, fc2_bias;
  Tensor gate, up, down;

  // Canonical field names carried by a variant, e.g. "attn.wq", "ffn.gate".
  static const std::vector<std::string>& field_names(Variant variant);
  // Expected shape of a named field for the given dimensions.
  static Shape field_shape(std::string_view field, std::size_t dim, std::size_t ffn_hidden);

  // All-zero block with unit norm weights.
  static BlockWeights zeros(Variant variant, std::size_t dim, std::size_t n_heads,
                            std::size_t ffn_hidden);

  Tensor& field(std::string_view name);
  const Tensor& field(std::string_view name) const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;

  // Throws ContractError naming the first inconsistency.
  void validate() const;
  BlockWeights clone() const;
  void set_trainable(bool trainable);
};

// ViT-style encoder block: Xavier-uniform matrices, zero biases.
BlockWeights init_vit_block(std::size_t dim, std::size_t n_heads, std::size_t ffn_hidden,
                            Rng& rng);

// Per-head attention weights are [H, T, T] for a [T, D] input and
// [B, H, T, T] for a batched [B, T, D] input.
struct AttentionResult {
  Tensor output;
  Tensor scores;
};

struct AttentionTrace {
  Tensor scores;
  Tensor post_attention;  // h = x + Attn(norm1(x))
  Tensor post_ffn;        // y = h + FFN(norm2(h))
};

struct BlockOutput {
  Tensor y;
  AttentionTrace trace;
};

inline constexpr real kPaddedLogit = real(-1e9);

// Bidirectional scaled dot-product attention over already-normalized tokens.
// `valid` flags real tokens (1) versus padding (0) and applies to keys;
// empty means no padding. Residual is left to the caller. No positional
// signal of any kind is injected.
AttentionResult multi_head_attention(const Tensor& x, const BlockWeights& w,
                                     std::span<const std::uint8_t> valid = {});

BlockOutput block_forward(const Tensor& x, const BlockWeights& w,
                          std::span<const std::uint8_t> valid = {});

// Normalization used by the block's variant.
Tensor block_norm(const Tensor& x, const BlockWeights& w, int which);

}  // namespace FVT_NS
}  // namespace fvt
