#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fvt/blocks.hpp"
#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

// Ablation arms. PLUS_LLM and PLUS_RANDOM_LLM freeze the inserted blocks;
// PLUS_LLM_FT trains them; PLUS_MLP replaces them with GELU + LayerNorm.
enum class Arm { kBaseline, kPlusLlm, kPlusMlp, kPlusRandomLlm, kPlusLlmFt };
enum class InsertPosition { kTail, kMiddle, kHead };

std::string_view to_string(Arm arm);
Arm parse_arm(std::string_view s);
std::string_view to_string(InsertPosition p);
InsertPosition parse_insert_position(std::string_view s);
const std::vector<Arm>& all_arms();

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t encoder_dim = 64;
  std::size_t encoder_depth = 4;
  std::size_t encoder_heads = 4;
  std::size_t encoder_mlp_ratio = 4;
  std::size_t llm_dim = 128;
  std::size_t llm_heads = 4;
  std::size_t llm_ffn_hidden = 256;
  Variant llm_variant = Variant::kLlama;
  Arm arm = Arm::kBaseline;
  std::size_t n_llm_blocks = 1;
  InsertPosition insert_position = InsertPosition::kTail;
  std::size_t n_classes = 4;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t visual_tokens() const { return grid() * grid(); }
  std::size_t tokens() const { return visual_tokens() + 1; }
  // Index of the encoder block the inserted stage precedes (depth = after all).
  std::size_t insert_index() const;
  bool has_stage() const { return arm != Arm::kBaseline; }
  bool has_llm_blocks() const { return has_stage() && arm != Arm::kPlusMlp; }
};

struct Parameter {
  std::string name;
  Tensor tensor;
  bool decay = true;  // subject to decoupled weight decay
};

std::size_t parameter_count(const std::vector<Parameter>& params);
// FNV-1a over names and raw value bytes.
std::uint64_t parameter_checksum(const std::vector<Parameter>& params);

enum class TraceStage { kEncoder, kL1, kLlmAttn, kLlmFfn, kL2 };
std::string_view to_string(TraceStage s);
TraceStage parse_trace_stage(std::string_view s);

// Per-stage token features from one traced forward. Feature fields hold
// visual tokens only ([V, width]); stages the arm lacks stay undefined.
struct TraceBundle {
  Tensor z_encoder;  // input of the inserted stage (final encoder output for BASELINE)
  Tensor z_l1;
  Tensor z_attn;
  Tensor z_ffn;
  Tensor z_l2;
  Tensor cls_final;             // [encoder_dim]
  std::vector<real> w;          // head-summed CLS->visual attention, sums to 1
  Tensor per_head_w;            // [heads, V], CLS row restricted to visual keys
  // Full stage output [1, T, encoder_dim] including CLS, still attached to
  // the graph (undefined for BASELINE).
  Tensor stage_output;

  const Tensor& stage(TraceStage s) const;
};

class Model {
 public:
  // `llm_source` is required for PLUS_LLM and PLUS_LLM_FT; the first
  // n_llm_blocks entries are copied and the stage width is taken from them.
  // PLUS_RANDOM_LLM draws its blocks from `seed`.
  static Model build(const ModelConfig& config, const std::vector<BlockWeights>* llm_source,
                     std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model clone() const;

  const ModelConfig& config() const { return config_; }

  // [C,H,W] -> [n_classes]; [B,C,H,W] -> [B,n_classes].
  Tensor forward(const Tensor& images) const;
  std::pair<Tensor, TraceBundle> forward_traced(const Tensor& image) const;

  std::vector<Parameter> parameters() const;
  std::vector<Parameter> trainable_parameters() const;
  std::vector<Parameter> frozen_parameters() const;
  // Throws ContractError for unknown names.
  Tensor parameter(std::string_view name) const;

  // PLUS_LLM only. Collapses adapter_out and the inserted blocks (norms,
  // biases and nonlinearities removed) into one affine map applied per token
  // after adapter_in. The last inserted block is kept, frozen, to score
  // CLS-to-visual attention with the CLS key removed.
  Model linearized_stage() const;
  bool linearized() const { return linearized_; }
  // Linearized models only: [..., llm_dim] -> [..., encoder_dim].
  Tensor apply_stage_map(const Tensor& z_l1) const;
  void set_stage_map(const Tensor& weight, const Tensor& bias);

  const std::vector<BlockWeights>& encoder_blocks() const { return encoder_; }
  const std::vector<BlockWeights>& llm_blocks() const { return llm_; }

 private:
  Model() = default;
  Tensor run(const Tensor& images, TraceBundle* trace) const;
  Tensor embed(const Tensor& images) const;
  Tensor stage_forward(const Tensor& tokens, TraceBundle* trace, Tensor* scores) const;
  template <class Self, class F>
  static void visit(Self& self, F&& fn);

  ModelConfig config_;
  Tensor patch_weight_, patch_bias_, cls_token_, pos_embed_;
  std::vector<BlockWeights> encoder_;
  Tensor adapter_in_weight_, adapter_in_bias_;
  Tensor bridge_norm_weight_, bridge_norm_bias_;
  std::vector<BlockWeights> llm_;
  Tensor adapter_out_weight_, adapter_out_bias_;
  Tensor head_norm_weight_, head_norm_bias_, head_weight_, head_bias_;

  bool linearized_ = false;
  Tensor stage_map_weight_, stage_map_bias_;
};

}  // namespace FVT_NS
}  // namespace fvt
