#include "fvt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fvt/errors.hpp"
#include "fvt/ops.hpp"
#include "fvt/rng.hpp"
#include "fvt/weights_io.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

// Seed streams; every arm draws the shared modules from the same stream so
// that arms differ only in the inserted stage.
constexpr std::uint64_t kStreamPatch = 1;
constexpr std::uint64_t kStreamPosCls = 2;
constexpr std::uint64_t kStreamAdapters = 3;
constexpr std::uint64_t kStreamHead = 4;
constexpr std::uint64_t kStreamRandomLlm = 5;
constexpr std::uint64_t kStreamEncoder = 10;

Tensor visual_rows(const Tensor& t, std::size_t visual) {
  // [1, T, W] -> [V, W]
  return reshape(slice(t, 1, 1, visual), {visual, t.dim(-1)});
}

Tensor cls_row(const Tensor& t) {
  return reshape(slice(t, 1, 0, 1), {t.dim(-1)});
}

}  // namespace

std::string_view to_string(Arm arm) {
  switch (arm) {
    case Arm::kBaseline: return "baseline";
    case Arm::kPlusLlm: return "plus_llm";
    case Arm::kPlusMlp: return "plus_mlp";
    case Arm::kPlusRandomLlm: return "plus_random_llm";
    case Arm::kPlusLlmFt: return "plus_llm_ft";
  }
  return "?";
}

Arm parse_arm(std::string_view s) {
  for (Arm a : all_arms()) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown arm '" + std::string(s) +
                    "' (expected baseline|plus_llm|plus_mlp|plus_random_llm|plus_llm_ft)");
}

std::string_view to_string(InsertPosition p) {
  switch (p) {
    case InsertPosition::kTail: return "tail";
    case InsertPosition::kMiddle: return "middle";
    case InsertPosition::kHead: return "head";
  }
  return "?";
}

InsertPosition parse_insert_position(std::string_view s) {
  if (s == "tail") return InsertPosition::kTail;
  if (s == "middle") return InsertPosition::kMiddle;
  if (s == "head") return InsertPosition::kHead;
  throw ConfigError("unknown insert position '" + std::string(s) + "' (expected tail|middle|head)");
}

const std::vector<Arm>& all_arms() {
  static const std::vector<Arm> arms = {Arm::kBaseline, Arm::kPlusLlm, Arm::kPlusMlp,
                                        Arm::kPlusRandomLlm, Arm::kPlusLlmFt};
  return arms;
}

std::string_view to_string(TraceStage s) {
  switch (s) {
    case TraceStage::kEncoder: return "encoder";
    case TraceStage::kL1: return "l1";
    case TraceStage::kLlmAttn: return "llm_attn";
    case TraceStage::kLlmFfn: return "llm_ffn";
    case TraceStage::kL2: return "l2";
  }
  return "?";
}

TraceStage parse_trace_stage(std::string_view s) {
  for (TraceStage t : {TraceStage::kEncoder, TraceStage::kL1, TraceStage::kLlmAttn,
                       TraceStage::kLlmFfn, TraceStage::kL2}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown trace stage '" + std::string(s) +
                    "' (expected encoder|l1|llm_attn|llm_ffn|l2)");
}

const Tensor& TraceBundle::stage(TraceStage s) const {
  const Tensor* t = nullptr;
  switch (s) {
    case TraceStage::kEncoder: t = &z_encoder; break;
    case TraceStage::kL1: t = &z_l1; break;
    case TraceStage::kLlmAttn: t = &z_attn; break;
    case TraceStage::kLlmFfn: t = &z_ffn; break;
    case TraceStage::kL2: t = &z_l2; break;
  }
  if (!t || !t->defined()) {
    throw ContractError("trace stage '" + std::string(to_string(s)) +
                        "' is not produced by this arm");
  }
  return *t;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (image_size == 0 || patch_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
         std::to_string(patch_size));
  }
  if (channels == 0) fail("channels must be positive");
  if (encoder_dim == 0 || encoder_heads == 0 || encoder_dim % encoder_heads != 0) {
    fail("encoder_dim " + std::to_string(encoder_dim) + " must be a positive multiple of " +
         std::to_string(encoder_heads) + " heads");
  }
  if (encoder_depth == 0) fail("encoder_depth must be at least 1");
  if (encoder_mlp_ratio == 0) fail("encoder_mlp_ratio must be positive");
  if (n_classes == 0) fail("n_classes must be positive");
  if (has_stage()) {
    if (llm_dim == 0 || llm_heads == 0 || llm_dim % llm_heads != 0) {
      fail("llm_dim " + std::to_string(llm_dim) + " must be a positive multiple of " +
           std::to_string(llm_heads) + " heads");
    }
    if (llm_ffn_hidden == 0) fail("llm_ffn_hidden must be positive");
    if (llm_variant == Variant::kVit) fail("llm_variant must be llama or opt");
    if (n_llm_blocks == 0) fail("n_llm_blocks must be at least 1");
  }
}

std::size_t ModelConfig::insert_index() const {
  switch (insert_position) {
    case InsertPosition::kTail: return encoder_depth;
    case InsertPosition::kMiddle: return encoder_depth / 2;
    case InsertPosition::kHead: return 0;
  }
  return encoder_depth;
}

std::size_t parameter_count(const std::vector<Parameter>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

std::uint64_t parameter_checksum(const std::vector<Parameter>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    const auto d = p.tensor.data();
    mix(d.data(), d.size_bytes());
  }
  return h;
}

template <class Self, class F>
void Model::visit(Self& self, F&& fn) {
  auto opt = [&](const std::string& name, auto& t) {
    if (t.defined()) fn(name, t);
  };
  opt("patch_embed.weight", self.patch_weight_);
  opt("patch_embed.bias", self.patch_bias_);
  opt("cls_token", self.cls_token_);
  opt("pos_embed", self.pos_embed_);
  for (std::size_t i = 0; i < self.encoder_.size(); ++i) {
    auto& blk = self.encoder_[i];
    for (const auto& f : BlockWeights::field_names(blk.variant)) {
      opt("encoder." + std::to_string(i) + "." + f, blk.field(f));
    }
  }
  opt("adapter_in.weight", self.adapter_in_weight_);
  opt("adapter_in.bias", self.adapter_in_bias_);
  opt("bridge.norm.weight", self.bridge_norm_weight_);
  opt("bridge.norm.bias", self.bridge_norm_bias_);
  for (std::size_t i = 0; i < self.llm_.size(); ++i) {
    auto& blk = self.llm_[i];
    for (const auto& f : BlockWeights::field_names(blk.variant)) {
      opt("llm." + std::to_string(i) + "." + f, blk.field(f));
    }
  }
  opt("adapter_out.weight", self.adapter_out_weight_);
  opt("adapter_out.bias", self.adapter_out_bias_);
  opt("stage_map.weight", self.stage_map_weight_);
  opt("stage_map.bias", self.stage_map_bias_);
  opt("head.norm.weight", self.head_norm_weight_);
  opt("head.norm.bias", self.head_norm_bias_);
  opt("head.weight", self.head_weight_);
  opt("head.bias", self.head_bias_);
}

Model Model::build(const ModelConfig& config, const std::vector<BlockWeights>* llm_source,
                   std::uint64_t seed) {
  ModelConfig cfg = config;
  const bool needs_source = cfg.arm == Arm::kPlusLlm || cfg.arm == Arm::kPlusLlmFt;
  std::vector<BlockWeights> llm;
  if (needs_source) {
    if (!llm_source || llm_source->empty()) {
      throw ConfigError("arm " + std::string(to_string(cfg.arm)) +
                        " requires source LLM blocks");
    }
    if (llm_source->size() < cfg.n_llm_blocks) {
      throw ConfigError("arm needs " + std::to_string(cfg.n_llm_blocks) + " LLM blocks, source has " +
                        std::to_string(llm_source->size()));
    }
    const BlockWeights& first = llm_source->front();
    for (std::size_t i = 0; i < cfg.n_llm_blocks; ++i) {
      const BlockWeights& b = (*llm_source)[i];
      b.validate();
      if (b.variant != first.variant || b.dim != first.dim || b.n_heads != first.n_heads ||
          b.ffn_hidden != first.ffn_hidden) {
        throw ConfigError("source LLM blocks disagree on variant or dimensions");
      }
      llm.push_back(b.clone());
    }
    cfg.llm_dim = first.dim;
    cfg.llm_heads = first.n_heads;
    cfg.llm_ffn_hidden = first.ffn_hidden;
    cfg.llm_variant = first.variant;
  }
  cfg.validate();
  if (cfg.arm == Arm::kPlusRandomLlm) {
    llm = mock_llm(Rng::derive(seed, kStreamRandomLlm), cfg.llm_dim, cfg.llm_heads,
                   cfg.llm_ffn_hidden, cfg.llm_variant, cfg.n_llm_blocks);
  }

  Model m;
  m.config_ = cfg;
  const std::size_t d = cfg.encoder_dim;
  const std::size_t patch_in = cfg.channels * cfg.patch_size * cfg.patch_size;

  {
    Rng rng(Rng::derive(seed, kStreamPatch));
    const double bound = 1.0 / std::sqrt(double(patch_in));
    m.patch_weight_ = rng.uniform_tensor({patch_in, d}, -bound, bound, true);
    m.patch_bias_ = rng.uniform_tensor({d}, -bound, bound, true);
  }
  {
    Rng rng(Rng::derive(seed, kStreamPosCls));
    m.cls_token_ = rng.truncated_normal_tensor({d}, 0.02, true);
    m.pos_embed_ = rng.truncated_normal_tensor({cfg.tokens(), d}, 0.02, true);
  }
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    Rng rng(Rng::derive(seed, kStreamEncoder + i));
    BlockWeights b = init_vit_block(d, cfg.encoder_heads, d * cfg.encoder_mlp_ratio, rng);
    b.set_trainable(true);
    m.encoder_.push_back(std::move(b));
  }
  if (cfg.has_stage()) {
    Rng rng(Rng::derive(seed, kStreamAdapters));
    const std::size_t l = cfg.llm_dim;
    const double in_bound = 1.0 / std::sqrt(double(d));
    const double out_bound = 1.0 / std::sqrt(double(l));
    m.adapter_in_weight_ = rng.uniform_tensor({d, l}, -in_bound, in_bound, true);
    m.adapter_in_bias_ = rng.uniform_tensor({l}, -in_bound, in_bound, true);
    m.adapter_out_weight_ = rng.uniform_tensor({l, d}, -out_bound, out_bound, true);
    m.adapter_out_bias_ = rng.uniform_tensor({d}, -out_bound, out_bound, true);
    if (cfg.arm == Arm::kPlusMlp) {
      m.bridge_norm_weight_ = Tensor::full({l}, 1, true);
      m.bridge_norm_bias_ = Tensor::zeros({l}, true);
    } else {
      const bool trainable = cfg.arm == Arm::kPlusLlmFt;
      for (auto& b : llm) b.set_trainable(trainable);
      m.llm_ = std::move(llm);
    }
  }
  {
    Rng rng(Rng::derive(seed, kStreamHead));
    m.head_norm_weight_ = Tensor::full({d}, 1, true);
    m.head_norm_bias_ = Tensor::zeros({d}, true);
    m.head_weight_ = rng.truncated_normal_tensor({d, cfg.n_classes}, 0.02, true);
    m.head_bias_ = Tensor::zeros({cfg.n_classes}, true);
  }
  return m;
}

Model Model::clone() const {
  Model m;
  m.config_ = config_;
  m.linearized_ = linearized_;
  m.patch_weight_ = patch_weight_;
  m.patch_bias_ = patch_bias_;
  m.cls_token_ = cls_token_;
  m.pos_embed_ = pos_embed_;
  m.encoder_ = encoder_;
  m.adapter_in_weight_ = adapter_in_weight_;
  m.adapter_in_bias_ = adapter_in_bias_;
  m.bridge_norm_weight_ = bridge_norm_weight_;
  m.bridge_norm_bias_ = bridge_norm_bias_;
  m.llm_ = llm_;
  m.adapter_out_weight_ = adapter_out_weight_;
  m.adapter_out_bias_ = adapter_out_bias_;
  m.head_norm_weight_ = head_norm_weight_;
  m.head_norm_bias_ = head_norm_bias_;
  m.head_weight_ = head_weight_;
  m.head_bias_ = head_bias_;
  m.stage_map_weight_ = stage_map_weight_;
  m.stage_map_bias_ = stage_map_bias_;
  visit(m, [](const std::string&, Tensor& t) { t = t.clone(); });
  return m;
}

std::vector<Parameter> Model::parameters() const {
  std::vector<Parameter> out;
  visit(*this, [&](const std::string& name, const Tensor& t) {
    out.push_back({name, t, t.rank() >= 2 && name != "pos_embed"});
  });
  return out;
}

std::vector<Parameter> Model::trainable_parameters() const {
  std::vector<Parameter> out;
  for (auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

std::vector<Parameter> Model::frozen_parameters() const {
  std::vector<Parameter> out;
  for (auto& p : parameters()) {
    if (!p.tensor.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

Tensor Model::parameter(std::string_view name) const {
  Tensor found;
  visit(*this, [&](const std::string& n, const Tensor& t) {
    if (n == name) found = t;
  });
  if (!found.defined()) throw ContractError("model has no parameter '" + std::string(name) + "'");
  return found;
}

Tensor Model::embed(const Tensor& images) const {
  const std::size_t b = images.dim(0);
  const std::size_t c = config_.channels;
  const std::size_t p = config_.patch_size;
  const std::size_t g = config_.grid();
  Tensor x = reshape(images, {b, c, g, p, g, p});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  x = reshape(x, {b, g * g, c * p * p});
  x = linear(x, patch_weight_, patch_bias_);
  const Tensor cls = repeat_leading(reshape(cls_token_, {1, config_.encoder_dim}), b);
  x = concat({cls, x}, 1);
  return add_broadcast(x, pos_embed_);
}

Tensor Model::stage_forward(const Tensor& tokens, TraceBundle* trace, Tensor* scores) const {
  const Tensor z1 = linear(tokens, adapter_in_weight_, adapter_in_bias_);
  Tensor z2;
  Tensor z_attn, z_ffn;
  if (linearized_) {
    z2 = apply_stage_map(z1);
    if (trace) {
      // CLS removed from the keys so that its row mixes visual tokens only.
      std::vector<std::uint8_t> valid(config_.tokens(), 1);
      valid[0] = 0;
      const BlockWeights& kept = llm_.back();
      *scores = multi_head_attention(block_norm(z1, kept, 1), kept, valid).scores;
    }
  } else if (config_.arm == Arm::kPlusMlp) {
    const Tensor h = layer_norm(gelu(z1), bridge_norm_weight_, bridge_norm_bias_);
    z2 = linear(h, adapter_out_weight_, adapter_out_bias_);
  } else {
    Tensor h = z1;
    for (const auto& blk : llm_) {
      BlockOutput o = block_forward(h, blk);
      h = o.y;
      z_attn = o.trace.post_attention;
      z_ffn = o.trace.post_ffn;
      if (scores) *scores = o.trace.scores;
    }
    z2 = linear(h, adapter_out_weight_, adapter_out_bias_);
  }
  if (trace) {
    const std::size_t v = config_.visual_tokens();
    trace->z_encoder = visual_rows(tokens, v);
    trace->z_l1 = visual_rows(z1, v);
    if (z_attn.defined()) trace->z_attn = visual_rows(z_attn, v);
    if (z_ffn.defined()) trace->z_ffn = visual_rows(z_ffn, v);
    trace->z_l2 = visual_rows(z2, v);
    trace->stage_output = z2;
  }
  return z2;
}

Tensor Model::run(const Tensor& images, TraceBundle* trace) const {
  Tensor x = embed(images);
  const std::size_t at = config_.insert_index();
  const bool stage = config_.has_stage();
  Tensor stage_scores, encoder_scores;
  Tensor* stage_scores_out = trace ? &stage_scores : nullptr;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    if (stage && i == at) x = stage_forward(x, trace, stage_scores_out);
    BlockOutput o = block_forward(x, encoder_[i]);
    x = o.y;
    encoder_scores = o.trace.scores;
  }
  if (stage && at == encoder_.size()) x = stage_forward(x, trace, stage_scores_out);

  if (trace) {
    const std::size_t v = config_.visual_tokens();
    if (!stage) trace->z_encoder = visual_rows(x, v);
    const Tensor& s = config_.has_llm_blocks() ? stage_scores : encoder_scores;
    // s: [1, H, T, T]; row 0 is the CLS query.
    const std::size_t heads = s.dim(1);
    const std::size_t t = s.dim(2);
    const auto sd = s.data();
    std::vector<real> per_head(heads * v);
    std::vector<double> summed(v, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t j = 0; j < v; ++j) {
        const real a = sd[h * t * t + 1 + j];
        per_head[h * v + j] = a;
        summed[j] += a;
      }
    }
    double total = 0;
    for (double a : summed) total += a;
    trace->w.assign(v, real{0});
    for (std::size_t j = 0; j < v; ++j) {
      trace->w[j] = total > 0 ? static_cast<real>(summed[j] / total) : real(1.0 / double(v));
    }
    trace->per_head_w = Tensor::from({heads, v}, std::move(per_head));

    if (linearized_) {
      // CLS output of the linear stage: L applied to the w-weighted visual mix.
      const auto z1 = trace->z_l1.data();
      const std::size_t width = trace->z_l1.dim(1);
      std::vector<real> mix(width, real{0});
      for (std::size_t j = 0; j < v; ++j) {
        for (std::size_t k = 0; k < width; ++k) mix[k] += trace->w[j] * z1[j * width + k];
      }
      trace->cls_final = apply_stage_map(Tensor::from({width}, std::move(mix)));
    } else if (stage) {
      trace->cls_final = cls_row(trace->stage_output);
    } else {
      trace->cls_final = cls_row(x);
    }
  }

  const std::size_t b = x.dim(0);
  Tensor cls = reshape(slice(x, 1, 0, 1), {b, config_.encoder_dim});
  cls = layer_norm(cls, head_norm_weight_, head_norm_bias_);
  return linear(cls, head_weight_, head_bias_);
}

Tensor Model::forward(const Tensor& images) const {
  if (!images.defined()) throw ShapeError("forward() on an undefined image tensor");
  const Shape expect = {config_.channels, config_.image_size, config_.image_size};
  const Shape& s = images.shape();
  const bool single = s.size() == 3 && s == expect;
  const bool batch = s.size() == 4 && s[0] > 0 && Shape(s.begin() + 1, s.end()) == expect;
  if (!single && !batch) {
    throw ShapeError("expected image " + shape_str(expect) + " or a batch of them, got " +
                     shape_str(s));
  }
  if (single) {
    const Tensor logits = run(reshape(images, {1, s[0], s[1], s[2]}), nullptr);
    return reshape(logits, {config_.n_classes});
  }
  return run(images, nullptr);
}

std::pair<Tensor, TraceBundle> Model::forward_traced(const Tensor& image) const {
  const Shape expect = {config_.channels, config_.image_size, config_.image_size};
  if (!image.defined() || image.shape() != expect) {
    throw ShapeError("forward_traced() expects one image " + shape_str(expect) + ", got " +
                     (image.defined() ? shape_str(image.shape()) : std::string("undefined")));
  }
  TraceBundle trace;
  const Tensor logits = run(reshape(image, {1, expect[0], expect[1], expect[2]}), &trace);
  return {reshape(logits, {config_.n_classes}), std::move(trace)};
}

Model Model::linearized_stage() const {
  if (config_.arm != Arm::kPlusLlm) {
    throw ContractError("linearized_stage() requires arm plus_llm, model is " +
                        std::string(to_string(config_.arm)));
  }
  if (linearized_) throw ContractError("model stage is already linearized");
  const std::size_t l = config_.llm_dim;
  const std::size_t d = config_.encoder_dim;

  // Row-vector convention: a token x maps to x·B. Each residual sublayer with
  // norms and nonlinearities removed and token mixing factored out becomes
  // (I + W_a·W_b).
  std::vector<real> acc(l * l, real{0});
  for (std::size_t i = 0; i < l; ++i) acc[i * l + i] = 1;
  auto residual_factor = [&](const Tensor& a, const Tensor& b) {
    const std::size_t h = a.dim(1);
    std::vector<real> f(l * l, real{0});
    for (std::size_t i = 0; i < l; ++i) f[i * l + i] = 1;
    gemm(false, false, l, l, h, 1, a.data().data(), b.data().data(), 1, f.data());
    std::vector<real> next(l * l, real{0});
    gemm(false, false, l, l, l, 1, acc.data(), f.data(), 0, next.data());
    acc = std::move(next);
  };
  for (const auto& blk : llm_) {
    residual_factor(blk.wv, blk.wo);
    if (blk.variant == Variant::kLlama) {
      residual_factor(blk.up, blk.down);
    } else {
      residual_factor(blk.fc1, blk.fc2);
    }
  }
  std::vector<real> weight(l * d, real{0});
  gemm(false, false, l, d, l, 1, acc.data(), adapter_out_weight_.data().data(), 0, weight.data());

  Model m = clone();
  m.linearized_ = true;
  BlockWeights kept = m.llm_.back();
  kept.set_trainable(false);
  m.llm_ = {kept};
  m.adapter_out_weight_ = Tensor();
  m.adapter_out_bias_ = Tensor();
  m.stage_map_weight_ = Tensor::from({l, d}, std::move(weight));
  m.stage_map_bias_ = adapter_out_bias_.detach();
  return m;
}

Tensor Model::apply_stage_map(const Tensor& z_l1) const {
  if (!linearized_) throw ContractError("apply_stage_map() needs a linearized model");
  return linear(z_l1, stage_map_weight_, stage_map_bias_);
}

void Model::set_stage_map(const Tensor& weight, const Tensor& bias) {
  if (!linearized_) throw ContractError("set_stage_map() needs a linearized model");
  const Shape ws = {config_.llm_dim, config_.encoder_dim};
  const Shape bs = {config_.encoder_dim};
  if (weight.shape() != ws || bias.shape() != bs) {
    throw ShapeError("stage map must be " + shape_str(ws) + " + " + shape_str(bs) + ", got " +
                     shape_str(weight.shape()) + " + " + shape_str(bias.shape()));
  }
  stage_map_weight_ = weight.detach();
  stage_map_bias_ = bias.detach();
}

}  // namespace FVT_NS
}  // namespace fvt
