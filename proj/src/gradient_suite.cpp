#include "fvt/blocks.hpp"
#include "fvt/gradcheck.hpp"
#include "fvt/model.hpp"
#include "fvt/ops.hpp"
#include "fvt/rng.hpp"
#include "fvt/trainer.hpp"
#include "fvt/weights_io.hpp"
#include "fvt/gradient_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace fvt {
inline namespace FVT_NS {

namespace {

Tensor leaf(Rng& rng, Shape shape, double stddev = 1.0) {
  return rng.normal_tensor(std::move(shape), stddev, true);
}

// Random linear functional, so that every output element carries a generic
// weight into the scalar loss. Scaled so the loss stays O(1), which keeps
// rounding noise on structurally zero gradients small.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, rng.normal_tensor(y.shape(), 1.0 / std::sqrt(double(y.numel())))));
}

BlockWeights random_block(Variant variant, std::size_t dim, std::size_t heads,
                          std::size_t hidden, Rng& rng) {
  BlockWeights b = BlockWeights::zeros(variant, dim, heads, hidden);
  if (variant == Variant::kOpt) b.activation = FfnActivation::kRelu;
  for (const auto& name : BlockWeights::field_names(variant)) {
    Tensor& t = b.field(name);
    const bool norm_weight = name == "norm1.weight" || name == "norm2.weight";
    Tensor r = rng.normal_tensor(t.shape(), norm_weight ? 0.1 : 0.4);
    if (norm_weight) {
      for (auto& v : r.mutable_data()) v += 1;
    }
    t = r;
  }
  b.set_trainable(true);
  return b;
}

std::vector<Tensor> block_tensors(const BlockWeights& b) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : b.named_tensors()) out.push_back(t);
  return out;
}

// Smallest |pre-activation| of the ReLU feedforward for input x.
double relu_margin(const Tensor& x, const BlockWeights& b) {
  NoGradGuard no_grad;
  const Tensor h = block_forward(x, b).trace.post_attention;
  const Tensor pre = linear(block_norm(h, b, 2), b.fc1, b.fc1_bias);
  double m = 1e9;
  for (real v : pre.data()) m = std::min(m, std::abs(double(v)));
  return m;
}

}  // namespace

GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradientSuiteResult result;
  result.tolerance = options.tolerance;
  const double h = options.step;

  auto record = [&](const std::string& name, std::uint64_t seed, const GradCheckResult& r) {
    GradientCheck c;
    c.name = name;
    c.seed = seed;
    c.elements = r.elements;
    c.max_rel_error = r.max_rel_error;
    c.analytic_at_worst = r.analytic_at_worst;
    c.numeric_at_worst = r.numeric_at_worst;
    if (c.max_rel_error >= result.worst) {
      result.worst = c.max_rel_error;
      result.worst_name = name + " (seed " + std::to_string(seed) + ")";
    }
    result.checks.push_back(std::move(c));
  };

  for (std::size_t si = 0; si < options.n_seeds; ++si) {
    const std::uint64_t seed = options.seed + si;
    Rng rng(Rng::derive(seed, 0x6763));
    const std::uint64_t ps = Rng::derive(seed, 0x7072);

    auto check = [&](const std::string& name, const std::vector<Tensor>& wrt,
                     const std::function<Tensor()>& f) {
      record(name, seed, finite_diff_check([&] { return probe(f(), ps); }, wrt, h));
    };

    {
      Tensor a = leaf(rng, {3, 4}), b = leaf(rng, {3, 4});
      check("add", {a, b}, [&] { return add(a, b); });
      check("sub", {a, b}, [&] { return sub(a, b); });
      check("mul", {a, b}, [&] { return mul(a, b); });
      check("scale", {a}, [&] { return scale(a, real(1.7)); });
    }
    {
      Tensor x = leaf(rng, {2, 3, 4}), b = leaf(rng, {3, 4}), c = leaf(rng, {4});
      check("add_broadcast", {x, b}, [&] { return add_broadcast(x, b); });
      check("mul_broadcast", {x, c}, [&] { return mul_broadcast(x, c); });
      check("transpose", {x}, [&] { return transpose(x); });
      check("permute", {x}, [&] { return permute(x, {2, 0, 1}); });
      check("reshape", {x}, [&] { return reshape(x, {6, 4}); });
      check("slice", {x}, [&] { return slice(x, 1, 1, 2); });
      check("repeat_leading", {b}, [&] { return repeat_leading(b, 3); });
      check("sum", {x}, [&] { return scale(sum(mul(x, x)), real(0.5)); });
      check("mean", {x}, [&] { return mean(mul(x, x)); });
    }
    {
      Tensor a = leaf(rng, {3, 5}), b = leaf(rng, {5, 4});
      check("matmul", {a, b}, [&] { return matmul(a, b); });
      Tensor p = leaf(rng, {2, 3, 5}), q = leaf(rng, {2, 5, 4}), bias = leaf(rng, {4});
      check("bmm", {p, q}, [&] { return bmm(p, q); });
      check("linear", {p, b, bias}, [&] { return linear(p, b, bias); });
    }
    {
      Tensor a = leaf(rng, {2, 3}), b = leaf(rng, {2, 2});
      check("concat", {a, b}, [&] { return concat({a, b}, 1); });
      Tensor table = leaf(rng, {5, 3});
      const std::vector<std::size_t> idx = {4, 0, 4, 2};
      check("gather_rows", {table}, [&] { return gather_rows(table, idx); });
    }
    {
      Tensor x = leaf(rng, {3, 6});
      check("softmax", {x}, [&] { return softmax(x, -1); });
      check("softmax_axis0", {x}, [&] { return softmax(x, 0); });
      check("log_softmax", {x}, [&] { return log_softmax(x, -1); });
      Tensor w = leaf(rng, {6}), b = leaf(rng, {6});
      check("layer_norm", {x, w, b}, [&] { return layer_norm(x, w, b); });
      check("rms_norm", {x, w}, [&] { return rms_norm(x, w); });
      check("gelu", {x}, [&] { return gelu(x); });
      check("silu", {x}, [&] { return silu(x); });
      Tensor r = rng.normal_tensor({3, 6}, 1.0);
      for (auto& v : r.mutable_data()) {
        if (std::abs(v) < real(0.05)) v = v < 0 ? real(-0.5) : real(0.5);
      }
      r.set_requires_grad(true);
      check("relu", {r}, [&] { return relu(r); });
    }
    {
      Tensor logits = leaf(rng, {4, 5});
      const std::vector<std::size_t> targets = {0, 3, 4, 1};
      record("label_smoothing_ce", seed,
             finite_diff_check([&] { return label_smoothing_ce(logits, targets, 0.1); }, {logits},
                               h));
    }
    {
      BlockWeights w = random_block(Variant::kLlama, 8, 2, 12, rng);
      Tensor x = leaf(rng, {5, 8});
      std::vector<Tensor> wrt = block_tensors(w);
      wrt.push_back(x);
      const std::vector<std::uint8_t> valid = {1, 1, 1, 0, 1};
      check("attention_masked", wrt, [&] {
        const AttentionResult a = multi_head_attention(x, w, valid);
        return concat({reshape(a.output, {40}), reshape(a.scores, {50})}, 0);
      });
      check("block_llama", wrt, [&] { return block_forward(x, w).y; });
    }
    {
      BlockWeights w = random_block(Variant::kVit, 8, 2, 16, rng);
      w.activation = FfnActivation::kGelu;
      Tensor x = leaf(rng, {2, 5, 8});
      std::vector<Tensor> wrt = block_tensors(w);
      wrt.push_back(x);
      check("block_vit_batched", wrt, [&] { return block_forward(x, w).y; });
    }
    {
      // Redraw until no ReLU input sits near the kink.
      BlockWeights w;
      Tensor x;
      for (int attempt = 0;; ++attempt) {
        w = random_block(Variant::kOpt, 8, 2, 12, rng);
        x = leaf(rng, {4, 8});
        if (relu_margin(x, w) > 0.02 || attempt == 200) break;
      }
      std::vector<Tensor> wrt = block_tensors(w);
      wrt.push_back(x);
      check("block_opt", wrt, [&] { return block_forward(x, w).y; });
    }

    // Micro end-to-end models: loss with respect to every trainable parameter.
    struct Arrangement {
      Arm arm;
      InsertPosition position;
    };
    const std::vector<Arrangement> arrangements = {
        {Arm::kBaseline, InsertPosition::kTail},      {Arm::kPlusLlm, InsertPosition::kTail},
        {Arm::kPlusMlp, InsertPosition::kTail},       {Arm::kPlusRandomLlm, InsertPosition::kTail},
        {Arm::kPlusLlmFt, InsertPosition::kTail},     {Arm::kPlusLlm, InsertPosition::kMiddle},
        {Arm::kPlusLlmFt, InsertPosition::kHead},
    };
    for (const auto& arr : arrangements) {
      ModelConfig cfg;
      cfg.image_size = 8;
      cfg.patch_size = 4;
      cfg.encoder_dim = 8;
      cfg.encoder_depth = 2;
      cfg.encoder_heads = 2;
      cfg.encoder_mlp_ratio = 2;
      cfg.llm_dim = 12;
      cfg.llm_heads = 2;
      cfg.llm_ffn_hidden = 16;
      cfg.n_classes = 3;
      cfg.arm = arr.arm;
      cfg.insert_position = arr.position;
      const auto source = mock_llm(Rng::derive(seed, 0x6c6c), 12, 2, 16, Variant::kLlama, 1);
      const Model model = Model::build(cfg, &source, seed);
      std::vector<Tensor> wrt;
      Rng jitter(Rng::derive(seed, 0x6a74));
      for (auto p : model.trainable_parameters()) {
        // move away from the near-zero initial regime
        for (auto& v : p.tensor.mutable_data()) v += static_cast<real>(jitter.normal(0.0, 0.2));
        wrt.push_back(p.tensor);
      }
      const Tensor images = rng.uniform_tensor({2, 1, 8, 8}, 0.0, 1.0);
      const std::vector<std::size_t> targets = {0, 2};
      const std::string name = "model_" + std::string(to_string(arr.arm)) + "_" +
                               std::string(to_string(arr.position));
      record(name, seed, finite_diff_check([&] {
               return label_smoothing_ce(model.forward(images), targets, 0.1);
             }, wrt, h));
    }
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace FVT_NS
}  // namespace fvt
