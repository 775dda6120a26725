// Finite-difference checks, built against the 64-bit library.
#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "fvt/blocks.hpp"
#include "fvt/gradcheck.hpp"
#include "fvt/model.hpp"
#include "fvt/ops.hpp"
#include "fvt/rng.hpp"
#include "fvt/trainer.hpp"
#include "fvt/weights_io.hpp"
#include "fvt/gradient_suite.hpp"

using namespace fvt;

namespace {

constexpr double kStep = 1e-3;
constexpr double kTol = 1e-3;
constexpr int kSeeds = 5;

Tensor leaf(Rng& rng, Shape s) { return rng.uniform_tensor(std::move(s), -1.0, 1.0, true); }

// Weighted sum so that each output element carries a distinct weight.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, rng.uniform_tensor(y.shape(), -1.0, 1.0)));
}

void expect_unary(const std::string& name, Shape shape,
                  const std::function<Tensor(const Tensor&)>& f) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(100 + s);
    Tensor x = leaf(rng, shape);
    const double err = finite_diff_check(
        [&] { return probe(f(x), 900 + s); }, std::vector<Tensor>{x}, kStep).max_rel_error;
    EXPECT_LT(err, kTol) << name << " seed " << s;
  }
}

void expect_binary(const std::string& name, Shape sa, Shape sb,
                   const std::function<Tensor(const Tensor&, const Tensor&)>& f) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(200 + s);
    Tensor a = leaf(rng, sa), b = leaf(rng, sb);
    const double err = finite_diff_check(
        [&] { return probe(f(a, b), 700 + s); }, std::vector<Tensor>{a, b}, kStep).max_rel_error;
    EXPECT_LT(err, kTol) << name << " seed " << s;
  }
}

}  // namespace

TEST(FiniteDiff, SumHasExactUnitGradient) {
  Rng rng(1);
  Tensor x = leaf(rng, {7});
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(t); }, x, kStep), 1e-9);
}

TEST(FiniteDiff, SumOfSquaresAgreesAtTwoSteps) {
  Rng rng(2);
  Tensor x = leaf(rng, {6});
  auto f = [](const Tensor& t) { return sum(mul(t, t)); };
  EXPECT_LT(finite_diff_check(f, x, 1e-3), kTol);
  EXPECT_LT(finite_diff_check(f, x, 2e-3), kTol);
}

TEST(FiniteDiff, SoftmaxThenPickFirst) {
  Rng rng(3);
  Tensor x = leaf(rng, {4});
  auto f = [](const Tensor& t) { return slice(softmax(t, -1), 0, 0, 1); };
  EXPECT_LT(finite_diff_check(f, x, kStep), kTol);
}

TEST(FiniteDiff, DetectsAWrongGradient) {
  Rng rng(4);
  Tensor x = leaf(rng, {5});
  // scale() forward with a gradient that ignores the factor
  auto wrong = [](const Tensor& t) {
    std::vector<real> out(t.data().begin(), t.data().end());
    for (auto& v : out) v *= 3;
    return sum(make_result("wrong", t.shape(), std::move(out), {t}, [t](const TensorImpl& o) {
      auto& g = t.impl()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }));
  };
  EXPECT_GT(finite_diff_check(wrong, x, kStep), 0.5);
}

TEST(KernelGradients, Matmul) {
  expect_binary("matmul", {3, 4}, {4, 2}, [](auto& a, auto& b) { return matmul(a, b); });
}
TEST(KernelGradients, Bmm) {
  expect_binary("bmm", {2, 3, 4}, {2, 4, 5}, [](auto& a, auto& b) { return bmm(a, b); });
}
TEST(KernelGradients, Linear) {
  expect_binary("linear", {2, 3, 4}, {4, 5}, [](auto& x, auto& w) { return linear(x, w); });
}
TEST(KernelGradients, Elementwise) {
  expect_binary("add", {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); });
  expect_binary("sub", {3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); });
  expect_binary("mul", {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); });
  expect_unary("scale", {3, 4}, [](auto& x) { return scale(x, real(-2.5)); });
}
TEST(KernelGradients, Broadcast) {
  expect_binary("add_broadcast", {2, 3, 4}, {3, 4},
                [](auto& a, auto& b) { return add_broadcast(a, b); });
  expect_binary("mul_broadcast", {2, 3, 4}, {4},
                [](auto& a, auto& b) { return mul_broadcast(a, b); });
}
TEST(KernelGradients, LayoutOps) {
  expect_unary("transpose", {2, 3, 4}, [](auto& x) { return transpose(x); });
  expect_unary("permute", {2, 3, 4}, [](auto& x) { return permute(x, {1, 2, 0}); });
  expect_unary("reshape", {2, 3, 4}, [](auto& x) { return reshape(x, {4, 6}); });
  expect_unary("slice", {3, 5}, [](auto& x) { return slice(x, 1, 2, 3); });
  expect_unary("repeat_leading", {3, 2}, [](auto& x) { return repeat_leading(x, 3); });
  expect_binary("concat", {2, 3}, {2, 1}, [](auto& a, auto& b) { return concat({a, b}, 1); });
  expect_unary("gather_rows", {4, 3}, [](auto& x) {
    const std::vector<std::size_t> idx = {3, 0, 3, 1};
    return gather_rows(x, idx);
  });
}
TEST(KernelGradients, Reductions) {
  expect_unary("sum", {3, 4}, [](auto& x) { return sum(mul(x, x)); });
  expect_unary("mean", {3, 4}, [](auto& x) { return mean(mul(x, x)); });
}
TEST(KernelGradients, SoftmaxFamily) {
  expect_unary("softmax", {3, 6}, [](auto& x) { return softmax(x, -1); });
  expect_unary("softmax_axis0", {3, 6}, [](auto& x) { return softmax(x, 0); });
  expect_unary("log_softmax", {3, 6}, [](auto& x) { return log_softmax(x, -1); });
}
TEST(KernelGradients, Norms) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(300 + s);
    Tensor x = leaf(rng, {3, 6}), w = leaf(rng, {6}), b = leaf(rng, {6});
    EXPECT_LT(finite_diff_check([&] { return probe(layer_norm(x, w, b), s); },
                                std::vector<Tensor>{x, w, b}, kStep).max_rel_error, kTol);
    EXPECT_LT(finite_diff_check([&] { return probe(rms_norm(x, w), s); },
                                std::vector<Tensor>{x, w}, kStep).max_rel_error, kTol);
  }
}
TEST(KernelGradients, Activations) {
  expect_unary("gelu", {4, 5}, [](auto& x) { return gelu(x); });
  expect_unary("silu", {4, 5}, [](auto& x) { return silu(x); });
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(400 + s);
    Tensor x = rng.uniform_tensor({4, 5}, 0.05, 1.0);
    // random signs, kept away from the kink
    for (auto& v : x.mutable_data()) v *= rng.bernoulli(0.5) ? 1 : -1;
    x.set_requires_grad(true);
    EXPECT_LT(finite_diff_check([&] { return probe(relu(x), s); }, std::vector<Tensor>{x}, kStep)
                  .max_rel_error, kTol);
  }
}
TEST(KernelGradients, LabelSmoothingCe) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(500 + s);
    Tensor logits = leaf(rng, {3, 4});
    const std::vector<std::size_t> t = {0, 3, 2};
    EXPECT_LT(finite_diff_check([&] { return label_smoothing_ce(logits, t, 0.1); },
                                std::vector<Tensor>{logits}, kStep).max_rel_error, kTol);
  }
}

TEST(BlockGradients, MicroBlockWrtInput) {
  for (Variant v : {Variant::kVit, Variant::kLlama, Variant::kOpt}) {
    for (int s = 0; s < kSeeds; ++s) {
      Rng rng(600 + s);
      BlockWeights w = BlockWeights::zeros(v, 8, 2, 12);
      for (const auto& name : BlockWeights::field_names(v)) {
        Tensor& t = w.field(name);
        const bool norm = name.find("norm") != std::string::npos && name.find("weight") != std::string::npos;
        t = rng.uniform_tensor(t.shape(), norm ? 0.8 : -0.6, norm ? 1.2 : 0.6);
      }
      Tensor x = leaf(rng, {3, 8});
      const double err = finite_diff_check([&] { return sum(block_forward(x, w).y); },
                                           std::vector<Tensor>{x}, kStep).max_rel_error;
      EXPECT_LT(err, kTol) << to_string(v) << " seed " << s;
    }
  }
}

TEST(ModelGradients, MicroModelEveryTrainableParameter) {
  for (Arm arm : all_arms()) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.encoder_dim = 8;
    cfg.encoder_depth = 1;
    cfg.encoder_heads = 2;
    cfg.encoder_mlp_ratio = 2;
    cfg.llm_dim = 8;
    cfg.llm_heads = 2;
    cfg.llm_ffn_hidden = 12;
    cfg.n_classes = 3;
    cfg.arm = arm;
    const auto source = mock_llm(5, 8, 2, 12, Variant::kLlama, 1);
    const Model model = Model::build(cfg, &source, 9);
    Rng rng(77);
    std::vector<Tensor> wrt;
    for (auto p : model.trainable_parameters()) {
      for (auto& v : p.tensor.mutable_data()) v += static_cast<real>(rng.normal(0.0, 0.2));
      wrt.push_back(p.tensor);
    }
    const Tensor images = rng.uniform_tensor({2, 1, 8, 8}, 0.0, 1.0);
    const std::vector<std::size_t> targets = {1, 2};
    const double err = finite_diff_check(
        [&] { return label_smoothing_ce(model.forward(images), targets, 0.1); }, wrt, kStep)
                           .max_rel_error;
    EXPECT_LT(err, kTol) << to_string(arm);
  }
}

TEST(GradientSuite, DefaultSeedPasses) {
  const GradientSuiteResult r = f64::run_gradient_suite({});
  EXPECT_TRUE(r.passed()) << r.worst_name << " " << r.worst;
  EXPECT_GE(r.checks.size(), 5u * 30u);
}

TEST(GradientSuite, OtherSeedsStayBelowTolerance) {
  GradientSuiteOptions opt;
  opt.seed = 41;
  opt.n_seeds = 1;
  const GradientSuiteResult r = f64::run_gradient_suite(opt);
  EXPECT_TRUE(r.passed()) << r.worst_name << " " << r.worst;
}
