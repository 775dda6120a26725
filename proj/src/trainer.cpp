#include "fvt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fvt/errors.hpp"
#include "fvt/ops.hpp"
#include "fvt/rng.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

constexpr std::uint64_t kStreamShuffle = 0x5348;
constexpr std::uint64_t kStreamFlip = 0x464c;

// Stacks images [C,H,W] into one [B,C,H,W] tensor, mirroring columns where
// `flip` is set.
Tensor stack_images(const std::vector<const Sample*>& samples, const std::vector<bool>& flip) {
  const Shape& s = samples.front()->image.shape();
  const std::size_t c = s[0], h = s[1], w = s[2];
  std::vector<real> data(samples.size() * c * h * w);
  real* out = data.data();
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto src = samples[b]->image.data();
    const bool mirror = !flip.empty() && flip[b];
    for (std::size_t row = 0; row < c * h; ++row) {
      for (std::size_t col = 0; col < w; ++col) {
        *out++ = src[row * w + (mirror ? w - 1 - col : col)];
      }
    }
  }
  return Tensor::from({samples.size(), c, h, w}, std::move(data));
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (epochs == 0) fail("epochs must be at least 1");
  if (warmup_epochs > epochs) fail("warmup_epochs must not exceed epochs");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (min_lr < 0 || min_lr > base_lr) fail("min_lr must lie in [0, base_lr]");
  if (weight_decay < 0) fail("weight_decay must be nonnegative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must lie in [0, 1)");
  if (batch_size == 0) fail("batch_size must be at least 1");
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr,
             double min_lr) {
  if (step > total_steps) {
    throw ContractError("lr_at step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  }
  if (step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor label_smoothing_ce(const Tensor& logits, std::span<const std::size_t> targets,
                          double eps) {
  if (logits.rank() != 1 && logits.rank() != 2) {
    throw ShapeError("logits must be [n] or [B,n], got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.rank() == 2 ? logits.dim(0) : 1;
  const std::size_t n = logits.dim(-1);
  if (targets.size() != batch) {
    throw ShapeError(std::to_string(targets.size()) + " targets for a batch of " +
                     std::to_string(batch));
  }
  if (eps < 0 || eps >= 1) throw ContractError("label smoothing must lie in [0, 1)");
  if (n < 2 && eps > 0) throw ContractError("label smoothing needs at least 2 classes");
  const real off = n > 1 ? static_cast<real>(eps / double(n - 1)) : real{0};
  std::vector<real> q(batch * n, off);
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] >= n) {
      throw ContractError("target " + std::to_string(targets[b]) + " out of range for " +
                          std::to_string(n) + " classes");
    }
    q[b * n + targets[b]] = static_cast<real>(1.0 - eps);
  }
  const Tensor target = Tensor::from(logits.shape(), std::move(q));
  return scale(sum(mul(target, log_softmax(logits, -1))), static_cast<real>(-1.0 / double(batch)));
}

Tensor label_smoothing_ce(const Tensor& logits, std::size_t target, double eps) {
  const std::size_t t[1] = {target};
  return label_smoothing_ce(logits, std::span<const std::size_t>(t, 1), eps);
}

void adamw_step(const std::vector<Parameter>& params, OptimizerState& state, double lr,
                double weight_decay, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), real{0});
      state.v[i].assign(params[i].tensor.numel(), real{0});
    }
  }
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (!p.has_grad()) continue;
    if (state.m[i].size() != p.numel()) {
      throw ContractError("optimizer state does not match parameter '" + params[i].name + "'");
    }
    const auto g = p.grad();
    auto d = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double shrink = params[i].decay ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t j = 0; j < d.size(); ++j) {
      const double gj = g[j];
      const double mj = beta1 * m[j] + (1.0 - beta1) * gj;
      const double vj = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      m[j] = static_cast<real>(mj);
      v[j] = static_cast<real>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + eps);
      d[j] = static_cast<real>(double(d[j]) * shrink - lr * update);
    }
  }
}

EvalResult evaluate(const Model& model, const std::vector<Sample>& samples, std::size_t k,
                    std::size_t batch_size) {
  EvalResult r;
  r.k = k;
  if (samples.empty()) return r;
  if (k == 0) throw ContractError("top-k needs k >= 1");
  NoGradGuard no_grad;
  std::size_t hit1 = 0, hitk = 0;
  double ce = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i]);
    const Tensor logits = model.forward(stack_images(batch, {}));
    const std::size_t n = logits.dim(-1);
    const Tensor logp = log_softmax(logits, -1);
    const auto l = logits.data();
    const auto lp = logp.data();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t y = batch[b]->label;
      const real* row = l.data() + b * n;
      // rank of the target: classes strictly better, or equal with a lower index
      std::size_t ahead = 0;
      for (std::size_t c = 0; c < n; ++c) {
        if (row[c] > row[y] || (row[c] == row[y] && c < y)) ++ahead;
      }
      hit1 += ahead == 0;
      hitk += ahead < k;
      ce -= lp[b * n + y];
    }
  }
  r.top1 = double(hit1) / double(samples.size());
  r.topk = double(hitk) / double(samples.size());
  r.mean_ce = ce / double(samples.size());
  return r;
}

std::string TrainReport::to_csv() const {
  std::ostringstream out;
  out << "epoch,lr,train_loss,val_loss,val_top1\n" << std::setprecision(9);
  for (const auto& e : epochs) {
    out << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.val_loss << ","
        << e.val_top1 << "\n";
  }
  return out.str();
}

TrainReport train(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (dataset.train.empty()) throw ConfigError("training split is empty");
  if (dataset.val.empty()) throw ConfigError("validation split is empty");

  const std::vector<Parameter> params = model.trainable_parameters();
  OptimizerState state;
  const std::size_t n_train = dataset.train.size();
  const std::size_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;

  TrainReport report;
  std::vector<std::size_t> order(n_train);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(Rng::derive(Rng::derive(cfg.seed, kStreamShuffle), epoch));
    for (std::size_t i = n_train; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    }
    Rng flip_rng(Rng::derive(Rng::derive(cfg.seed, kStreamFlip), epoch));

    double loss_sum = 0;
    double lr = 0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t end = std::min(n_train, start + cfg.batch_size);
      std::vector<const Sample*> batch;
      std::vector<bool> flip;
      std::vector<std::size_t> targets;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&dataset.train[order[i]]);
        targets.push_back(batch.back()->label);
        flip.push_back(cfg.hflip && flip_rng.bernoulli(0.5));
      }
      lr = lr_at(step + 1, total, warmup, cfg.base_lr, cfg.min_lr);
      report.lr_history.push_back(lr);

      for (const auto& p : params) p.tensor.impl()->grad.clear();
      const Tensor logits = model.forward(stack_images(batch, flip));
      const Tensor loss = label_smoothing_ce(logits, targets, cfg.label_smoothing);
      backward(loss);
      adamw_step(params, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += double(loss.item()) * double(batch.size());
      ++step;
    }

    const EvalResult val = evaluate(model, dataset.val);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / double(n_train);
    rec.val_loss = val.mean_ce;
    rec.val_top1 = val.top1;
    report.epochs.push_back(rec);
    if (rec.val_top1 > report.best_val_top1) {
      report.best_val_top1 = rec.val_top1;
      report.best_epoch = rec.epoch;
      report.best_model.reset();
      report.best_model.emplace(model.clone());
    }
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

}  // namespace FVT_NS
}  // namespace fvt
