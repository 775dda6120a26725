#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvt/datagen.hpp"
#include "fvt/model.hpp"
#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 2;
  double base_lr = 5e-4;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double label_smoothing = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool hflip = true;

  // Throws ConfigError.
  void validate() const;
};

// Linear ramp 0 -> base_lr over the warmup, then cosine down to min_lr.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr,
             double min_lr);

// Mean over the batch of the cross-entropy against (1-eps) on the target and
// eps/(n-1) on every other class. logits: [n] or [B, n].
Tensor label_smoothing_ce(const Tensor& logits, std::span<const std::size_t> targets, double eps);
Tensor label_smoothing_ce(const Tensor& logits, std::size_t target, double eps);

struct OptimizerState {
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;
  std::size_t step = 0;
};

// Decoupled decay p <- p(1 - lr*wd) for parameters flagged `decay`, then the
// bias-corrected Adam update. Parameters that never received a gradient
// are skipped.
void adamw_step(const std::vector<Parameter>& params, OptimizerState& state, double lr,
                double weight_decay, double beta1, double beta2, double eps);

struct EvalResult {
  double top1 = 0;
  double topk = 0;
  double mean_ce = 0;
  std::size_t k = 1;
};

// Ties in the argmax resolve to the lowest class index.
EvalResult evaluate(const Model& model, const std::vector<Sample>& samples, std::size_t k = 1,
                    std::size_t batch_size = 64);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;          // rate of the epoch's last step
  double train_loss = 0;  // label-smoothed
  double val_loss = 0;    // plain cross-entropy
  double val_top1 = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<double> lr_history;  // one entry per optimizer step
  std::size_t best_epoch = 0;
  double best_val_top1 = -1;
  std::optional<Model> best_model;  // snapshot at best_epoch

  std::string to_csv() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Throws ConfigError on an empty train or val split.
TrainReport train(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace FVT_NS
}  // namespace fvt
