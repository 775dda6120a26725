#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "fvt/datagen.hpp"
#include "fvt/model.hpp"
#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

enum class MapKind { kMagnitude, kFrequency, kAttention };
std::string_view to_string(MapKind k);
// Accepts magnitude|frequency (attention maps come from the trace, not a flag).
MapKind parse_map_kind(std::string_view s);

// Per-visual-token scalar map in [0, 1], rows x cols, row-major.
struct ActivationMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> values;
  TraceStage stage = TraceStage::kEncoder;
  MapKind kind = MapKind::kMagnitude;
};

// Min-max normalization; a constant input maps to all zeros.
std::vector<real> min_max_normalize(const std::vector<double>& raw);

// features: [V, d] visual tokens, V = rows * cols >= 2.
// Center on the mean token, per-token L2 norm, min-max normalize.
ActivationMap magnitude_activation(const Tensor& features, std::size_t rows, std::size_t cols);
// DFT of each token along channels, phase angles, deviation from the mean
// angle vector, per-token L2 norm, min-max normalize.
ActivationMap frequency_activation(const Tensor& features, std::size_t rows, std::size_t cols);

// Naive DFT with exact twiddles at quarter turns; returns (re, im) pairs.
std::vector<std::pair<double, double>> dft(std::span<const double> x);

// True iff the magnitude map of s*features matches that of features within
// 1e-6. Throws ContractError for s <= 0.
bool scale_invariance_probe(const Tensor& features, double s, std::size_t rows, std::size_t cols);

struct PseudoMask {
  TokenMask grid;
  double threshold = 0;
};

PseudoMask threshold_map(const ActivationMap& map, double t);

// TP / (TP + FP + FN); two empty masks agree perfectly (1).
double iou(const TokenMask& truth, const TokenMask& predicted);
double iou(const TokenMask& truth, const PseudoMask& predicted);

// t = 0.1, 0.2, ..., 0.9
const std::array<double, 9>& threshold_sweep();

struct ThresholdIoU {
  double iou = 0;
  double t = 0;
};
// Best IoU over the sweep; ties go to the smallest t.
ThresholdIoU best_threshold_iou(const TokenMask& truth, const ActivationMap& map);

// Min-max normalized head-summed attention w, laid out on the token grid.
ActivationMap attention_map(const std::vector<real>& w, std::size_t rows, std::size_t cols);

struct ImageIoU {
  std::size_t image_id = 0;
  ThresholdIoU feature;
  ThresholdIoU attention;
  ActivationMap feature_map;
  ActivationMap attention_map;
};

struct IoUReport {
  TraceStage stage = TraceStage::kEncoder;
  MapKind kind = MapKind::kMagnitude;
  std::vector<ImageIoU> images;
  double feature_miou = 0;
  double attention_miou = 0;

  // Columns image_id,stage,kind,best_t,iou.
  std::string feature_csv() const;
  std::string attention_csv() const;
};

// Stages a model's traces provide.
std::vector<TraceStage> valid_stages(const Model& model);

// Generic form: `trace_of(i)` yields the trace for image i whose ground
// truth is masks[i].
IoUReport miou_report(const std::function<TraceBundle(std::size_t)>& trace_of,
                      const std::vector<TokenMask>& masks, TraceStage stage, MapKind kind,
                      std::size_t rows, std::size_t cols);
// Throws ContractError listing the valid stages when `stage` is unavailable.
IoUReport miou_report(const Model& model, const std::vector<Sample>& samples, TraceStage stage,
                      MapKind kind);

// Linearized models only: max_k |cls_final[k] - sum_v w_v L(z_l1[v])[k]|.
double amplification_identity_check(const Model& linearized, const Tensor& image);

// Binary P5, one byte per token, value round(255 v).
void write_pgm(const ActivationMap& map, const std::filesystem::path& path);
// Returns the grid with values q/255.
ActivationMap read_pgm(const std::filesystem::path& path);

// <dir>/report.csv, <dir>/attention_report.csv and <dir>/maps/*.pgm.
void export_maps(const IoUReport& report, const std::filesystem::path& dir);

}  // namespace FVT_NS
}  // namespace fvt
