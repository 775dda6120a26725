#include "fvt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "fvt/errors.hpp"
#include "fvt/weights_io.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

void check_features(const Tensor& f, std::size_t rows, std::size_t cols) {
  if (!f.defined() || f.rank() != 2) {
    throw ShapeError("features must be [tokens, dim], got " +
                     (f.defined() ? shape_str(f.shape()) : std::string("undefined")));
  }
  if (f.dim(0) != rows * cols) {
    throw ShapeError(std::to_string(f.dim(0)) + " tokens do not fill a " + std::to_string(rows) +
                     "x" + std::to_string(cols) + " grid");
  }
  if (f.dim(0) < 2) throw ContractError("activation maps need at least 2 visual tokens");
}

// Per-token L2 norm of each row minus the mean row.
std::vector<double> centered_norms(const std::vector<double>& x, std::size_t n, std::size_t d) {
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += x[i * d + k];
  }
  for (double& m : mean) m /= double(n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double c = x[i * d + k] - mean[k];
      s += c * c;
    }
    norms[i] = std::sqrt(s);
  }
  return norms;
}

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(9) << v;
  return out.str();
}

}  // namespace

std::string_view to_string(MapKind k) {
  switch (k) {
    case MapKind::kMagnitude: return "magnitude";
    case MapKind::kFrequency: return "frequency";
    case MapKind::kAttention: return "attention";
  }
  return "?";
}

MapKind parse_map_kind(std::string_view s) {
  if (s == "magnitude") return MapKind::kMagnitude;
  if (s == "frequency") return MapKind::kFrequency;
  throw ConfigError("unknown map kind '" + std::string(s) + "' (expected magnitude|frequency)");
}

std::vector<real> min_max_normalize(const std::vector<double>& raw) {
  std::vector<real> out(raw.size(), real{0});
  if (raw.empty()) return out;
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double min = *lo, max = *hi;
  if (!(max > min)) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = static_cast<real>((raw[i] - min) / (max - min));
  }
  return out;
}

ActivationMap magnitude_activation(const Tensor& features, std::size_t rows, std::size_t cols) {
  check_features(features, rows, cols);
  const auto d = features.data();
  const std::vector<double> x(d.begin(), d.end());
  ActivationMap m;
  m.rows = rows;
  m.cols = cols;
  m.kind = MapKind::kMagnitude;
  m.values = min_max_normalize(centered_norms(x, features.dim(0), features.dim(1)));
  return m;
}

std::vector<std::pair<double, double>> dft(std::span<const double> x) {
  const std::size_t n = x.size();
  // twiddle[j] = exp(-2 pi i j / n), exact at multiples of a quarter turn
  std::vector<std::pair<double, double>> twiddle(n);
  for (std::size_t j = 0; j < n; ++j) {
    if ((4 * j) % n == 0) {
      switch (4 * j / n) {
        case 0: twiddle[j] = {1.0, 0.0}; break;
        case 1: twiddle[j] = {0.0, -1.0}; break;
        case 2: twiddle[j] = {-1.0, 0.0}; break;
        default: twiddle[j] = {0.0, 1.0}; break;
      }
    } else {
      const double a = -2.0 * std::numbers::pi * double(j) / double(n);
      twiddle[j] = {std::cos(a), std::sin(a)};
    }
  }
  std::vector<std::pair<double, double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const auto& w = twiddle[(k * t) % n];
      re += x[t] * w.first;
      im += x[t] * w.second;
    }
    // signed zeros would flip atan2 between pi and -pi
    out[k] = {re == 0 ? 0.0 : re, im == 0 ? 0.0 : im};
  }
  return out;
}

ActivationMap frequency_activation(const Tensor& features, std::size_t rows, std::size_t cols) {
  check_features(features, rows, cols);
  const std::size_t n = features.dim(0), d = features.dim(1);
  const auto data = features.data();
  std::vector<double> angles(n * d);
  std::vector<double> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) row[k] = data[i * d + k];
    const auto spectrum = dft(row);
    for (std::size_t k = 0; k < d; ++k) {
      angles[i * d + k] = std::atan2(spectrum[k].second, spectrum[k].first);
    }
  }
  ActivationMap m;
  m.rows = rows;
  m.cols = cols;
  m.kind = MapKind::kFrequency;
  m.values = min_max_normalize(centered_norms(angles, n, d));
  return m;
}

bool scale_invariance_probe(const Tensor& features, double s, std::size_t rows, std::size_t cols) {
  if (!(s > 0)) throw ContractError("scale_invariance_probe needs s > 0, got " + fmt(s));
  const auto d = features.data();
  std::vector<real> scaled(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) scaled[i] = static_cast<real>(double(d[i]) * s);
  const ActivationMap a = magnitude_activation(features, rows, cols);
  const ActivationMap b =
      magnitude_activation(Tensor::from(features.shape(), std::move(scaled)), rows, cols);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (std::abs(double(a.values[i]) - double(b.values[i])) > 1e-6) return false;
  }
  return true;
}

PseudoMask threshold_map(const ActivationMap& map, double t) {
  PseudoMask p;
  p.threshold = t;
  p.grid.rows = map.rows;
  p.grid.cols = map.cols;
  p.grid.cells.resize(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    p.grid.cells[i] = double(map.values[i]) > t ? 1 : 0;
  }
  return p;
}

double iou(const TokenMask& truth, const TokenMask& predicted) {
  if (truth.rows != predicted.rows || truth.cols != predicted.cols ||
      truth.cells.size() != predicted.cells.size()) {
    throw ShapeError("mask grids differ: " + std::to_string(truth.rows) + "x" +
                     std::to_string(truth.cols) + " vs " + std::to_string(predicted.rows) + "x" +
                     std::to_string(predicted.cols));
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.cells.size(); ++i) {
    const bool g = truth.cells[i] != 0, p = predicted.cells[i] != 0;
    tp += g && p;
    fp += !g && p;
    fn += g && !p;
  }
  if (tp + fp + fn == 0) return 1.0;
  return double(tp) / double(tp + fp + fn);
}

double iou(const TokenMask& truth, const PseudoMask& predicted) {
  return iou(truth, predicted.grid);
}

const std::array<double, 9>& threshold_sweep() {
  static const std::array<double, 9> t = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return t;
}

ThresholdIoU best_threshold_iou(const TokenMask& truth, const ActivationMap& map) {
  ThresholdIoU best{-1.0, 0.0};
  for (double t : threshold_sweep()) {
    const double v = iou(truth, threshold_map(map, t));
    if (v > best.iou) best = {v, t};
  }
  return best;
}

ActivationMap attention_map(const std::vector<real>& w, std::size_t rows, std::size_t cols) {
  if (w.size() != rows * cols) {
    throw ShapeError("attention row of " + std::to_string(w.size()) + " does not fill a " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  ActivationMap m;
  m.rows = rows;
  m.cols = cols;
  m.kind = MapKind::kAttention;
  m.values = min_max_normalize(std::vector<double>(w.begin(), w.end()));
  return m;
}

std::string IoUReport::feature_csv() const {
  std::string out = "image_id,stage,kind,best_t,iou\n";
  for (const auto& r : images) {
    out += std::to_string(r.image_id) + "," + std::string(to_string(stage)) + "," +
           std::string(to_string(kind)) + "," + fmt(r.feature.t) + "," + fmt(r.feature.iou) + "\n";
  }
  return out;
}

std::string IoUReport::attention_csv() const {
  std::string out = "image_id,stage,kind,best_t,iou\n";
  for (const auto& r : images) {
    out += std::to_string(r.image_id) + "," + std::string(to_string(stage)) + ",attention," +
           fmt(r.attention.t) + "," + fmt(r.attention.iou) + "\n";
  }
  return out;
}

std::vector<TraceStage> valid_stages(const Model& model) {
  const auto& c = model.config();
  if (!c.has_stage()) return {TraceStage::kEncoder};
  if (!c.has_llm_blocks() || model.linearized()) {
    return {TraceStage::kEncoder, TraceStage::kL1, TraceStage::kL2};
  }
  return {TraceStage::kEncoder, TraceStage::kL1, TraceStage::kLlmAttn, TraceStage::kLlmFfn,
          TraceStage::kL2};
}

IoUReport miou_report(const std::function<TraceBundle(std::size_t)>& trace_of,
                      const std::vector<TokenMask>& masks, TraceStage stage, MapKind kind,
                      std::size_t rows, std::size_t cols) {
  if (kind == MapKind::kAttention) {
    throw ContractError("feature maps are magnitude or frequency; attention is always reported");
  }
  IoUReport report;
  report.stage = stage;
  report.kind = kind;
  double feature_sum = 0, attention_sum = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const TraceBundle trace = trace_of(i);
    const Tensor& features = trace.stage(stage);
    ImageIoU r;
    r.image_id = i;
    r.feature_map = kind == MapKind::kMagnitude ? magnitude_activation(features, rows, cols)
                                                : frequency_activation(features, rows, cols);
    r.feature_map.stage = stage;
    r.attention_map = attention_map(trace.w, rows, cols);
    r.attention_map.stage = stage;
    r.feature = best_threshold_iou(masks[i], r.feature_map);
    r.attention = best_threshold_iou(masks[i], r.attention_map);
    feature_sum += r.feature.iou;
    attention_sum += r.attention.iou;
    report.images.push_back(std::move(r));
  }
  if (!masks.empty()) {
    report.feature_miou = feature_sum / double(masks.size());
    report.attention_miou = attention_sum / double(masks.size());
  }
  return report;
}

IoUReport miou_report(const Model& model, const std::vector<Sample>& samples, TraceStage stage,
                      MapKind kind) {
  const auto stages = valid_stages(model);
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) {
    std::string list;
    for (TraceStage s : stages) list += (list.empty() ? "" : ", ") + std::string(to_string(s));
    throw ContractError("stage '" + std::string(to_string(stage)) + "' is not available for arm " +
                        std::string(to_string(model.config().arm)) + "; valid stages: " + list);
  }
  const auto& c = model.config();
  std::vector<TokenMask> masks;
  masks.reserve(samples.size());
  for (const auto& s : samples) {
    masks.push_back(to_token_mask(s.mask, c.image_size, c.image_size, c.patch_size));
  }
  auto trace_of = [&](std::size_t i) {
    NoGradGuard no_grad;
    return model.forward_traced(samples[i].image).second;
  };
  return miou_report(trace_of, masks, stage, kind, c.grid(), c.grid());
}

double amplification_identity_check(const Model& linearized, const Tensor& image) {
  if (!linearized.linearized()) {
    throw ContractError("amplification_identity_check needs a linearized model");
  }
  NoGradGuard no_grad;
  const TraceBundle trace = linearized.forward_traced(image).second;
  const Tensor& z2 = trace.z_l2;
  const std::size_t v = z2.dim(0), d = z2.dim(1);
  const auto zd = z2.data();
  const auto cls = trace.cls_final.data();
  double worst = 0;
  for (std::size_t k = 0; k < d; ++k) {
    double mix = 0;
    for (std::size_t j = 0; j < v; ++j) mix += double(trace.w[j]) * double(zd[j * d + k]);
    worst = std::max(worst, std::abs(double(cls[k]) - mix));
  }
  return worst;
}

void write_pgm(const ActivationMap& map, const std::filesystem::path& path) {
  std::string out = "P5\n" + std::to_string(map.cols) + " " + std::to_string(map.rows) + "\n255\n";
  for (real v : map.values) {
    const double q = std::round(255.0 * std::clamp(double(v), 0.0, 1.0));
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  write_text_file(path, out);
}

ActivationMap read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  std::istringstream in(bytes);
  std::string magic;
  std::size_t cols = 0, rows = 0, maxval = 0;
  if (!(in >> magic >> cols >> rows >> maxval) || magic != "P5" || maxval != 255) {
    throw FormatError(path.string() + ": not an 8-bit P5 graymap");
  }
  in.get();  // the single whitespace byte before the payload
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - offset != rows * cols) {
    throw FormatError(path.string() + ": payload holds " + std::to_string(bytes.size() - offset) +
                      " bytes, expected " + std::to_string(rows * cols));
  }
  ActivationMap m;
  m.rows = rows;
  m.cols = cols;
  for (std::size_t i = 0; i < rows * cols; ++i) {
    m.values.push_back(static_cast<real>(double(static_cast<unsigned char>(bytes[offset + i])) / 255.0));
  }
  return m;
}

void export_maps(const IoUReport& report, const std::filesystem::path& dir) {
  const auto maps = dir / "maps";
  std::error_code ec;
  std::filesystem::create_directories(maps, ec);
  if (ec) throw IoError("cannot create " + maps.string() + ": " + ec.message());
  const std::string tag =
      std::string(to_string(report.stage)) + "_" + std::string(to_string(report.kind));
  for (const auto& r : report.images) {
    const std::string id = std::to_string(r.image_id);
    write_pgm(r.feature_map, maps / (id + "_" + tag + ".pgm"));
    write_pgm(r.attention_map, maps / (id + "_attention.pgm"));
  }
  write_text_file(dir / "report.csv", report.feature_csv());
  write_text_file(dir / "attention_report.csv", report.attention_csv());
}

}  // namespace FVT_NS
}  // namespace fvt
