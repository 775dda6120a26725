#include <CLI11.hpp>

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fvt/analysis.hpp"
#include "fvt/config_io.hpp"
#include "fvt/datagen.hpp"
#include "fvt/errors.hpp"
#include "fvt/model.hpp"
#include "fvt/ops.hpp"
#include "fvt/trainer.hpp"
#include "fvt/weights_io.hpp"
#include "fvt/gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace fvt;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kContract = 3, kIo = 4 };

struct RunConfig {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string arm = "baseline";
  std::string llm_weights;
  std::size_t depth_index = 0;
  std::string insert;
  std::size_t n_blocks = 0;  // 0 = keep the config value
};

void require_path(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::exists(path)) throw IoError(std::string(flag) + " " + path + " does not exist");
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

// Model and train settings from the optional key=value file; unknown keys
// are rejected.
void read_config(const std::string& path, ModelConfig& model, TrainConfig& train) {
  if (path.empty()) return;
  require_path(path, "--config");
  for (const auto& [key, value] : parse_key_values(read_text_file(path), path)) {
    const bool used_model = apply_key_value(model, key, value);
    const bool used_train = apply_key_value(train, key, value);
    if (!used_model && !used_train) throw ConfigError(path + ": unknown key '" + key + "'");
  }
}

// Image geometry comes from the dataset; a config that says otherwise is a
// conflict, not an override.
void adopt_dataset_geometry(ModelConfig& cfg, const Dataset& d, const std::string& config_path) {
  const ModelConfig defaults;
  auto take = [&](std::size_t& field, std::size_t dflt, std::size_t actual, const char* key) {
    if (field != dflt && field != actual) {
      throw ConfigError(config_path + ": " + key + "=" + std::to_string(field) +
                        " conflicts with the dataset (" + std::to_string(actual) + ")");
    }
    field = actual;
  };
  take(cfg.image_size, defaults.image_size, d.image_size, "image_size");
  take(cfg.channels, defaults.channels, d.channels, "channels");
  take(cfg.n_classes, defaults.n_classes, d.n_classes, "n_classes");
}

// "mock:seed=N" or a path to an FVTW container written by export_blocks or
// to an import manifest. Returns blocks depth_index .. depth_index+n-1.
std::vector<BlockWeights> resolve_llm(const std::string& spec, const ModelConfig& cfg,
                                      std::size_t depth_index) {
  const std::size_t n = cfg.n_llm_blocks;
  const std::string prefix = "mock:seed=";
  if (spec.rfind("mock:", 0) == 0) {
    if (spec.rfind(prefix, 0) != 0 || spec.size() == prefix.size()) {
      throw ConfigError("--llm-weights: expected mock:seed=N, got '" + spec + "'");
    }
    std::uint64_t seed = 0;
    try {
      std::size_t used = 0;
      seed = std::stoull(spec.substr(prefix.size()), &used);
      if (used != spec.size() - prefix.size()) throw std::invalid_argument(spec);
    } catch (const std::exception&) {
      throw ConfigError("--llm-weights: bad seed in '" + spec + "'");
    }
    auto all = mock_llm(seed, cfg.llm_dim, cfg.llm_heads, cfg.llm_ffn_hidden, cfg.llm_variant,
                        depth_index + n);
    return {all.begin() + static_cast<std::ptrdiff_t>(depth_index), all.end()};
  }
  require_path(spec, "--llm-weights");
  std::vector<BlockWeights> blocks;
  if (fs::path(spec).extension() == ".fvtw") {
    const TensorContainer c = load(spec);
    for (std::size_t i = 0; i < n; ++i) {
      blocks.push_back(import_block(
          c, ImportManifest::for_exported(cfg.llm_variant, cfg.llm_heads, depth_index + i)));
    }
    return blocks;
  }
  ImportManifest manifest = ImportManifest::load(spec);
  if (manifest.container.empty()) throw ManifestError(spec + ": no container given");
  const TensorContainer c = load(fs::path(spec).parent_path() / manifest.container);
  for (std::size_t i = 0; i < n; ++i) {
    manifest.block_index = depth_index + i;
    blocks.push_back(import_block(c, manifest));
  }
  return blocks;
}

struct TrainedArm {
  Model model;
  TrainReport report;
};

TrainedArm train_arm(ModelConfig cfg, const TrainConfig& tc, const Dataset& data,
                     const RunConfig& run, const fs::path& out) {
  cfg.validate();
  std::vector<BlockWeights> source;
  if (cfg.arm == Arm::kPlusLlm || cfg.arm == Arm::kPlusLlmFt) {
    if (run.llm_weights.empty()) {
      throw ConfigError("arm " + std::string(to_string(cfg.arm)) +
                        " needs --llm-weights (a container, a manifest or mock:seed=N)");
    }
    source = resolve_llm(run.llm_weights, cfg, run.depth_index);
  }
  Model model = Model::build(cfg, source.empty() ? nullptr : &source, tc.seed);
  const auto frozen = model.frozen_parameters();
  std::printf("arm=%s\n", std::string(to_string(cfg.arm)).c_str());
  std::printf("trainable_parameters=%zu\n", parameter_count(model.trainable_parameters()));
  std::printf("frozen_parameters=%zu\n", parameter_count(frozen));
  std::printf("frozen_checksum_before=%s\n", hex64(parameter_checksum(frozen)).c_str());
  std::printf("epoch,lr,train_loss,val_loss,val_top1\n");
  std::fflush(stdout);

  const auto start = std::chrono::steady_clock::now();
  TrainReport report = train(model, data, tc, [](const EpochRecord& e) {
    std::printf("%zu,%.6g,%.6f,%.6f,%.4f\n", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_top1);
    std::fflush(stdout);
  });
  std::printf("frozen_checksum_after=%s\n",
              hex64(parameter_checksum(model.frozen_parameters())).c_str());
  std::fprintf(stderr, "arm=%s train_seconds=%.1f\n", std::string(to_string(cfg.arm)).c_str(),
               std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());

  fs::create_directories(out);
  save_checkpoint(model, out / "model");
  write_text_file(out / "report.csv", report.to_csv());
  return {std::move(model), std::move(report)};
}

int cmd_gen_data(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t size,
                 const std::string& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && fs::is_directory(out) && !fs::is_empty(out) && !force) {
    throw IoError("output directory " + out + " is not empty (use --force to overwrite)");
  }
  const Dataset d = generate(seed, n, classes, size);
  save_dataset(d, out);
  std::printf("seed=%" PRIu64 "\ntrain=%zu\nval=%zu\n", seed, d.train.size(), d.val.size());
  return kOk;
}

int cmd_train(const RunConfig& run) {
  ModelConfig mc;
  TrainConfig tc;
  read_config(run.config_path, mc, tc);
  mc.arm = parse_arm(run.arm);
  if (!run.insert.empty()) mc.insert_position = parse_insert_position(run.insert);
  if (run.n_blocks > 0) mc.n_llm_blocks = run.n_blocks;
  if (run.out_dir.empty()) throw ConfigError("--out is required");
  require_path(run.data_dir, "--data");
  if (!run.llm_weights.empty() && run.llm_weights.rfind("mock:", 0) != 0) {
    require_path(run.llm_weights, "--llm-weights");
  }
  tc.validate();
  const Dataset data = load_dataset(run.data_dir);
  adopt_dataset_geometry(mc, data, run.config_path);
  train_arm(mc, tc, data, run, run.out_dir);
  return kOk;
}

int cmd_ablate(RunConfig run) {
  ModelConfig mc;
  TrainConfig tc;
  read_config(run.config_path, mc, tc);
  if (run.out_dir.empty()) throw ConfigError("--out is required");
  require_path(run.data_dir, "--data");
  tc.validate();
  const Dataset data = load_dataset(run.data_dir);
  adopt_dataset_geometry(mc, data, run.config_path);
  std::printf("data_seed=%" PRIu64 "\ntrain_seed=%" PRIu64 "\n", data.seed, tc.seed);

  struct Row {
    Arm arm;
    std::size_t trainable;
    double top1, val_loss;
  };
  std::vector<Row> rows;
  std::ostringstream curves;
  curves << "arm,epoch,train_loss_label_smoothed,val_loss_ce\n";
  curves.precision(9);
  for (Arm arm : all_arms()) {
    ModelConfig cfg = mc;
    cfg.arm = arm;
    const fs::path dir = fs::path(run.out_dir) / std::string(to_string(arm));
    TrainedArm t = train_arm(cfg, tc, data, run, dir);
    const EpochRecord& last = t.report.epochs.back();
    rows.push_back({arm, parameter_count(t.model.trainable_parameters()), last.val_top1,
                    last.val_loss});
    if (arm == Arm::kPlusLlm || arm == Arm::kPlusLlmFt) {
      for (const auto& e : t.report.epochs) {
        curves << to_string(arm) << "," << e.epoch << "," << e.train_loss << "," << e.val_loss
               << "\n";
      }
    }
  }

  std::ostringstream table;
  table << "arm,data_seed,trainable_params,val_top1,val_loss\n";
  table.precision(9);
  for (const auto& r : rows) {
    table << to_string(r.arm) << "," << data.seed << "," << r.trainable << "," << r.top1 << ","
          << r.val_loss << "\n";
  }
  write_text_file(fs::path(run.out_dir) / "ablation.csv", table.str());
  write_text_file(fs::path(run.out_dir) / "finetune_curves.csv", curves.str());
  std::printf("\n%s", table.str().c_str());
  return kOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& data_dir,
                const std::string& stage_flag, const std::string& kind_flag,
                const std::string& split, const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  require_path(checkpoint + ".fvtw", "--checkpoint");
  require_path(data_dir, "--data");
  if (split != "train" && split != "val" && split != "all") {
    throw ConfigError("--split must be train, val or all");
  }
  const Model model = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_dir);
  std::vector<Sample> samples;
  if (split != "val") samples.insert(samples.end(), data.train.begin(), data.train.end());
  if (split != "train") samples.insert(samples.end(), data.val.begin(), data.val.end());

  std::vector<TraceStage> stages;
  if (stage_flag == "all") {
    stages = valid_stages(model);
  } else {
    stages.push_back(parse_trace_stage(stage_flag));
  }
  std::vector<MapKind> kinds;
  if (kind_flag == "all") {
    kinds = {MapKind::kMagnitude, MapKind::kFrequency};
  } else {
    kinds.push_back(parse_map_kind(kind_flag));
  }

  std::ostringstream summary;
  summary << "stage,kind,images,feature_miou,attention_miou,gap\n";
  summary.precision(9);
  std::printf("stage,kind,images,feature_miou,attention_miou,gap\n");
  for (TraceStage stage : stages) {
    for (MapKind kind : kinds) {
      const IoUReport r = miou_report(model, samples, stage, kind);
      const std::string name = std::string(to_string(stage)) + "_" + std::string(to_string(kind));
      export_maps(r, fs::path(out) / name);
      const double gap = r.feature_miou - r.attention_miou;
      summary << to_string(stage) << "," << to_string(kind) << "," << r.images.size() << ","
              << r.feature_miou << "," << r.attention_miou << "," << gap << "\n";
      std::printf("%s,%s,%zu,%.6f,%.6f,%.6f\n", std::string(to_string(stage)).c_str(),
                  std::string(to_string(kind)).c_str(), r.images.size(), r.feature_miou,
                  r.attention_miou, gap);
    }
  }
  write_text_file(fs::path(out) / "summary.csv", summary.str());

  if (model.config().arm == Arm::kPlusLlm) {
    const Model lin = model.linearized_stage();
    double worst = 0;
    const std::size_t n = std::min<std::size_t>(samples.size(), 20);
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, amplification_identity_check(lin, samples[i].image));
    }
    std::printf("amplification_identity_max_residual=%.3e\n", worst);
    write_text_file(fs::path(out) / "amplification.txt",
                    "amplification_identity_max_residual=" + std::to_string(worst) + "\n");
  } else {
    std::printf("amplification_identity_max_residual=n/a (arm %s has no frozen LLM stage)\n",
                std::string(to_string(model.config().arm)).c_str());
  }
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t n_seeds, bool verbose) {
  GradientSuiteOptions opt;
  opt.seed = seed;
  opt.n_seeds = n_seeds;
  const GradientSuiteResult r = f64::run_gradient_suite(opt);
  if (verbose) {
    for (const auto& c : r.checks) {
      std::printf("%-28s seed=%-4" PRIu64 " elements=%-6zu max_rel_error=%.3e\n", c.name.c_str(),
                  c.seed, c.elements, c.max_rel_error);
    }
  }
  std::printf("checks=%zu\nworst_check=%s\nworst_relative_error=%.3e\ntolerance=%.0e\n",
              r.checks.size(), r.worst_name.c_str(), r.worst, r.tolerance);
  // timing goes to stderr so that stdout is reproducible
  std::fprintf(stderr, "seconds=%.2f\n", r.seconds);
  std::printf("%s\n", r.passed() ? "PASS" : "FAIL");
  return r.passed() ? kOk : kContract;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frozen transformer blocks as visual encoder layers: desk-scale toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::uint64_t gen_seed = 1;
  std::size_t gen_n = 2500, gen_classes = 4, gen_size = 32;
  std::string gen_out;
  bool gen_force = false;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shape dataset");
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--n", gen_n, "Number of samples (80% train, 20% val)");
  gen->add_option("--classes", gen_classes, "Number of shape classes (2..8)");
  gen->add_option("--size", gen_size, "Image side in pixels");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");

  RunConfig train_run;
  auto* tr = app.add_subcommand("train", "Train one arm and write a checkpoint and report");
  tr->add_option("--arm", train_run.arm,
                 "baseline|plus_llm|plus_mlp|plus_random_llm|plus_llm_ft");
  tr->add_option("--config", train_run.config_path, "key=value model/train config file");
  tr->add_option("--data", train_run.data_dir, "Dataset directory from gen-data")->required();
  tr->add_option("--out", train_run.out_dir, "Output directory")->required();
  tr->add_option("--llm-weights", train_run.llm_weights,
                 "FVTW container, import manifest, or mock:seed=N");
  tr->add_option("--depth-index", train_run.depth_index, "First source block to use");
  tr->add_option("--insert", train_run.insert, "tail|middle|head (default: config value)");
  tr->add_option("--n-blocks", train_run.n_blocks, "Inserted blocks (0: config value)");

  RunConfig ablate_run;
  ablate_run.llm_weights = "mock:seed=7";
  auto* ab = app.add_subcommand("ablate", "Train all five arms with a shared seed");
  ab->add_option("--config", ablate_run.config_path, "key=value model/train config file");
  ab->add_option("--data", ablate_run.data_dir, "Dataset directory from gen-data")->required();
  ab->add_option("--out", ablate_run.out_dir, "Output directory")->required();
  ab->add_option("--llm-weights", ablate_run.llm_weights,
                 "FVTW container, import manifest, or mock:seed=N");
  ab->add_option("--depth-index", ablate_run.depth_index, "First source block to use");

  std::string an_checkpoint, an_data, an_stage = "all", an_kind = "all", an_split = "all", an_out;
  auto* an = app.add_subcommand("analyze", "mIoU reports, activation maps and attention maps");
  an->add_option("--checkpoint", an_checkpoint, "Checkpoint stem (<dir>/model)")->required();
  an->add_option("--data", an_data, "Dataset directory from gen-data")->required();
  an->add_option("--stage", an_stage, "encoder|l1|llm_attn|llm_ffn|l2|all");
  an->add_option("--kind", an_kind, "magnitude|frequency|all");
  an->add_option("--split", an_split, "train|val|all");
  an->add_option("--out", an_out, "Output directory")->required();

  std::uint64_t gc_seed = 1;
  std::size_t gc_seeds = 5;
  bool gc_verbose = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gc->add_option("--seed", gc_seed, "First seed");
  gc->add_option("--n-seeds", gc_seeds, "Number of consecutive seeds")
      ->check(CLI::PositiveNumber);
  gc->add_flag("--verbose", gc_verbose, "Print every check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_n, gen_classes, gen_size, gen_out, gen_force);
    if (*tr) return cmd_train(train_run);
    if (*ab) return cmd_ablate(ablate_run);
    if (*an) return cmd_analyze(an_checkpoint, an_data, an_stage, an_kind, an_split, an_out);
    if (*gc) return cmd_gradcheck(gc_seed, gc_seeds, gc_verbose);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const ManifestError& e) {
    std::fprintf(stderr, "manifest error: %s\n", e.what());
    return kConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "contract error: %s\n", e.what());
    return kContract;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kContract;
  }
  return kOk;
}
