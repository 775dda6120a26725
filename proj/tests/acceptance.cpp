// Acceptance run: one PASS/FAIL line per criterion. Trains every arm on the
// default dataset through the CLI, so expect it to take a while.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cli_runner.hpp"
#include "fvt/analysis.hpp"
#include "fvt/blocks.hpp"
#include "fvt/config_io.hpp"
#include "fvt/datagen.hpp"
#include "fvt/errors.hpp"
#include "fvt/model.hpp"
#include "fvt/ops.hpp"
#include "fvt/rng.hpp"
#include "fvt/trainer.hpp"
#include "fvt/weights_io.hpp"
#include "fvt/gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace fvt;
using namespace fvt_test;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::map<int, Verdict> verdicts;
const std::map<int, const char*> kTitles = {
    {1, "gradient suite"},         {2, "freeze invariant"},     {3, "zero-gradient corollary"},
    {4, "amplification identity"}, {5, "capacity parity"},      {6, "desk-scale trainability"},
    {7, "fine-tune curves"},       {8, "mIoU machinery"},       {9, "activation-map invariances"},
    {10, "attention contracts"},   {11, "I/O and reproducibility"}};

void note(const char* fmt_str, const std::string& s) {
  std::printf(fmt_str, s.c_str());
  std::fflush(stdout);
}

void record(int id, bool pass, std::string detail) {
  verdicts[id] = {pass, detail};
  std::printf("  [%d] %s: %s\n", id, pass ? "pass" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

// Runs `body`, turning an exception into a failed criterion.
void criterion(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    record(id, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Splits CLI train/ablate stdout into per-arm key=value sections.
std::map<std::string, std::map<std::string, std::string>> arm_sections(const std::string& out) {
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::string arm;
  for (const auto& line : lines(out)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.find(',') != std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "arm") arm = value;
    if (!arm.empty()) sections[arm][key] = value;
  }
  return sections;
}

// CSV rows (header skipped) split on commas.
std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  const auto ls = lines(text);
  for (std::size_t i = 1; i < ls.size(); ++i) {
    std::vector<std::string> cells;
    std::istringstream in(ls[i]);
    std::string c;
    while (std::getline(in, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

std::vector<real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// ---------------------------------------------------------------------------

void gradient_suite() {
  criterion(1, [] {
    GradientSuiteOptions opt;
    opt.n_seeds = 5;
    const GradientSuiteResult r = f64::run_gradient_suite(opt);
    const bool ok = r.passed() && r.seconds < 60.0;
    record(1, ok,
           std::to_string(r.checks.size()) + " checks over 5 seeds, worst " +
               fmt("%.3e", r.worst) + " (" + r.worst_name + ") < 1e-3, " +
               fmt("%.1f", r.seconds) + " s < 60 s");
  });
}

void attention_contracts(const Model& trained) {
  criterion(10, [&] {
    double worst_row = 0;
    Rng rng(10);
    auto rows_ok = [&](const Tensor& scores) {
      const std::size_t t = scores.dim(scores.rank() - 1);
      for (std::size_t r = 0; r < scores.numel() / t; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < t; ++c) s += scores[r * t + c];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    };
    const auto& mc = trained.config();
    for (const auto& b : trained.encoder_blocks()) {
      rows_ok(block_forward(rng.normal_tensor({mc.tokens(), mc.encoder_dim}, 1.0), b).trace.scores);
    }
    for (const auto& b : trained.llm_blocks()) {
      rows_ok(block_forward(rng.normal_tensor({mc.tokens(), mc.llm_dim}, 1.0), b).trace.scores);
    }

    // permutation equivariance on the trained LLM block and a random ViT block
    double worst_perm = 0;
    std::vector<BlockWeights> blocks = trained.llm_blocks();
    blocks.push_back(trained.encoder_blocks().front());
    for (const auto& b : blocks) {
      const std::size_t t = 9, d = b.wq.dim(0);
      const Tensor x = rng.normal_tensor({t, d}, 1.0);
      std::vector<std::size_t> perm(t);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      const Tensor y = block_forward(x, b).y;
      const Tensor yp = block_forward(gather_rows(x, perm), b).y;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
          worst_perm = std::max(worst_perm, std::abs(double(yp[i * d + c]) - y[perm[i] * d + c]));
        }
      }
    }

    // padding example: head dim 2, q = k = x, scale 1/sqrt(2); third key padded
    BlockWeights w = BlockWeights::zeros(Variant::kLlama, 2, 1, 4);
    w.wq = Tensor::eye(2);
    w.wk = Tensor::eye(2);
    w.wv = Tensor::eye(2);
    w.wo = Tensor::eye(2);
    const Tensor x = Tensor::from({3, 2}, {1, 0, 0, 1, 5, 5});
    const AttentionResult a = multi_head_attention(x, w, std::vector<std::uint8_t>{1, 1, 0});
    // row 0: logits 1/sqrt2 and 0 over the two real keys
    const double e = std::exp(1.0 / std::sqrt(2.0));
    const double expect[3][2] = {{e / (e + 1), 1 / (e + 1)},
                                 {1 / (e + 1), e / (e + 1)},
                                 {0.5, 0.5}};  // 5/sqrt2 for both keys
    double worst_pad = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      worst_pad = std::max(worst_pad, std::abs(a.scores[i * 3 + 0] - expect[i][0]));
      worst_pad = std::max(worst_pad, std::abs(a.scores[i * 3 + 1] - expect[i][1]));
      worst_pad = std::max(worst_pad, std::abs(double(a.scores[i * 3 + 2])));
    }
    record(10, worst_row < 1e-5 && worst_perm < 1e-5 && worst_pad < 1e-6,
           "row-sum error " + fmt("%.2e", worst_row) + ", permutation error " +
               fmt("%.2e", worst_perm) + ", padding example error " + fmt("%.2e", worst_pad));
  });
}

void activation_invariances(const Model& trained, const Dataset& data) {
  criterion(9, [&] {
    const auto& c = trained.config();
    double worst_shift = 0, lo = 1, hi = 0;
    bool scale_ok = true;
    Rng rng(9);
    for (std::size_t i = 0; i < 20; ++i) {
      NoGradGuard g;
      const TraceBundle t = trained.forward_traced(data.val[i].image).second;
      for (TraceStage s : valid_stages(trained)) {
        const Tensor& f = t.stage(s);
        const ActivationMap base = magnitude_activation(f, c.grid(), c.grid());
        const Tensor shift = rng.uniform_tensor({f.dim(1)}, -1.0, 1.0);
        const ActivationMap shifted =
            magnitude_activation(add_broadcast(f, shift), c.grid(), c.grid());
        for (std::size_t k = 0; k < base.values.size(); ++k) {
          worst_shift = std::max(worst_shift, std::abs(double(base.values[k]) - shifted.values[k]));
        }
        for (double sc : {0.5, 3.0, 17.0}) scale_ok &= scale_invariance_probe(f, sc, c.grid(), c.grid());
        for (const auto& m : {base, frequency_activation(f, c.grid(), c.grid()),
                              attention_map(t.w, c.grid(), c.grid())}) {
          for (real v : m.values) {
            lo = std::min(lo, double(v));
            hi = std::max(hi, double(v));
          }
        }
      }
    }
    const std::size_t v = c.visual_tokens();
    const Tensor same = repeat_leading(rng.normal_tensor({c.llm_dim}, 1.0), v);
    const ActivationMap fm = frequency_activation(reshape(same, {v, c.llm_dim}), c.grid(), c.grid());
    const bool zero = std::all_of(fm.values.begin(), fm.values.end(), [](real x) { return x == 0; });
    record(9, worst_shift < 1e-6 && scale_ok && zero && lo >= 0 && hi <= 1,
           "shift error " + fmt("%.2e", worst_shift) + ", scale probes " +
               (scale_ok ? "ok" : "failed") + ", identical-token frequency map " +
               (zero ? "all zero" : "NOT zero") + ", map range [" + fmt("%.3g", lo) + ", " +
               fmt("%.3g", hi) + "]");
  });
}

void zero_gradient(const Model& trained, const Dataset& data) {
  criterion(3, [&] {
    const auto& c = trained.config();
    double visual = 0, cls = 0;
    std::size_t probes = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto [logits, t] = trained.forward_traced(data.val[i].image);
      backward(label_smoothing_ce(logits, data.val[i].label, 0.1));
      const auto g = t.stage_output.grad();
      for (std::size_t k = 0; k < c.encoder_dim; ++k) cls += std::abs(g[k]);
      for (std::size_t k = c.encoder_dim; k < g.size(); ++k) visual = std::max(visual, double(std::abs(g[k])));
      ++probes;
    }
    for (auto p : trained.parameters()) p.tensor.zero_grad();
    record(3, visual == 0.0 && cls > 0,
           std::to_string(probes) + " probes on trained plus_llm: max |dL/dz_l2 visual| = " +
               fmt("%g", visual) + ", CLS row grad mass " + fmt("%.3e", cls));
  });
}

void amplification(const Model& trained, const Dataset& data) {
  criterion(4, [&] {
    const auto& c = trained.config();
    Model lin = trained.linearized_stage();
    double worst = amplification_identity_check(lin, data.val[0].image);
    for (std::size_t s = 0; s < 20; ++s) {
      Rng rng(400 + s);
      lin.set_stage_map(rng.normal_tensor({c.llm_dim, c.encoder_dim}, 1.0 / std::sqrt(c.llm_dim)),
                        rng.normal_tensor({c.encoder_dim}, 0.5));
      worst = std::max(worst, amplification_identity_check(lin, data.val[s + 1].image));
    }
    record(4, worst < 1e-5,
           "max residual " + fmt("%.3e", worst) + " over the trained stage and 20 random maps");
  });
}

void miou_machinery(const fs::path& analyze_dir, const CliResult& analyze) {
  criterion(8, [&] {
    bool oracle_ok = true;
    for (int a = 0; a < 16; ++a) {
      for (int b = 0; b < 16; ++b) {
        TokenMask ta{2, 2, std::vector<std::uint8_t>(4)}, tb{2, 2, std::vector<std::uint8_t>(4)};
        std::size_t inter = 0, uni = 0;
        for (int i = 0; i < 4; ++i) {
          ta.cells[i] = (a >> i) & 1;
          tb.cells[i] = (b >> i) & 1;
          inter += ta.cells[i] && tb.cells[i];
          uni += ta.cells[i] || tb.cells[i];
        }
        oracle_ok &= iou(ta, tb) == (uni == 0 ? 1.0 : double(inter) / double(uni));
      }
    }
    const auto& sweep = threshold_sweep();
    bool sweep_ok = sweep.size() == 9;
    for (std::size_t i = 0; i < sweep.size(); ++i) sweep_ok &= std::abs(sweep[i] - 0.1 * (i + 1)) < 1e-12;

    // oracle model: foreground tokens on distinct axes, background at the origin
    const std::vector<TokenMask> masks = {
        {4, 4, {0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0}},
        {4, 4, {1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1}},
        {4, 4, {0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1}}};
    auto trace_of = [&](std::size_t i) {
      TraceBundle t;
      std::vector<real> f(16 * 16, 0);
      for (std::size_t k = 0; k < 16; ++k) {
        if (masks[i].cells[k]) f[k * 16 + k] = 10;
      }
      t.z_encoder = Tensor::from({16, 16}, std::move(f));
      t.w.assign(16, real(1) / 16);
      return t;
    };
    const double oracle_miou =
        miou_report(trace_of, masks, TraceStage::kEncoder, MapKind::kMagnitude, 4, 4).feature_miou;

    const auto rows = csv_rows(slurp(analyze_dir / "summary.csv"));
    std::printf("      stage/kind            images  feature_mIoU  attention_mIoU  gap\n");
    for (const auto& r : rows) {
      if (r.size() == 6) {
        std::printf("      %-9s %-11s %6s  %12s  %14s  %s\n", r[0].c_str(), r[1].c_str(),
                    r[2].c_str(), r[3].c_str(), r[4].c_str(), r[5].c_str());
      }
    }
    const bool report_ok = analyze.code == 0 && rows.size() == 10;
    record(8, oracle_ok && sweep_ok && oracle_miou == 1.0 && report_ok,
           std::string("2x2 oracle ") + (oracle_ok ? "exact" : "MISMATCH") + ", sweep " +
               (sweep_ok ? "0.1..0.9" : "WRONG") + ", oracle-model feature mIoU " +
               fmt("%.6g", oracle_miou) + ", plus_llm report rows " + std::to_string(rows.size()) +
               " (gaps logged above, not asserted)");
  });
}

bool same_files(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  }
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) {
    why = "file lists differ under " + a.string();
    return false;
  }
  for (const auto& f : fa) {
    if (slurp(a / f) != slurp(b / f)) {
      why = "bytes differ: " + f.string();
      return false;
    }
  }
  return true;
}

void io_and_reproducibility(const fs::path& root, const fs::path& plus_llm_stem,
                            const Dataset& data) {
  criterion(11, [&] {
    std::vector<std::string> problems;
    fs::create_directories(root);
    // byte-exact container round trip of a trained checkpoint
    const std::string bytes = slurp(plus_llm_stem.string() + ".fvtw");
    const std::vector<std::uint8_t> raw(bytes.begin(), bytes.end());
    if (serialize(deserialize(raw)) != raw) problems.push_back("container round trip");

    // checkpoint restore, in memory and from disk
    const Model loaded = load_checkpoint(plus_llm_stem);
    save_checkpoint(loaded, root / "resaved");
    const Model reloaded = load_checkpoint(root / "resaved");
    if (slurp(root / "resaved.fvtw") != bytes) problems.push_back("re-saved checkpoint bytes");
    for (Arm arm : all_arms()) {
      ModelConfig c = loaded.config();
      c.arm = arm;
      const auto src = mock_llm(3, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1);
      const Model m = Model::build(c, &src, 5);
      save_checkpoint(m, root / "fresh");
      const Model r = load_checkpoint(root / "fresh");
      for (std::size_t i = 0; i < 5; ++i) {
        if (values(m.forward(data.val[i].image)) != values(r.forward(data.val[i].image))) {
          problems.push_back("forward after restore, arm " + std::string(to_string(arm)));
          break;
        }
      }
    }
    for (std::size_t i = 0; i < 5; ++i) {
      if (values(loaded.forward(data.val[i].image)) != values(reloaded.forward(data.val[i].image))) {
        problems.push_back("trained plus_llm forward after restore");
        break;
      }
    }

    // every subcommand twice with identical flags
    const fs::path cfg = root / "tiny.cfg";
    std::ofstream(cfg) << "encoder_dim = 16\nencoder_depth = 2\nencoder_heads = 2\nllm_dim = 24\n"
                          "llm_heads = 2\nllm_ffn_hidden = 32\nepochs = 2\nwarmup_epochs = 1\n"
                          "batch_size = 16\n";
    for (const char* run : {"r1", "r2"}) {
      const fs::path d = root / run;
      fs::create_directories(d);
      const std::vector<std::pair<std::string, std::string>> cmds = {
          {"gen-data", "gen-data --seed 4 --n 80 --size 16 --out " + (d / "data").string()},
          {"train", "train --arm plus_llm --llm-weights mock:seed=7 --config " + cfg.string() +
                        " --data " + (d / "data").string() + " --out " + (d / "train").string()},
          {"ablate", "ablate --config " + cfg.string() + " --data " + (d / "data").string() +
                         " --out " + (d / "ablate").string()},
          {"analyze", "analyze --checkpoint " + (d / "train" / "model").string() + " --data " +
                          (d / "data").string() + " --out " + (d / "analyze").string()},
          {"gradcheck", "gradcheck --n-seeds 1"}};
      for (const auto& [name, args] : cmds) {
        const CliResult r = run_cli(args);
        if (r.code != 0) problems.push_back(name + " exited " + std::to_string(r.code));
        std::ofstream(d / (name + ".stdout")) << r.out;
      }
    }
    std::string why;
    if (!same_files(root / "r1", root / "r2", why)) problems.push_back(why);

    std::string detail = problems.empty()
                             ? "container bytes, checkpoint forwards (all arms + trained plus_llm) "
                               "and gen-data/train/ablate/analyze/gradcheck outputs identical"
                             : "";
    for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
    record(11, problems.empty(), detail);
  });
}

}  // namespace

int main() {
  const fs::path root = FVT_ACCEPTANCE_DIR;
  fs::remove_all(root);
  fs::create_directories(root);
  std::printf("acceptance artifacts: %s\n", root.string().c_str());

  gradient_suite();

  // default dataset and the five-arm ablation with default settings
  const fs::path data_dir = root / "data", ablate_dir = root / "ablate";
  const CliResult gen = run_cli("gen-data --out " + data_dir.string());
  note("%s", gen.out);
  const auto t0 = std::chrono::steady_clock::now();
  const std::string timing = (root / "ablate.stderr").string();
  const CliResult ab =
      run_cli("ablate --data " + data_dir.string() + " --out " + ablate_dir.string(), timing);
  const double ablate_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream(root / "ablate.stdout") << ab.out;
  std::printf("ablate finished in %.0f s (exit %d)\n", ablate_seconds, ab.code);
  const auto sections = arm_sections(ab.out);
  std::map<std::string, double> seconds;
  for (const auto& l : lines(slurp(timing))) {
    const auto a = l.find("arm="), s = l.find(" train_seconds=");
    if (a == 0 && s != std::string::npos) {
      seconds[l.substr(4, s - 4)] = std::stod(l.substr(s + 15));
    }
  }

  criterion(2, [&] {
    bool ok = ab.code == 0;
    std::string detail;
    for (const char* arm : {"plus_llm", "plus_random_llm", "plus_mlp"}) {
      const auto it = sections.find(arm);
      if (it == sections.end()) {
        ok = false;
        detail += std::string(arm) + " missing; ";
        continue;
      }
      const auto& kv = it->second;
      const auto epochs = csv_rows(slurp(ablate_dir / arm / "report.csv")).size();
      const bool same = !kv.at("frozen_checksum_before").empty() &&
                        kv.at("frozen_checksum_before") == kv.at("frozen_checksum_after");
      ok &= same && epochs == 20;
      detail += std::string(arm) + ": " + kv.at("frozen_parameters") + " frozen, " +
                std::to_string(epochs) + " epochs, " + kv.at("frozen_checksum_before") +
                (same ? " == " : " != ") + kv.at("frozen_checksum_after") + "; ";
    }
    if (detail.size() >= 2) detail.resize(detail.size() - 2);
    record(2, ok, detail);
  });

  const auto table = csv_rows(slurp(ablate_dir / "ablation.csv"));
  std::map<std::string, std::vector<std::string>> by_arm;
  for (const auto& r : table) {
    if (!r.empty()) by_arm[r[0]] = r;
  }

  criterion(5, [&] {
    ModelConfig c;
    c.arm = Arm::kPlusLlm;
    const auto src = mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1);
    const std::size_t llm = parameter_count(Model::build(c, &src, 0).trainable_parameters());
    c.arm = Arm::kPlusMlp;
    const std::size_t mlp = parameter_count(Model::build(c, &src, 0).trainable_parameters());
    const long long table_diff =
        std::stoll(by_arm.at("plus_mlp")[2]) - std::stoll(by_arm.at("plus_llm")[2]);
    const long long want = 2 * static_cast<long long>(c.llm_dim);
    record(5, static_cast<long long>(mlp - llm) == want && table_diff == want && table.size() == 5,
           "audit " + std::to_string(mlp) + " - " + std::to_string(llm) + " = " +
               std::to_string(mlp - llm) + ", table difference " + std::to_string(table_diff) +
               ", 2*llm_dim = " + std::to_string(want) + ", table rows " +
               std::to_string(table.size()));
  });

  criterion(6, [&] {
    std::printf("      arm               trainable  val_top1  val_loss  train_seconds\n");
    for (const auto& r : table) {
      if (r.size() < 5) continue;
      std::printf("      %-16s %10s  %8s  %8s  %.0f\n", r[0].c_str(), r[2].c_str(), r[3].c_str(),
                  r[4].c_str(), seconds.count(r[0]) ? seconds.at(r[0]) : -1.0);
    }
    const double base = std::stod(by_arm.at("baseline")[3]);
    const double base_seconds = seconds.count("baseline") ? seconds.at("baseline") : 1e9;
    bool ok = base >= 0.95 && base_seconds < 600 && table.size() == 5;
    std::string detail = "baseline " + fmt("%.4f", base) + " in " + fmt("%.0f", base_seconds) +
                         " s; worst shortfall vs baseline: ";
    double worst = 0;
    std::string worst_arm;
    for (const auto& [arm, r] : by_arm) {
      const double gap = base - std::stod(r[3]);
      if (gap > worst) {
        worst = gap;
        worst_arm = arm;
      }
    }
    ok &= worst <= 0.05;
    detail += worst_arm.empty() ? "none" : worst_arm + " " + fmt("%.1f", 100 * worst) + " points";
    record(6, ok, detail);
  });

  const fs::path plus_llm_stem = ablate_dir / "plus_llm" / "model";
  const Dataset data = load_dataset(data_dir);

  criterion(7, [&] {
    const auto rows = csv_rows(slurp(ablate_dir / "finetune_curves.csv"));
    std::map<std::string, std::size_t> count;
    bool finite = true;
    for (const auto& r : rows) {
      if (r.size() != 4) {
        finite = false;
        continue;
      }
      ++count[r[0]];
      finite &= std::isfinite(std::stod(r[2])) && std::isfinite(std::stod(r[3]));
    }
    const Model m = load_checkpoint(plus_llm_stem);
    std::vector<std::size_t> labels;
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < 32; ++i) {
      images.push_back(reshape(data.val[i].image, {1, 1, 32, 32}));
      labels.push_back(data.val[i].label);
    }
    NoGradGuard g;
    const Tensor logits = m.forward(concat(images, 0));
    const double smoothed = label_smoothing_ce(logits, labels, 0.1).item();
    const double plain = label_smoothing_ce(logits, labels, 0.0).item();
    const bool ok = count["plus_llm"] == 20 && count["plus_llm_ft"] == 20 && finite &&
                    smoothed != plain;
    record(7, ok,
           "plus_llm " + std::to_string(count["plus_llm"]) + " and plus_llm_ft " +
               std::to_string(count["plus_llm_ft"]) + " epochs, all finite: " +
               (finite ? "yes" : "no") + "; probe batch of 32: smoothed " + fmt("%.6f", smoothed) +
               " vs plain " + fmt("%.6f", plain));
  });

  const fs::path analyze_dir = root / "analyze_plus_llm";
  const CliResult an = run_cli("analyze --checkpoint " + plus_llm_stem.string() + " --data " +
                               data_dir.string() + " --split val --out " + analyze_dir.string());
  std::ofstream(root / "analyze.stdout") << an.out;

  Model trained = [&] {
    try {
      return load_checkpoint(plus_llm_stem);
    } catch (const std::exception&) {
      ModelConfig c;
      c.arm = Arm::kPlusLlm;
      const auto src = mock_llm(7, c.llm_dim, c.llm_heads, c.llm_ffn_hidden, c.llm_variant, 1);
      return Model::build(c, &src, 0);
    }
  }();
  zero_gradient(trained, data);
  amplification(trained, data);
  miou_machinery(analyze_dir, an);
  activation_invariances(trained, data);
  attention_contracts(trained);
  io_and_reproducibility(root / "io", plus_llm_stem, data);

  std::printf("\n");
  int failed = 0;
  for (const auto& [id, title] : kTitles) {
    const auto it = verdicts.find(id);
    const bool pass = it != verdicts.end() && it->second.pass;
    failed += !pass;
    std::printf("%s  criterion %2d  %-27s %s\n", pass ? "PASS" : "FAIL", id, title,
                it == verdicts.end() ? "not evaluated" : it->second.detail.c_str());
  }
  std::printf("\n%d of %zu criteria passed\n", int(kTitles.size()) - failed, kTitles.size());
  return failed == 0 ? 0 : 1;
}
