#include <gtest/gtest.h>

#include <cstdlib>

#include "cli_runner.hpp"
#include "fvt/weights_io.hpp"

using namespace fvt_test;
namespace fs = std::filesystem;

namespace {

constexpr const char* kTinyConfig =
    "encoder_dim = 16\n"
    "encoder_depth = 2\n"
    "encoder_heads = 2\n"
    "llm_dim = 24\n"
    "llm_heads = 2\n"
    "llm_ffn_hidden = 32\n"
    "epochs = 2\n"
    "warmup_epochs = 1\n"
    "batch_size = 16\n";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const std::string name = ::testing::UnitTest::GetInstance()->current_test_info()->name();
    root_ = fresh_dir(name);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.cfg") << kTinyConfig;
    const CliResult r = run_cli("gen-data --seed 3 --n 60 --size 16 --out " + data().string());
    ASSERT_EQ(r.code, 0) << r.out;
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path data() const { return root_ / "data"; }
  std::string common() const {
    return " --config " + (root_ / "tiny.cfg").string() + " --data " + data().string();
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, GenDataReportsSplitAndIsByteReproducible) {
  const fs::path again = root_ / "again";
  const CliResult r = run_cli("gen-data --seed 3 --n 60 --size 16 --out " + again.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(value_of(r.out, "seed"), "3");
  EXPECT_EQ(value_of(r.out, "train"), "48");
  EXPECT_EQ(value_of(r.out, "val"), "12");
  for (const char* f : {"train.fvtw", "val.fvtw", "index.txt"}) {
    EXPECT_EQ(slurp(data() / f), slurp(again / f)) << f;
  }
}

TEST_F(Cli, GenDataRefusesNonEmptyDirectory) {
  EXPECT_EQ(run_cli("gen-data --n 10 --size 16 --out " + data().string()).code, 4);
  EXPECT_EQ(run_cli("gen-data --n 10 --size 16 --force --out " + data().string()).code, 0);
}

TEST_F(Cli, BadArgumentsAreConfigErrors) {
  EXPECT_EQ(run_cli("gen-data --classes 1 --out " + (root_ / "x").string()).code, 2);
  EXPECT_EQ(run_cli("train --bogus").code, 2);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("train --arm plus_llm" + common() + " --out " + (root_ / "o").string()).code,
            2);
  EXPECT_EQ(run_cli("train --arm nope" + common() + " --out " + (root_ / "o").string()).code, 2);
  std::ofstream(root_ / "bad.cfg") << "colour = blue\n";
  EXPECT_EQ(run_cli("train --config " + (root_ / "bad.cfg").string() + " --data " +
                    data().string() + " --out " + (root_ / "o").string())
                .code,
            2);
}

TEST_F(Cli, MissingDataIsIoError) {
  EXPECT_EQ(run_cli("train --data " + (root_ / "nowhere").string() + " --out " +
                    (root_ / "o").string())
                .code,
            4);
}

TEST_F(Cli, TrainWritesReportAndCheckpoint) {
  const fs::path out = root_ / "baseline";
  const CliResult r = run_cli("train --arm baseline" + common() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(value_of(r.out, "frozen_parameters"), "0");
  EXPECT_EQ(lines(slurp(out / "report.csv")).size(), 3u);
  EXPECT_TRUE(fs::exists(out / "model.fvtw"));
  EXPECT_TRUE(fs::exists(out / "model.cfg"));
}

TEST_F(Cli, FrozenChecksumUnchangedByTraining) {
  const CliResult r = run_cli("train --arm plus_llm --llm-weights mock:seed=7" + common() +
                              " --out " + (root_ / "p").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(value_of(r.out, "frozen_parameters"), "0");
  EXPECT_FALSE(value_of(r.out, "frozen_checksum_before").empty());
  EXPECT_EQ(value_of(r.out, "frozen_checksum_before"), value_of(r.out, "frozen_checksum_after"));
}

TEST_F(Cli, FineTunedArmHasNothingFrozen) {
  const CliResult r = run_cli("train --arm plus_llm_ft --llm-weights mock:seed=7" + common() +
                              " --out " + (root_ / "ft").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(value_of(r.out, "frozen_parameters"), "0");
}

TEST_F(Cli, TrainIsBitReproducible) {
  const std::string args = "train --arm plus_random_llm" + common() + " --out ";
  ASSERT_EQ(run_cli(args + (root_ / "a").string()).code, 0);
  ASSERT_EQ(run_cli(args + (root_ / "b").string()).code, 0);
  EXPECT_EQ(slurp(root_ / "a" / "model.fvtw"), slurp(root_ / "b" / "model.fvtw"));
  EXPECT_EQ(slurp(root_ / "a" / "report.csv"), slurp(root_ / "b" / "report.csv"));
}

TEST_F(Cli, ContainerWeightsMatchMockSource) {
  // the same blocks handed over as a file give the same frozen checksum
  fvt::save(fvt::export_blocks(fvt::mock_llm(7, 24, 2, 32, fvt::Variant::kLlama, 1)),
            root_ / "llm.fvtw");
  const CliResult a = run_cli("train --arm plus_llm --llm-weights mock:seed=7" + common() +
                              " --out " + (root_ / "a").string());
  const CliResult b = run_cli("train --arm plus_llm --llm-weights " +
                              (root_ / "llm.fvtw").string() + common() + " --out " +
                              (root_ / "b").string());
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(value_of(a.out, "frozen_checksum_before"), value_of(b.out, "frozen_checksum_before"));
  EXPECT_EQ(run_cli("train --arm plus_llm --llm-weights " + (root_ / "missing.fvtw").string() +
                    common() + " --out " + (root_ / "c").string())
                .code,
            4);
}

TEST_F(Cli, AblateWritesFiveRowsAndCurves) {
  const fs::path out = root_ / "ab";
  const CliResult r = run_cli("ablate" + common() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(value_of(r.out, "data_seed"), "3");
  const auto rows = lines(slurp(out / "ablation.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "arm,data_seed,trainable_params,val_top1,val_loss");
  const auto curves = lines(slurp(out / "finetune_curves.csv"));
  EXPECT_EQ(curves.size(), 1u + 2 * 2);
  for (const char* arm : {"baseline", "plus_llm", "plus_mlp", "plus_random_llm", "plus_llm_ft"}) {
    EXPECT_TRUE(fs::exists(out / arm / "model.fvtw")) << arm;
  }
}

TEST_F(Cli, AnalyzeReportsEveryStageAndTheIdentity) {
  const fs::path out = root_ / "p";
  ASSERT_EQ(run_cli("train --arm plus_llm --llm-weights mock:seed=7" + common() + " --out " +
                    out.string())
                .code,
            0);
  const CliResult r = run_cli("analyze --checkpoint " + (out / "model").string() + " --data " +
                              data().string() + " --out " + (root_ / "an").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(lines(slurp(root_ / "an" / "summary.csv")).size(), 1u + 5 * 2);
  const std::string residual = value_of(r.out, "amplification_identity_max_residual");
  ASSERT_FALSE(residual.empty());
  EXPECT_LT(std::strtod(residual.c_str(), nullptr), 1e-5);
  EXPECT_TRUE(fs::exists(root_ / "an" / "l2_magnitude" / "report.csv"));
}

TEST_F(Cli, AnalyzeUnavailableStageIsContractError) {
  const fs::path out = root_ / "b";
  ASSERT_EQ(run_cli("train" + common() + " --out " + out.string()).code, 0);
  EXPECT_EQ(run_cli("analyze --checkpoint " + (out / "model").string() + " --data " +
                    data().string() + " --stage l2 --out " + (root_ / "an").string())
                .code,
            3);
}

TEST(CliGradcheck, SuitePasses) {
  const CliResult r = run_cli("gradcheck --n-seeds 1");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}
