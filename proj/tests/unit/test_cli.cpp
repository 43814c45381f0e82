#include <cstdlib>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "voxseg/io.hpp"

using namespace voxseg;
using testing_support::TempDir;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + VOXSEG_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

const char* kPhantoms = R"({"phantoms": [
  {"name": "a", "group": "single", "dims": [16, 16, 16], "background_intensity": 0.2,
   "lesions": [{"center": [8, 8, 8], "radii": [4, 4, 4], "intensity": 1.0}], "psf_sigma": 0.8, "noise_sigma": 0.02, "seed": 1},
  {"name": "b", "group": "multi", "dims": [16, 16, 16], "background_intensity": 0.2,
   "lesions": [{"center": [5, 5, 5], "radii": [3, 3, 3], "intensity": 1.0},
               {"center": [11, 11, 11], "radii": [3, 3, 3], "intensity": 1.0}], "psf_sigma": 0.8, "noise_sigma": 0.02, "seed": 2}
]})";

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  TempDir dir;
  EXPECT_EQ(run_cli("", dir / "log"), 2);
  EXPECT_EQ(run_cli("frobnicate", dir / "log"), 2);
  EXPECT_EQ(run_cli("segment", dir / "log"), 2);
}

TEST(Cli, GenerateSegmentEvaluateRoundtrip) {
  TempDir dir;
  write_file_atomic(dir / "spec.json", kPhantoms);
  ASSERT_EQ(run_cli("generate-phantom --spec " + q(dir / "spec.json") + " --out-dir " + q(dir.path()), dir / "log"), 0);
  EXPECT_TRUE(fs::exists(dir / "a_volume.json"));
  EXPECT_TRUE(fs::exists(dir / "b_mask.raw"));
  const auto cases = read_json_file(dir / "cases.json");
  ASSERT_EQ(cases["cases"].size(), 2u);
  EXPECT_EQ(cases["cases"][1]["group"], "multi");

  for (const char* name : {"a", "b"}) {
    const json cfg = {{"method", "km"}, {"seed", 1}, {"input", std::string(name) + "_volume.json"},
                      {"output", std::string(name) + "_pred.json"}};
    write_json_file(dir / (std::string(name) + "_cfg.json"), cfg);
    ASSERT_EQ(run_cli("segment --config " + q(dir / (std::string(name) + "_cfg.json")), dir / "log"), 0);
  }
  write_file_atomic(dir / "pred.txt", "# predictions\na_pred.json\nb_pred.json\n");
  write_file_atomic(dir / "gt.txt", "a_mask.json\nb_mask.json\n");
  write_file_atomic(dir / "groups.txt", "single\nmulti\n");
  ASSERT_EQ(run_cli("evaluate --pred " + q(dir / "pred.txt") + " --gt " + q(dir / "gt.txt") + " --groups " +
                        q(dir / "groups.txt") + " --out " + q(dir.path()) + " --method KM --params \"k=2, f=1\"",
                    dir / "log"),
            0);
  const auto report = read_json_file(dir / "report.json");
  EXPECT_GT(report["aggregates"]["dice"]["mean"].get<double>(), 0.8);
  EXPECT_TRUE(report["aggregates"]["dice"]["groups"].contains("multi"));
  EXPECT_NE(read_file(dir / "report.txt").find("balanced"), std::string::npos);
}

TEST(Cli, EvaluateAllFailedExitsNonZero) {
  TempDir dir;
  write_mask(BinaryMask3({4, 4, 4}), dir / "p.json");
  write_mask(BinaryMask3({5, 4, 4}), dir / "g.json");
  write_file_atomic(dir / "pred.txt", "p.json\n");
  write_file_atomic(dir / "gt.txt", "g.json\n");
  EXPECT_NE(run_cli("evaluate --pred " + q(dir / "pred.txt") + " --gt " + q(dir / "gt.txt") + " --out " + q(dir.path()),
                    dir / "log"),
            0);
}

TEST(Cli, ConfigAndIoErrorsMapToExitCodes) {
  TempDir dir;
  write_json_file(dir / "unknown.json", {{"method", "km"}, {"colour", 1}});
  EXPECT_EQ(run_cli("segment --config " + q(dir / "unknown.json"), dir / "log"), 2);
  write_file_atomic(dir / "broken.json", "{");
  EXPECT_EQ(run_cli("segment --config " + q(dir / "broken.json"), dir / "log"), 2);
  write_json_file(dir / "dict.json", {{"method", "dict"}, {"input", "v.json"}, {"output", "o.json"}, {"model", "none.json"}});
  EXPECT_EQ(run_cli("segment --config " + q(dir / "dict.json"), dir / "log"), 2);
  write_json_file(dir / "train_km.json", {{"method", "km"}, {"model", "m.json"}});
  EXPECT_EQ(run_cli("train --config " + q(dir / "train_km.json"), dir / "log"), 2);
  write_json_file(dir / "missing_input.json", {{"method", "km"}, {"input", "absent.json"}, {"output", "o.json"}});
  EXPECT_EQ(run_cli("segment --config " + q(dir / "missing_input.json"), dir / "log"), 3);
  EXPECT_EQ(run_cli("segment --config " + q(dir / "no_such_config.json"), dir / "log"), 3);
}

TEST(Cli, KfoldPrintsPartition) {
  TempDir dir;
  write_file_atomic(dir / "cases.txt", "c0\nc1\nc2\nc3\nc4\nc5\nc6\nc7\nc8\nc9\n");
  ASSERT_EQ(run_cli("kfold --cases " + q(dir / "cases.txt") + " --k 5 --seed 3 --out " + q(dir / "folds.json"), dir / "log"), 0);
  const auto j = read_json_file(dir / "folds.json");
  ASSERT_EQ(j["folds"].size(), 5u);
  for (const auto& f : j["folds"]) EXPECT_EQ(f["test"].size(), 2u);
  EXPECT_EQ(json::parse(read_file(dir / "log")), j);
  EXPECT_EQ(run_cli("kfold --cases " + q(dir / "cases.txt") + " --k 11 --seed 3", dir / "log"), 2);
}

TEST(Cli, TrainDictThenSegment) {
  TempDir dir;
  write_file_atomic(dir / "spec.json", kPhantoms);
  ASSERT_EQ(run_cli("generate-phantom --spec " + q(dir / "spec.json") + " --out-dir " + q(dir.path()), dir / "log"), 0);
  write_json_file(dir / "train.json", {{"method", "dict"}, {"params", {{"train_iterations", 2}}}, {"seed", 3},
                                       {"model", "dict.json"}, {"train", "cases.json"}});
  ASSERT_EQ(run_cli("train --config " + q(dir / "train.json"), dir / "log"), 0);
  EXPECT_TRUE(fs::exists(dir / "dict.trace.json"));
  write_json_file(dir / "seg.json", {{"method", "dict"}, {"seed", 3}, {"model", "dict.json"},
                                     {"input", "a_volume.json"}, {"output", "a_pred.json"}});
  ASSERT_EQ(run_cli("segment --config " + q(dir / "seg.json"), dir / "log"), 0);
  EXPECT_TRUE(fs::exists(dir / "a_pred.manifest.json"));
}
