#include <gtest/gtest.h>

#include <chrono>
#include <fstream>

#include "cli.hpp"
#include "matekd/error.hpp"
#include "test_util.hpp"

using namespace matekd;
using nlohmann::json;

namespace {

const std::string kSmoke = std::string(MATEKD_CONFIG_DIR) + "/smoke.json";

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "matekd-cli");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

}  // namespace

TEST(Config, DefaultsMergeIntoThemselves) {
  json d = cli::default_config();
  EXPECT_EQ(cli::merge_config(d, d), d);
  EXPECT_EQ(d["trainer"]["n_generator"], 10);
  EXPECT_EQ(d["trainer"]["n_student"], 100);
  EXPECT_DOUBLE_EQ(d["trainer"]["rho"].get<double>(), 0.3);
}

TEST(Config, FileValuesAreChecked) {
  json d = cli::default_config();
  EXPECT_EQ(cli::merge_config(d, {{"trainer", {{"rho", 0.2}}}})["trainer"]["rho"], 0.2);
  EXPECT_THROW(cli::merge_config(d, {{"trainer", {{"rhoo", 0.2}}}}), ConfigError);
  EXPECT_THROW(cli::merge_config(d, {{"trainer", {{"epochs", "ten"}}}}), ConfigError);
  EXPECT_THROW(cli::merge_config(d, {{"trainer", {{"epochs", 2.5}}}}), ConfigError);
  EXPECT_THROW(cli::merge_config(d, {{"trainer", 3}}), ConfigError);
}

TEST(Config, OverridesBeatFileValues) {
  json c = cli::merge_config(cli::default_config(), {{"trainer", {{"rho", 0.2}}}});
  c = cli::apply_overrides(c, {"trainer.rho=0.4", "data.dir=some/dir", "experiment.seeds=[3,4]", "trainer.rho=0.4"});
  EXPECT_DOUBLE_EQ(c["trainer"]["rho"].get<double>(), 0.4);
  EXPECT_EQ(c["data"]["dir"], "some/dir");
  EXPECT_EQ(c["experiment"]["seeds"], json::array({3, 4}));
}

TEST(Config, BadOverridesAreConfigErrors) {
  json d = cli::default_config();
  EXPECT_THROW(cli::apply_overrides(d, {"trainer.rho=0.4", "trainer.rho=0.5"}), ConfigError);
  EXPECT_THROW(cli::apply_overrides(d, {"trainer.nope=1"}), ConfigError);
  EXPECT_THROW(cli::apply_overrides(d, {"trainer=1"}), ConfigError);
  EXPECT_THROW(cli::apply_overrides(d, {"trainer.rho"}), ConfigError);
  EXPECT_THROW(cli::apply_overrides(d, {"trainer.rho=abc"}), ConfigError);
  EXPECT_THROW(cli::apply_overrides(d, {"trainer.epochs=1.5"}), ConfigError);
}

TEST(Dispatch, UsageErrorsExitTwo) {
  testutil::TempDir dir("cli");
  EXPECT_EQ(run_cli({"bogus", "--out", (dir / "a").string()}), 2);
  EXPECT_EQ(run_cli({}), 2);
  EXPECT_EQ(run_cli({"make-data"}), 2);
  EXPECT_EQ(run_cli({"make-data", "--out", (dir / "b").string(), "--override", "trainer.rho=0.4", "--override",
                     "trainer.rho=0.5"}),
            2);
  EXPECT_EQ(run_cli({"make-data", "--out", (dir / "c").string(), "--seed", "3", "--override", "seed=4"}), 2);
  EXPECT_EQ(run_cli({"make-data", "--out", (dir / "d").string(), "--override", "trainer.rho=1.5"}), 2);
  EXPECT_EQ(run_cli({"make-data", "--out", (dir / "e").string(), "--config", (dir / "missing.json").string()}), 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli({"make-data", "--out", (dir / "f").string(), "--config", (dir / "broken.json").string()}), 2);
  // Nothing ran, so nothing was written.
  for (const char* sub : {"a", "b", "c", "d", "e", "f"}) EXPECT_FALSE(std::filesystem::exists(dir / sub)) << sub;
}

TEST(Dispatch, RuntimeFailureExitsOneAndKeepsManifest) {
  testutil::TempDir dir("cli");
  const auto out = dir / "t";
  EXPECT_EQ(run_cli({"pretrain-teacher", "--config", kSmoke, "--out", out.string(), "--override",
                     "data.dir=" + (dir / "no-data").string()}),
            1);
  json m = read_json(out / "manifest.json");
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["command"], "pretrain-teacher");
}

TEST(Dispatch, MissingPathIsConfigError) {
  testutil::TempDir dir("cli");
  ASSERT_EQ(run_cli({"make-data", "--config", kSmoke, "--out", (dir / "data").string()}), 0);
  EXPECT_EQ(run_cli({"train-kd", "--config", kSmoke, "--out", (dir / "kd").string(), "--override",
                     "data.dir=" + (dir / "data").string()}),
            2);
}

TEST(Manifest, RecordsResolvedConfigAndStaysInsideOut) {
  testutil::TempDir dir("cli");
  const auto out = dir / "data";
  ASSERT_EQ(run_cli({"make-data", "--config", kSmoke, "--out", out.string(), "--seed", "5", "--override",
                     "trainer.rho=0.4"}),
            0);
  json m = read_json(out / "manifest.json");
  EXPECT_DOUBLE_EQ(m["config"]["trainer"]["rho"].get<double>(), 0.4);
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["config"]["seed"], 5);
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["config_path"], kSmoke);
  EXPECT_FALSE(m["source_revision"].get<std::string>().empty());
  EXPECT_FALSE(m["finished_at"].is_null());
  EXPECT_EQ(m["out_dir"], out.string());
  // Only the out directory appeared.
  std::vector<std::string> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) entries.push_back(e.path().filename());
  EXPECT_EQ(entries, std::vector<std::string>{"data"});
  EXPECT_TRUE(std::filesystem::exists(out / "train.tsv"));
  EXPECT_TRUE(std::filesystem::exists(out / "dev.tsv"));
}

TEST(Manifest, SnapshotReproducesTheRun) {
  testutil::TempDir dir("cli");
  ASSERT_EQ(run_cli({"make-data", "--config", kSmoke, "--out", (dir / "a").string(), "--seed", "9"}), 0);
  json m = read_json(dir / "a" / "manifest.json");
  std::ofstream(dir / "snapshot.json") << m["config"].dump();
  ASSERT_EQ(run_cli({"make-data", "--config", (dir / "snapshot.json").string(), "--out", (dir / "b").string()}), 0);
  for (const char* f : {"train.tsv", "dev.tsv", "keywords.json"}) {
    std::ifstream a(dir / "a" / f), b(dir / "b" / f);
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_EQ(sa, sb) << f;
  }
}

class Pipeline : public ::testing::Test {
 protected:
  std::vector<std::string> common(const std::string& sub, const std::string& out) const {
    return {sub,
            "--config",
            kSmoke,
            "--out",
            (dir_ / out).string(),
            "--override",
            "data.dir=" + (dir_ / "data").string(),
            "--override",
            "paths.teacher=" + (dir_ / "teacher" / "teacher.ckpt").string(),
            "--override",
            "paths.generator=" + (dir_ / "generator" / "generator.ckpt").string(),
            "--override",
            "paths.student=" + (dir_ / "mate" / "student.ckpt").string()};
  }
  testutil::TempDir dir_{"pipeline"};
};

TEST_F(Pipeline, EndToEndWithinTenMinutes) {
  const auto start = std::chrono::steady_clock::now();
  ASSERT_EQ(run_cli({"make-data", "--config", kSmoke, "--out", (dir_ / "data").string()}), 0);
  ASSERT_EQ(run_cli(common("pretrain-teacher", "teacher")), 0);
  ASSERT_EQ(run_cli(common("pretrain-generator", "generator")), 0);
  ASSERT_EQ(run_cli(common("train-mate-kd", "mate")), 0);
  ASSERT_EQ(run_cli(common("evaluate", "eval")), 0);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  EXPECT_LT(minutes, 10.0);

  json trained = read_json(dir_ / "mate" / "metrics.json");
  json evaluated = read_json(dir_ / "eval" / "metrics.json");
  EXPECT_EQ(trained["value"], evaluated["value"]);
  for (const char* stage : {"data", "teacher", "generator", "mate", "eval"})
    EXPECT_TRUE(std::filesystem::exists(dir_ / stage / "manifest.json")) << stage;
  EXPECT_TRUE(std::filesystem::exists(dir_ / "mate" / "history.jsonl"));

  // The remaining subcommands run off the same artifacts.
  ASSERT_EQ(run_cli(common("train-kd", "kd")), 0);
  ASSERT_EQ(run_cli(common("dump-samples", "dump")), 0);
  ASSERT_EQ(run_cli(common("ablate", "ablate")), 0);
  ASSERT_EQ(run_cli(common("sweep-rho", "sweep")), 0);
  EXPECT_TRUE(std::filesystem::exists(dir_ / "dump" / "samples.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir_ / "ablate" / "ablation.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir_ / "sweep" / "sweep.csv"));
}

TEST_F(Pipeline, SameSeedSameReport) {
  ASSERT_EQ(run_cli({"make-data", "--config", kSmoke, "--out", (dir_ / "data").string()}), 0);
  ASSERT_EQ(run_cli(common("pretrain-teacher", "teacher")), 0);
  ASSERT_EQ(run_cli(common("pretrain-generator", "generator")), 0);
  auto first = common("train-mate-kd", "run1"), second = common("train-mate-kd", "run2");
  for (auto* args : {&first, &second}) {
    args->push_back("--seed");
    args->push_back("7");
    ASSERT_EQ(run_cli(*args), 0);
  }
  json a = read_json(dir_ / "run1" / "metrics.json"), b = read_json(dir_ / "run2" / "metrics.json");
  EXPECT_EQ(a["value"], b["value"]);
  EXPECT_EQ(a["config"], b["config"]);
  std::ifstream ha(dir_ / "run1" / "student.ckpt", std::ios::binary), hb(dir_ / "run2" / "student.ckpt", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(ha)), {}), sb((std::istreambuf_iterator<char>(hb)), {});
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);
}
