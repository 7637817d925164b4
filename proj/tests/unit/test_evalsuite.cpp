#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "matekd/error.hpp"
#include "matekd/evalsuite.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace matekd;

namespace {

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Metrics, AccuracyOnPerfectPredictions) {
  std::vector<int> y = {0, 1, 1, 0, 2};
  EXPECT_DOUBLE_EQ(compute_metric("accuracy", y, y), 1.0);
}

TEST(Metrics, MatthewsDegenerateIsZero) {
  std::vector<int> pred = {1, 1, 1, 1}, ref = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(compute_metric("matthews", pred, ref), 0.0);
  std::vector<double> flat = {2, 2, 2}, other = {1, 2, 3};
  EXPECT_DOUBLE_EQ(compute_metric("pearson", flat, other), 0.0);
}

TEST(Metrics, F1AgainstConfusionMatrix) {
  std::vector<int> pred = {1, 1, 0}, ref = {1, 0, 0};
  EXPECT_NEAR(compute_metric("f1", pred, ref), oracle::f1(pred, ref), 1e-12);
}

TEST(Metrics, RandomInputsMatchOracles) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    const int classes = 2 + static_cast<int>(rng() % 3);
    std::vector<int> pred(n), ref(n), bin_pred(n), bin_ref(n);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng() % classes);
      ref[i] = static_cast<int>(rng() % classes);
      bin_pred[i] = static_cast<int>(rng() % 2);
      bin_ref[i] = static_cast<int>(rng() % 2);
      x[i] = static_cast<double>(rng() % 6);  // small range to force ties
      y[i] = static_cast<double>(rng() % 6) + 0.5 * x[i];
    }
    double correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == ref[i];
    EXPECT_NEAR(compute_metric("accuracy", pred, ref), correct / static_cast<double>(n), 1e-9);
    EXPECT_NEAR(compute_metric("f1", bin_pred, bin_ref), oracle::f1(bin_pred, bin_ref), 1e-9);
    EXPECT_NEAR(compute_metric("matthews", pred, ref), oracle::matthews(pred, ref), 1e-9);
    EXPECT_NEAR(compute_metric("pearson", x, y), oracle::pearson(x, y), 1e-9);
    EXPECT_NEAR(compute_metric("spearman", x, y), oracle::spearman(x, y), 1e-9);
  }
}

TEST(Metrics, Errors) {
  std::vector<int> a = {1, 0}, b = {1};
  EXPECT_THROW(compute_metric("accuracy", a, b), Error);
  EXPECT_THROW(compute_metric("bleu", a, a), Error);
  std::vector<int> empty;
  EXPECT_THROW(compute_metric("accuracy", empty, empty), Error);
  EXPECT_TRUE(is_known_metric("spearman"));
  EXPECT_FALSE(is_known_metric("auc"));
  EXPECT_EQ(metric_range("matthews"), std::make_pair(-1.0, 1.0));
}

TEST(MetricsReport, RangeValidation) {
  MetricsReport r;
  r.metric = "accuracy";
  r.value = 0.5;
  EXPECT_NO_THROW(r.validate());
  r.value = 1.5;
  EXPECT_THROW(r.validate(), Error);
  r.metric = "matthews";
  r.value = -0.5;
  EXPECT_NO_THROW(r.validate());
  auto j = r.to_json();
  EXPECT_EQ(j["metric"], "matthews");
  EXPECT_DOUBLE_EQ(j["value"].get<double>(), -0.5);
}

TEST(Evaluate, DeterministicAndValid) {
  auto t = testutil::tiny_task(32, 64);
  Classifier model(testutil::tiny_config(t.vocab.size()), 1);
  MetricsReport a = evaluate(model, t.dev, "accuracy", "synthetic", "dev");
  MetricsReport b = evaluate(model, t.dev, "accuracy", "synthetic", "dev");
  EXPECT_EQ(a.value, b.value);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.task, "synthetic");
  EXPECT_EQ(a.split, "dev");
}

TEST(Evaluate, RandomStudentsAreAtChance) {
  SyntheticSpec spec;
  spec.n_train = 16;
  spec.n_dev = 512;
  SyntheticTask task = make_synthetic_task(spec, 2);
  std::vector<std::string> corpus;
  for (const auto& e : task.train.examples) corpus.push_back(e.text_a);
  for (const auto& e : task.dev.examples) corpus.push_back(e.text_a);
  Vocabulary vocab = build_vocab(corpus, 1000);
  EncodedDataset dev = encode_dataset(task.dev, vocab, spec.seq_len + 2);
  EncoderConfig cfg = testutil::tiny_config(vocab.size());
  cfg.max_len = spec.seq_len + 2;
  std::vector<double> accs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) accs.push_back(evaluate(make_student(cfg, seed), dev, "accuracy").value);
  EXPECT_NEAR(median(accs), 0.5, 0.05);
}

TEST(Table, TextAndCsv) {
  Table t{{"variant", "acc"}, {{"MATE-KD", "0.91"}, {"- Generator", "0.88"}}};
  EXPECT_EQ(t.to_csv(), "variant,acc\nMATE-KD,0.91\n- Generator,0.88\n");
  const std::string text = t.to_text();
  EXPECT_NE(text.find("MATE-KD"), std::string::npos);
  testutil::TempDir dir("table");
  t.write(dir / "ablation");
  EXPECT_EQ(read_all(dir / "ablation.csv"), t.to_csv());
  EXPECT_EQ(read_all(dir / "ablation.txt"), text);
}

TEST(Median, OddEvenAndEmpty) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), Error);
}

class SmallExperiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    task_ = new testutil::TinyTask(testutil::tiny_task(48, 24));
    EncoderConfig cfg = testutil::tiny_config(task_->vocab.size());
    Classifier t(cfg, 100);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    pretrain_teacher(t, task_->train, task_->dev, tc);
    teacher_ = new Teacher(std::move(t));
    generator_ = new MaskedLM(cfg, 101);
  }
  static void TearDownTestSuite() {
    delete generator_;
    delete teacher_;
    delete task_;
  }

  ExperimentInputs inputs(std::vector<std::uint64_t> seeds) const {
    TrainConfig c;
    c.epochs = 1;
    c.batch_size = 8;
    c.n_generator = 2;
    c.n_student = 3;
    return {*teacher_, *generator_, testutil::tiny_config(task_->vocab.size()), task_->train, task_->dev, c, seeds};
  }

  static testutil::TinyTask* task_;
  static Teacher* teacher_;
  static MaskedLM* generator_;
};

testutil::TinyTask* SmallExperiment::task_ = nullptr;
Teacher* SmallExperiment::teacher_ = nullptr;
MaskedLM* SmallExperiment::generator_ = nullptr;

TEST_F(SmallExperiment, AblationRowsAndKdEquivalence) {
  AblationResult r = run_ablation(inputs({5, 6}));
  ASSERT_EQ(r.variants.size(), 3u);
  Table t = r.table();
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0][0], "MATE-KD");
  EXPECT_EQ(t.rows[1][0], "- Adv train");
  EXPECT_EQ(t.rows[2][0], "- Generator");

  // "- Generator" follows the KD-baseline entry point step for step.
  for (const auto& run : r.runs(AblationVariant::kNoGenerator)) {
    Classifier student = make_student(testutil::tiny_config(task_->vocab.size()), run.seed);
    TrainConfig c = inputs({}).config;
    c.seed = run.seed;
    TrainHistory h = train_kd_baseline(*teacher_, student, task_->train, task_->dev, c);
    ASSERT_EQ(h.steps.size(), run.history.steps.size());
    for (std::size_t i = 0; i < h.steps.size(); ++i) EXPECT_EQ(h.steps[i].loss, run.history.steps[i].loss);
  }
  // The frozen-generator variant never takes a maximization step.
  for (const auto& run : r.runs(AblationVariant::kNoAdvTrain))
    for (const auto& s : run.history.steps) EXPECT_EQ(s.phase, Phase::kMin);
  EXPECT_EQ(generator_->parameter_hash(), MaskedLM(testutil::tiny_config(task_->vocab.size()), 101).parameter_hash());
}

TEST_F(SmallExperiment, SweepHasOneColumnPerRho) {
  SweepResult s = sweep_rho(inputs({5}), {0.1, 0.5});
  Table t = s.table();
  EXPECT_EQ(s.runs.size(), 2u);
  for (const auto& runs : s.runs)
    for (const auto& r : runs) {
      EXPECT_GE(r.dev_metric, 0.0);
      EXPECT_LE(r.dev_metric, 1.0);
    }
  EXPECT_EQ(t.columns.size(), 3u);
  EXPECT_THROW(sweep_rho(inputs({5}), {0.0}), Error);
  EXPECT_THROW(sweep_rho(inputs({5}), {1.2}), Error);
}

TEST_F(SmallExperiment, DumpIsLocalAndRoundTrips) {
  testutil::TempDir dir("dump");
  auto rows = dump_generated(*generator_, *teacher_, task_->vocab, task_->dev, 200, 0.3, 1.0, 9, dir / "d.tsv");
  ASSERT_EQ(rows.size(), 200u);
  double changed_total = 0;
  for (const auto& r : rows) {
    ASSERT_EQ(r.original_ids.size(), r.generated_ids.size());
    int changed = 0;
    for (std::size_t i = 0; i < r.original_ids.size(); ++i) {
      const bool in_plan =
          std::find(r.masked_positions.begin(), r.masked_positions.end(), static_cast<int>(i)) != r.masked_positions.end();
      if (!in_plan) EXPECT_EQ(r.original_ids[i], r.generated_ids[i]);
      if (Vocabulary::is_special(r.original_ids[i]) && r.original_ids[i] != Vocabulary::kUnk)
        EXPECT_EQ(r.generated_ids[i], r.original_ids[i]);
      changed += r.original_ids[i] != r.generated_ids[i];
    }
    changed_total += changed;
    EXPECT_GE(r.teacher_label, 0);
    EXPECT_LT(r.teacher_label, 2);
  }
  // Sequences have 6 maskable tokens here.
  EXPECT_LE(changed_total / 200, 6 * 0.3 + 3 * std::sqrt(6 * 0.3 * 0.7) / std::sqrt(200.0));
  EXPECT_EQ(read_dump(dir / "d.tsv"), rows);
  EXPECT_THROW(dump_generated(*generator_, *teacher_, task_->vocab, task_->dev, 0, 0.3, 1.0, 9, dir / "e.tsv"), Error);
}
