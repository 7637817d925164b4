#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "matekd/metrics.hpp"
#include "matekd/models.hpp"
#include "matekd/trainer.hpp"

namespace matekd {

struct MetricsReport {
  std::string task;
  std::string split;
  std::string metric;
  double value = 0.0;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  double runtime_seconds = 0.0;

  // Throws when `value` lies outside the metric's valid range.
  void validate() const;
  nlohmann::json to_json() const;
};

MetricsReport evaluate(const Classifier& model, const EncodedDataset& data, std::string_view metric,
                       std::string task = "task", std::string split = "dev");
MetricsReport evaluate(const Teacher& teacher, const EncodedDataset& data, std::string_view metric,
                       std::string task = "task", std::string split = "dev");

// Small table rendered as aligned text or CSV.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string to_text() const;
  std::string to_csv() const;
  void write(const std::filesystem::path& stem) const;  // stem.txt and stem.csv
};

double median(std::vector<double> values);

enum class AblationVariant { kFull, kNoAdvTrain, kNoGenerator };
std::string_view variant_name(AblationVariant v);

struct ExperimentInputs {
  const Teacher& teacher;
  const MaskedLM& generator;  // MLM-pretrained starting point; copied per run
  EncoderConfig student_config;
  const EncodedDataset& train;
  const EncodedDataset& dev;
  TrainConfig config;
  std::vector<std::uint64_t> seeds;
};

// Initial student weights for a paired seed (shared by all variants).
Classifier make_student(const EncoderConfig& config, std::uint64_t seed);

struct RunResult {
  std::uint64_t seed = 0;
  double dev_metric = 0.0;
  TrainHistory history;
};

// Full MATE-KD, generator frozen at its MLM weights (n_generator = 0), and the
// plain KD baseline; all three share student initialisation and seeds.
struct AblationResult {
  std::vector<std::pair<AblationVariant, std::vector<RunResult>>> variants;

  const std::vector<RunResult>& runs(AblationVariant v) const;
  double median_metric(AblationVariant v) const;
  Table table() const;
};

RunResult run_variant(const ExperimentInputs& inputs, AblationVariant variant, std::uint64_t seed);
AblationResult run_ablation(const ExperimentInputs& inputs);

struct SweepResult {
  std::vector<double> rho_values;
  std::vector<std::vector<RunResult>> runs;  // runs[i] for rho_values[i]

  Table table() const;
};

// One full MATE-KD run per (rho, seed); everything else held fixed.
SweepResult sweep_rho(const ExperimentInputs& inputs, const std::vector<double>& rho_values);

struct DumpRow {
  std::string original;
  std::string generated;
  int teacher_label = 0;
  std::vector<int> masked_positions;
  // Not serialized; kept for in-process checks.
  std::vector<int> original_ids;
  std::vector<int> generated_ids;

  bool operator==(const DumpRow& other) const {
    return original == other.original && generated == other.generated &&
           teacher_label == other.teacher_label && masked_positions == other.masked_positions;
  }
};

// Generates `n` pseudo samples (cycling through `data`), labels them with the
// teacher's argmax, and writes TSV columns original, generated,
// teacher_label, masked_positions.
std::vector<DumpRow> dump_generated(const MaskedLM& generator, const Teacher& teacher,
                                    const Vocabulary& vocab, const EncodedDataset& data, int n,
                                    double rho, double tau, std::uint64_t seed,
                                    const std::filesystem::path& out_path);
std::vector<DumpRow> read_dump(const std::filesystem::path& path);

}  // namespace matekd
