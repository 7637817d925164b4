#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "matekd/error.hpp"
#include "matekd/losses.hpp"
#include "matekd/models.hpp"
#include "matekd/vocab_data.hpp"

namespace matekd {

struct TrainConfig {
  double rho = 0.3;        // masking probability
  double tau = 1.0;        // Gumbel-Softmax temperature
  int n_generator = 10;    // consecutive maximization steps per cycle
  int n_student = 100;     // consecutive minimization steps per cycle
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  double generator_lr = 1e-4;  // 0 means "same as lr"
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int eval_every = 1;  // epochs between dev evaluations
  std::string checkpoint_dir;
  LossConfig loss;

  // Runtime only: stamped into checkpoint sidecars.
  std::uint64_t vocab_hash = 0;

  void validate() const;
  double effective_generator_lr() const { return generator_lr > 0.0 ? generator_lr : lr; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class Phase { kMax, kMin };
std::string_view phase_name(Phase p);

struct StepRecord {
  long step = 0;
  Phase phase = Phase::kMin;
  int epoch = 0;
  double ce = 0.0;
  double kd = 0.0;
  double adv = 0.0;
  double gen_objective = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double dev_metric = 0.0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_dev_metric = 0.0;
  std::string best_checkpoint;

  // One JSON object per line: step records, then epoch records, then a summary.
  void write_jsonl(const std::filesystem::path& path) const;
  static TrainHistory read_jsonl(const std::filesystem::path& path);
};

// Thrown when a loss becomes non-finite; carries everything recorded so far.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, TrainHistory partial)
      : Error(what), history(std::move(partial)) {}
  TrainHistory history;
};

struct EncodedDataset {
  std::vector<TokenSequence> sequences;
  std::vector<int> labels;
  int num_classes = 0;
  std::string metric = "accuracy";

  int size() const { return static_cast<int>(sequences.size()); }
  Batch batch(std::span<const int> indices) const;
};

EncodedDataset encode_dataset(const Dataset& dataset, const Vocabulary& vocab, int max_len);

struct TrainObserver {
  // Called after every optimizer step.
  std::function<void(const StepRecord&)> on_step;
};

// base_lr * (1 - step / total_steps).
double lr_schedule(long step, long total_steps, double base_lr);

// Per-epoch batch layout: how many maximization and minimization steps one
// epoch of `num_batches` batches yields under (n_generator, n_student).
struct EpochPlan {
  int max_steps = 0;
  int min_steps = 0;
};
EpochPlan plan_epoch(int num_batches, int n_generator, int n_student);

// Class predictions (argmax, eval mode).
std::vector<int> predict(const Classifier& model, const EncodedDataset& data, int batch_size = 64);
std::vector<int> predict(const Teacher& teacher, const EncodedDataset& data, int batch_size = 64);

// Cross-entropy training of a classifier. Best dev checkpoint is restored.
TrainHistory pretrain_teacher(Classifier& model, const EncodedDataset& train, const EncodedDataset& dev,
                              const TrainConfig& config, const TrainObserver& observer = {});

// Masked-token reconstruction at masking rate `config.rho`.
TrainHistory pretrain_generator_mlm(MaskedLM& generator, const EncodedDataset& corpus,
                                    const EncodedDataset& heldout, const TrainConfig& config,
                                    const TrainObserver& observer = {});

// Fraction of masked positions whose content-token argmax recovers the original.
double mlm_recovery_accuracy(const MaskedLM& generator, const EncodedDataset& data, double rho,
                             std::uint64_t seed);

// (1 - lambda) * CE + lambda * KD on original samples.
TrainHistory train_kd_baseline(const Teacher& teacher, Classifier& student, const EncodedDataset& train,
                               const EncodedDataset& dev, const TrainConfig& config,
                               const TrainObserver& observer = {});

// Alternates n_generator maximization steps (generator ascends the
// teacher/student KL on pseudo samples) with n_student minimization steps
// (student descends (CE + KD + ADV) / 3). n_generator == 0 keeps the
// generator frozen while still training on pseudo samples.
TrainHistory train_mate_kd(const Teacher& teacher, Classifier& student, MaskedLM& generator,
                           const EncodedDataset& train, const EncodedDataset& dev,
                           const TrainConfig& config, const TrainObserver& observer = {});

// Maximization steps only, against a student that is never updated.
// Returns the generator objective measured at each step.
std::vector<double> train_generator_only(const Teacher& teacher, Classifier& student, MaskedLM& generator,
                                         const EncodedDataset& train, const TrainConfig& config, int steps);

}  // namespace matekd
