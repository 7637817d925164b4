#include "matekd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

#include "matekd/error.hpp"
#include "matekd/metrics.hpp"
#include "matekd/optim.hpp"
#include "matekd/perturb.hpp"

namespace matekd {

using ag::Matrix;
using ag::Var;

void TrainConfig::validate() const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("trainer.rho must be in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("trainer.tau must be > 0");
  if (n_generator < 0) throw ConfigError("trainer.n_generator must be >= 0");
  if (n_student < 1) throw ConfigError("trainer.n_student must be >= 1");
  if (epochs < 1) throw ConfigError("trainer.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("trainer.lr must be > 0");
  if (generator_lr < 0.0) throw ConfigError("trainer.generator_lr must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("trainer.weight_decay must be >= 0");
  if (eval_every < 1) throw ConfigError("trainer.eval_every must be >= 1");
  loss.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"rho", c.rho},
                     {"tau", c.tau},
                     {"n_generator", c.n_generator},
                     {"n_student", c.n_student},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"generator_lr", c.generator_lr},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"checkpoint_dir", c.checkpoint_dir},
                     {"loss",
                      {{"temperature", c.loss.temperature},
                       {"lambda", c.loss.lambda},
                       {"adv_uses_temperature", c.loss.adv_uses_temperature}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.rho = j.value("rho", c.rho);
  c.tau = j.value("tau", c.tau);
  c.n_generator = j.value("n_generator", c.n_generator);
  c.n_student = j.value("n_student", c.n_student);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.generator_lr = j.value("generator_lr", c.generator_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    c.loss.temperature = l.value("temperature", c.loss.temperature);
    c.loss.lambda = l.value("lambda", c.loss.lambda);
    c.loss.adv_uses_temperature = l.value("adv_uses_temperature", c.loss.adv_uses_temperature);
  }
}

std::string_view phase_name(Phase p) { return p == Phase::kMax ? "max" : "min"; }

// ---- history I/O ----

void TrainHistory::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write history: " + path.string());
  for (const auto& s : steps) {
    nlohmann::json j{{"type", "step"},   {"step", s.step}, {"phase", phase_name(s.phase)},
                     {"epoch", s.epoch}, {"ce", s.ce},     {"kd", s.kd},
                     {"adv", s.adv},     {"gen_objective", s.gen_objective},
                     {"loss", s.loss},   {"lr", s.lr}};
    out << j.dump() << '\n';
  }
  for (const auto& e : epochs)
    out << nlohmann::json{{"type", "epoch"}, {"epoch", e.epoch}, {"dev_metric", e.dev_metric}}.dump() << '\n';
  out << nlohmann::json{{"type", "summary"},
                        {"best_epoch", best_epoch},
                        {"best_dev_metric", best_dev_metric},
                        {"best_checkpoint", best_checkpoint}}
             .dump()
      << '\n';
}

TrainHistory TrainHistory::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open history: " + path.string());
  TrainHistory h;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "step") {
      StepRecord s;
      s.step = j.at("step").get<long>();
      s.phase = j.at("phase").get<std::string>() == "max" ? Phase::kMax : Phase::kMin;
      s.epoch = j.at("epoch").get<int>();
      s.ce = j.at("ce").get<double>();
      s.kd = j.at("kd").get<double>();
      s.adv = j.at("adv").get<double>();
      s.gen_objective = j.at("gen_objective").get<double>();
      s.loss = j.at("loss").get<double>();
      s.lr = j.at("lr").get<double>();
      h.steps.push_back(s);
    } else if (type == "epoch") {
      h.epochs.push_back({j.at("epoch").get<int>(), j.at("dev_metric").get<double>()});
    } else if (type == "summary") {
      h.best_epoch = j.at("best_epoch").get<int>();
      h.best_dev_metric = j.at("best_dev_metric").get<double>();
      h.best_checkpoint = j.at("best_checkpoint").get<std::string>();
    }
  }
  return h;
}

// ---- data ----

Batch EncodedDataset::batch(std::span<const int> indices) const {
  std::vector<TokenSequence> seqs;
  std::vector<int> ys;
  seqs.reserve(indices.size());
  for (int i : indices) {
    seqs.push_back(sequences[static_cast<std::size_t>(i)]);
    if (!labels.empty()) ys.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return Batch::from_sequences(seqs, ys);
}

EncodedDataset encode_dataset(const Dataset& dataset, const Vocabulary& vocab, int max_len) {
  EncodedDataset out;
  out.num_classes = dataset.num_classes;
  out.metric = dataset.metric;
  for (const auto& ex : dataset.examples) {
    if (ex.label < 0 || ex.label >= dataset.num_classes) throw Error("example label out of range");
    out.sequences.push_back(encode(ex, vocab, max_len));
    out.labels.push_back(ex.label);
  }
  return out;
}

double lr_schedule(long step, long total_steps, double base_lr) {
  if (total_steps <= 0) throw Error("lr_schedule: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw Error("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

EpochPlan plan_epoch(int num_batches, int n_generator, int n_student) {
  EpochPlan plan;
  const int cycle = n_generator + n_student;
  for (int i = 0; i < num_batches; ++i) (i % cycle < n_generator ? plan.max_steps : plan.min_steps)++;
  return plan;
}

namespace {

int num_batches(int n, int batch_size) { return (n + batch_size - 1) / batch_size; }

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

template <typename Predictor>
std::vector<int> predict_batched(const EncodedDataset& data, int batch_size, Predictor&& logits_of) {
  std::vector<int> preds;
  preds.reserve(static_cast<std::size_t>(data.size()));
  for (int start = 0; start < data.size(); start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Matrix logits = logits_of(data.batch(idx));
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
      preds.push_back(argmax(std::span(logits.row(r).data(), static_cast<std::size_t>(logits.cols()))));
  }
  return preds;
}

double dev_metric(const Classifier& model, const EncodedDataset& dev) {
  auto preds = predict(model, dev);
  return compute_metric(dev.metric, std::span<const int>(preds), std::span<const int>(dev.labels));
}

void check_finite(double v, long step, const TrainHistory& history) {
  if (!std::isfinite(v))
    throw TrainingDiverged("non-finite loss at step " + std::to_string(step), history);
}

Matrix gather(const Matrix& all, std::span<const int> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), all.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = all.row(idx[i]);
  return out;
}

Matrix teacher_logits_for(const Teacher& teacher, const EncodedDataset& data) {
  Matrix out(data.size(), teacher.config().num_classes);
  for (int start = 0; start < data.size(); start += 64) {
    std::vector<int> idx;
    for (int i = start; i < std::min(data.size(), start + 64); ++i) idx.push_back(i);
    out.middleRows(start, static_cast<Eigen::Index>(idx.size())) = teacher.logits(data.batch(idx));
  }
  return out;
}

// Tracks the best dev score (ties keep the earliest) and the matching weights.
class BestTracker {
 public:
  BestTracker(const Module& model, const TrainConfig& config, std::string name)
      : model_(model), config_(config), name_(std::move(name)) {}

  void observe(int epoch, double metric, long step, TrainHistory& history) {
    history.epochs.push_back({epoch, metric});
    if (history.best_epoch >= 0 && metric <= history.best_dev_metric) return;
    history.best_epoch = epoch;
    history.best_dev_metric = metric;
    best_ = model_.snapshot();
    if (!config_.checkpoint_dir.empty()) {
      auto path = std::filesystem::path(config_.checkpoint_dir) / (name_ + ".ckpt");
      save_checkpoint(dynamic_cast<const EncoderModel&>(model_), path, config_.vocab_hash, step, metric);
      history.best_checkpoint = path.string();
    }
  }

  void restore(Module& model) const {
    if (best_) model.restore(*best_);
  }

 private:
  const Module& model_;
  const TrainConfig& config_;
  std::string name_;
  std::optional<std::vector<Matrix>> best_;
};

bool should_eval(int epoch, const TrainConfig& c) {
  return (epoch + 1) % c.eval_every == 0 || epoch + 1 == c.epochs;
}

AdamWOptions adamw(const TrainConfig& c) {
  AdamWOptions o;
  o.weight_decay = c.weight_decay;
  return o;
}

// One generator update ascending KL(T(X') || S(X')); returns the objective
// before the update. The student is a fixed function here and the teacher
// only contributes constants.
double maximization_step(const Teacher& teacher, Classifier& student, MaskedLM& generator, AdamW& opt,
                         const Batch& batch, const PseudoSampleOptions& sample_opts, std::uint64_t seed,
                         double lr) {
  student.set_requires_grad(false);
  PseudoBatch pseudo = generate_pseudo_batch(generator, batch, sample_opts, seed);
  Matrix t = teacher.logits(pseudo.hard_batch());
  Var s = student.logits_relaxed(pseudo.rows, pseudo.size, pseudo.seq_len, pseudo.key_valid);
  Var objective = generator_objective(t, s);
  const double value = objective.item();
  if (std::isfinite(value)) {
    opt.zero_grad();
    ag::backward(ag::scale(objective, -1.0));
    opt.step(lr);
  }
  student.set_requires_grad(true);
  student.zero_grad();
  return value;
}

}  // namespace

std::vector<int> predict(const Classifier& model, const EncodedDataset& data, int batch_size) {
  ag::NoGradGuard guard;
  return predict_batched(data, batch_size, [&](const Batch& b) { return model.logits(b).value(); });
}

std::vector<int> predict(const Teacher& teacher, const EncodedDataset& data, int batch_size) {
  return predict_batched(data, batch_size, [&](const Batch& b) { return teacher.logits(b); });
}

TrainHistory pretrain_teacher(Classifier& model, const EncodedDataset& train, const EncodedDataset& dev,
                              const TrainConfig& config, const TrainObserver& observer) {
  config.validate();
  Rng order_rng(derive_seed(config.seed, "teacher-order"));
  Rng dropout_rng(derive_seed(config.seed, "teacher-dropout"));
  AdamW opt(model.parameters(), adamw(config));
  const long total = static_cast<long>(config.epochs) * num_batches(train.size(), config.batch_size);
  TrainHistory history;
  BestTracker best(model, config, "teacher");
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_rng)) {
      Batch batch = train.batch(idx);
      const double lr = lr_schedule(step, total, config.lr);
      Var loss = ce_loss(model.logits(batch, {true, &dropout_rng}), batch.labels);
      StepRecord rec{step, Phase::kMin, epoch, loss.item(), 0.0, 0.0, 0.0, loss.item(), lr};
      check_finite(loss.item(), step, history);
      opt.zero_grad();
      ag::backward(loss);
      opt.step(lr);
      history.steps.push_back(rec);
      if (observer.on_step) observer.on_step(rec);
      ++step;
    }
    if (should_eval(epoch, config)) best.observe(epoch, dev_metric(model, dev), step, history);
  }
  best.restore(model);
  return history;
}

namespace {

Var mlm_loss(const MaskedLM& generator, const Batch& batch, double rho, std::uint64_t seed,
             const ForwardOptions& opts, std::vector<int>* targets_out = nullptr) {
  MaskedBatch masked = mask_batch(batch, rho, seed);
  std::vector<int> targets;
  for (int p : masked.flat_positions) targets.push_back(batch.ids[static_cast<std::size_t>(p)]);
  Var logits = ag::select_rows(generator.logits(masked.masked, opts), masked.flat_positions);
  if (targets_out) *targets_out = targets;
  return ce_loss(logits, targets);
}

}  // namespace

double mlm_recovery_accuracy(const MaskedLM& generator, const EncodedDataset& data, double rho,
                             std::uint64_t seed) {
  ag::NoGradGuard guard;
  const int K = generator.config().vocab_size;
  long hit = 0;
  long total = 0;
  for (int start = 0; start < data.size(); start += 64) {
    std::vector<int> idx;
    for (int i = start; i < std::min(data.size(), start + 64); ++i) idx.push_back(i);
    Batch batch = data.batch(idx);
    MaskedBatch masked = mask_batch(batch, rho, splitmix64(seed + static_cast<std::uint64_t>(start)));
    if (masked.flat_positions.empty()) continue;
    Matrix logits = ag::select_rows(generator.logits(masked.masked), masked.flat_positions).value();
    logits.rowwise() += special_token_penalty(K).row(0);
    for (std::size_t i = 0; i < masked.flat_positions.size(); ++i) {
      auto r = logits.row(static_cast<Eigen::Index>(i));
      int pred = argmax(std::span(r.data(), static_cast<std::size_t>(K)));
      hit += pred == batch.ids[static_cast<std::size_t>(masked.flat_positions[i])] ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

TrainHistory pretrain_generator_mlm(MaskedLM& generator, const EncodedDataset& corpus,
                                    const EncodedDataset& heldout, const TrainConfig& config,
                                    const TrainObserver& observer) {
  config.validate();
  if (!(config.rho > 0.0)) throw ConfigError("MLM pretraining needs rho > 0");
  Rng order_rng(derive_seed(config.seed, "mlm-order"));
  Rng dropout_rng(derive_seed(config.seed, "mlm-dropout"));
  const std::uint64_t mask_seed = derive_seed(config.seed, "mlm-mask");
  AdamW opt(generator.parameters(), adamw(config));
  const long total = static_cast<long>(config.epochs) * num_batches(corpus.size(), config.batch_size);
  TrainHistory history;
  BestTracker best(generator, config, "generator");
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(corpus.size(), config.batch_size, order_rng)) {
      Batch batch = corpus.batch(idx);
      const double lr = lr_schedule(step, total, config.lr);
      Var loss = mlm_loss(generator, batch, config.rho, splitmix64(mask_seed + static_cast<std::uint64_t>(step)),
                          {true, &dropout_rng});
      StepRecord rec{step, Phase::kMin, epoch, loss.item(), 0.0, 0.0, 0.0, loss.item(), lr};
      check_finite(loss.item(), step, history);
      opt.zero_grad();
      ag::backward(loss);
      opt.step(lr);
      history.steps.push_back(rec);
      if (observer.on_step) observer.on_step(rec);
      ++step;
    }
    if (should_eval(epoch, config))
      best.observe(epoch, mlm_recovery_accuracy(generator, heldout, config.rho, derive_seed(config.seed, "mlm-eval")),
                   step, history);
  }
  best.restore(generator);
  return history;
}

TrainHistory train_kd_baseline(const Teacher& teacher, Classifier& student, const EncodedDataset& train,
                               const EncodedDataset& dev, const TrainConfig& config,
                               const TrainObserver& observer) {
  config.validate();
  Rng order_rng(derive_seed(config.seed, "student-order"));
  Rng dropout_rng(derive_seed(config.seed, "student-dropout"));
  const Matrix teacher_all = teacher_logits_for(teacher, train);
  AdamW opt(student.parameters(), adamw(config));
  const long total = static_cast<long>(config.epochs) * num_batches(train.size(), config.batch_size);
  TrainHistory history;
  BestTracker best(student, config, "student");
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_rng)) {
      Batch batch = train.batch(idx);
      const double lr = lr_schedule(step, total, config.lr);
      Var logits = student.logits(batch, {true, &dropout_rng});
      Var ce = ce_loss(logits, batch.labels);
      Var kd = kd_loss(gather(teacher_all, idx), logits, config.loss.temperature);
      Var loss = kd_baseline_loss(ce, kd, config.loss.lambda);
      StepRecord rec{step, Phase::kMin, epoch, ce.item(), kd.item(), 0.0, 0.0, loss.item(), lr};
      check_finite(loss.item(), step, history);
      opt.zero_grad();
      ag::backward(loss);
      opt.step(lr);
      history.steps.push_back(rec);
      if (observer.on_step) observer.on_step(rec);
      ++step;
    }
    if (should_eval(epoch, config)) best.observe(epoch, dev_metric(student, dev), step, history);
  }
  best.restore(student);
  return history;
}

TrainHistory train_mate_kd(const Teacher& teacher, Classifier& student, MaskedLM& generator,
                           const EncodedDataset& train, const EncodedDataset& dev,
                           const TrainConfig& config, const TrainObserver& observer) {
  config.validate();
  if (student.config().vocab_size != generator.config().vocab_size ||
      teacher.config().vocab_size != student.config().vocab_size)
    throw Error("teacher, student and generator must share one vocabulary");

  Rng order_rng(derive_seed(config.seed, "student-order"));
  Rng dropout_rng(derive_seed(config.seed, "student-dropout"));
  const std::uint64_t pseudo_seed = derive_seed(config.seed, "pseudo");
  const Matrix teacher_all = teacher_logits_for(teacher, train);
  AdamW student_opt(student.parameters(), adamw(config));
  AdamW generator_opt(generator.parameters(), adamw(config));

  const int batches = num_batches(train.size(), config.batch_size);
  const EpochPlan per_epoch = plan_epoch(batches, config.n_generator, config.n_student);
  const long total_min = std::max<long>(1, static_cast<long>(config.epochs) * per_epoch.min_steps);
  const int cycle = config.n_generator + config.n_student;

  PseudoSampleOptions sample_opts;
  sample_opts.rho = config.rho;
  sample_opts.tau = config.tau;

  TrainHistory history;
  BestTracker best(student, config, "student");
  long step = 0;
  long min_steps_done = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    int position = 0;
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_rng)) {
      Batch batch = train.batch(idx);
      const std::uint64_t seed = splitmix64(pseudo_seed + static_cast<std::uint64_t>(step));
      const bool max_phase = position % cycle < config.n_generator;
      ++position;
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      if (max_phase) {
        rec.phase = Phase::kMax;
        rec.lr = config.effective_generator_lr();
        rec.gen_objective = maximization_step(teacher, student, generator, generator_opt, batch,
                                              sample_opts, seed, rec.lr);
        rec.loss = -rec.gen_objective;
        check_finite(rec.gen_objective, step, history);
      } else {
        rec.phase = Phase::kMin;
        rec.lr = lr_schedule(std::min(min_steps_done, total_min), total_min, config.lr);
        PseudoBatch pseudo = [&] {
          ag::NoGradGuard guard;
          return generate_pseudo_batch(generator, batch, sample_opts, seed);
        }();
        Batch pseudo_hard = pseudo.hard_batch();
        Matrix t_orig = gather(teacher_all, idx);
        Matrix t_pseudo = teacher.logits(pseudo_hard);
        Var s_orig = student.logits(batch, {true, &dropout_rng});
        Var s_pseudo = student.logits(pseudo_hard, {true, &dropout_rng});
        Var ce = ce_loss(s_orig, batch.labels);
        Var kd = kd_loss(t_orig, s_orig, config.loss.temperature);
        Var adv = adv_loss(t_pseudo, s_pseudo, config.loss);
        rec.ce = ce.item();
        rec.kd = kd.item();
        rec.adv = adv.item();
        check_finite(rec.ce + rec.kd + rec.adv, step, history);
        Var loss = mate_kd_loss(ce, kd, adv);
        rec.loss = loss.item();
        student_opt.zero_grad();
        ag::backward(loss);
        student_opt.step(rec.lr);
        ++min_steps_done;
      }
      history.steps.push_back(rec);
      if (observer.on_step) observer.on_step(rec);
      ++step;
    }
    if (should_eval(epoch, config)) best.observe(epoch, dev_metric(student, dev), step, history);
  }
  best.restore(student);
  return history;
}

std::vector<double> train_generator_only(const Teacher& teacher, Classifier& student, MaskedLM& generator,
                                         const EncodedDataset& train, const TrainConfig& config, int steps) {
  config.validate();
  if (steps < 1) throw Error("train_generator_only: steps must be >= 1");
  Rng order_rng(derive_seed(config.seed, "student-order"));
  const std::uint64_t pseudo_seed = derive_seed(config.seed, "pseudo");
  AdamW opt(generator.parameters(), adamw(config));
  PseudoSampleOptions sample_opts;
  sample_opts.rho = config.rho;
  sample_opts.tau = config.tau;
  std::vector<double> objectives;
  long step = 0;
  while (static_cast<int>(objectives.size()) < steps) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_rng)) {
      if (static_cast<int>(objectives.size()) == steps) break;
      const std::uint64_t seed = splitmix64(pseudo_seed + static_cast<std::uint64_t>(step++));
      const double v = maximization_step(teacher, student, generator, opt, train.batch(idx), sample_opts, seed,
                                         config.effective_generator_lr());
      if (!std::isfinite(v)) throw Error("non-finite generator objective");
      objectives.push_back(v);
    }
  }
  return objectives;
}

}  // namespace matekd
