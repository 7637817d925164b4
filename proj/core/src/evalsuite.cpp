#include "matekd/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "matekd/error.hpp"
#include "matekd/perturb.hpp"

namespace matekd {

void MetricsReport::validate() const {
  auto [lo, hi] = metric_range(metric);
  if (!(value >= lo && value <= hi))
    throw Error(metric + " value " + std::to_string(value) + " outside its valid range");
}

nlohmann::json MetricsReport::to_json() const {
  return {{"task", task},   {"split", split}, {"metric", metric},
          {"value", value}, {"config", config}, {"seed", seed},
          {"runtime_seconds", runtime_seconds},
          {"degenerate_convention", "matthews/pearson/spearman return 0 on a zero denominator"}};
}

namespace {

template <typename Model>
MetricsReport evaluate_impl(const Model& model, const EncodedDataset& data, std::string_view metric,
                            std::string task, std::string split) {
  if (!is_known_metric(metric)) throw Error("unknown metric: " + std::string(metric));
  const auto start = std::chrono::steady_clock::now();
  auto preds = predict(model, data);
  MetricsReport r;
  r.task = std::move(task);
  r.split = std::move(split);
  r.metric = std::string(metric);
  r.value = compute_metric(metric, std::span<const int>(preds), std::span<const int>(data.labels));
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.validate();
  return r;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

MetricsReport evaluate(const Classifier& model, const EncodedDataset& data, std::string_view metric,
                       std::string task, std::string split) {
  return evaluate_impl(model, data, metric, std::move(task), std::move(split));
}

MetricsReport evaluate(const Teacher& teacher, const EncodedDataset& data, std::string_view metric,
                       std::string task, std::string split) {
  return evaluate_impl(teacher, data, metric, std::move(task), std::move(split));
}

std::string Table::to_text() const {
  std::vector<std::size_t> width(columns.size(), 0);
  for (std::size_t c = 0; c < columns.size(); ++c) width[c] = columns[c].size();
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      out << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << cell;
      out << (c + 1 == width.size() ? "\n" : "  ");
    }
  };
  line(columns);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  out << std::string(total > 2 ? total - 2 : 0, '-') << '\n';
  for (const auto& row : rows) line(row);
  return out.str();
}

std::string Table::to_csv() const {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) out << (c ? "," : "") << cells[c];
    out << '\n';
  };
  line(columns);
  for (const auto& row : rows) line(row);
  return out.str();
}

void Table::write(const std::filesystem::path& stem) const {
  std::ofstream(stem.string() + ".txt") << to_text();
  std::ofstream(stem.string() + ".csv") << to_csv();
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string_view variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull:
      return "MATE-KD";
    case AblationVariant::kNoAdvTrain:
      return "- Adv train";
    case AblationVariant::kNoGenerator:
      return "- Generator";
  }
  return "?";
}

Classifier make_student(const EncoderConfig& config, std::uint64_t seed) {
  return Classifier(config, derive_seed(seed, "student-init"));
}

RunResult run_variant(const ExperimentInputs& inputs, AblationVariant variant, std::uint64_t seed) {
  TrainConfig cfg = inputs.config;
  cfg.seed = seed;
  Classifier student = make_student(inputs.student_config, seed);
  RunResult result;
  result.seed = seed;
  if (variant == AblationVariant::kNoGenerator) {
    result.history = train_kd_baseline(inputs.teacher, student, inputs.train, inputs.dev, cfg);
  } else {
    if (variant == AblationVariant::kNoAdvTrain) cfg.n_generator = 0;
    MaskedLM generator = inputs.generator.clone();
    result.history = train_mate_kd(inputs.teacher, student, generator, inputs.train, inputs.dev, cfg);
  }
  result.dev_metric = result.history.best_dev_metric;
  return result;
}

const std::vector<RunResult>& AblationResult::runs(AblationVariant v) const {
  for (const auto& [variant, runs] : variants)
    if (variant == v) return runs;
  throw Error("ablation variant missing: " + std::string(variant_name(v)));
}

double AblationResult::median_metric(AblationVariant v) const {
  std::vector<double> m;
  for (const auto& r : runs(v)) m.push_back(r.dev_metric);
  return median(m);
}

Table AblationResult::table() const {
  Table t;
  t.columns = {"method"};
  if (!variants.empty())
    for (const auto& r : variants.front().second) t.columns.push_back("seed " + std::to_string(r.seed));
  t.columns.push_back("median");
  for (const auto& [variant, runs] : variants) {
    std::vector<std::string> row{std::string(variant_name(variant))};
    for (const auto& r : runs) row.push_back(fmt(r.dev_metric));
    row.push_back(fmt(median_metric(variant)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

AblationResult run_ablation(const ExperimentInputs& inputs) {
  if (inputs.seeds.empty()) throw Error("ablation needs at least one seed");
  AblationResult out;
  for (auto v : {AblationVariant::kFull, AblationVariant::kNoAdvTrain, AblationVariant::kNoGenerator}) {
    std::vector<RunResult> runs;
    for (auto seed : inputs.seeds) runs.push_back(run_variant(inputs, v, seed));
    out.variants.emplace_back(v, std::move(runs));
  }
  return out;
}

Table SweepResult::table() const {
  Table t;
  t.columns = {"seed"};
  for (double rho : rho_values) t.columns.push_back("rho=" + fmt(rho, 2));
  if (runs.empty() || runs.front().empty()) return t;
  for (std::size_t s = 0; s < runs.front().size(); ++s) {
    std::vector<std::string> row{std::to_string(runs.front()[s].seed)};
    for (const auto& col : runs) row.push_back(fmt(col[s].dev_metric));
    t.rows.push_back(std::move(row));
  }
  std::vector<std::string> med{"median"};
  for (const auto& col : runs) {
    std::vector<double> m;
    for (const auto& r : col) m.push_back(r.dev_metric);
    med.push_back(fmt(median(m)));
  }
  t.rows.push_back(std::move(med));
  return t;
}

SweepResult sweep_rho(const ExperimentInputs& inputs, const std::vector<double>& rho_values) {
  if (inputs.seeds.empty()) throw Error("sweep needs at least one seed");
  for (double rho : rho_values)
    if (!(rho > 0.0 && rho <= 1.0)) throw Error("sweep values must lie in (0, 1]");
  SweepResult out;
  out.rho_values = rho_values;
  for (double rho : rho_values) {
    ExperimentInputs in = inputs;
    in.config.rho = rho;
    std::vector<RunResult> runs;
    for (auto seed : inputs.seeds) runs.push_back(run_variant(in, AblationVariant::kFull, seed));
    out.runs.push_back(std::move(runs));
  }
  return out;
}

namespace {

std::string join_positions(const std::vector<int>& p) {
  std::string out;
  for (std::size_t i = 0; i < p.size(); ++i) out += (i ? "," : "") + std::to_string(p[i]);
  return out;
}

std::vector<int> parse_positions(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

std::vector<DumpRow> dump_generated(const MaskedLM& generator, const Teacher& teacher,
                                    const Vocabulary& vocab, const EncodedDataset& data, int n,
                                    double rho, double tau, std::uint64_t seed,
                                    const std::filesystem::path& out_path) {
  if (n <= 0) throw Error("dump size must be > 0");
  if (data.size() == 0) throw Error("cannot dump from an empty dataset");
  ag::NoGradGuard guard;
  PseudoSampleOptions opts;
  opts.rho = rho;
  opts.tau = tau;
  std::vector<DumpRow> rows;
  for (int i = 0; i < n; ++i) {
    const int idx = i % data.size();
    Batch batch = data.batch(std::span(&idx, 1));
    PseudoBatch pseudo = generate_pseudo_batch(generator, batch, opts, splitmix64(seed + static_cast<std::uint64_t>(i)));
    ag::Matrix t = teacher.logits(pseudo.hard_batch());
    DumpRow row;
    row.original_ids = batch.ids;
    row.generated_ids = pseudo.hard_ids;
    row.original = decode(batch.ids, vocab);
    row.generated = decode(pseudo.hard_ids, vocab);
    row.teacher_label = argmax(std::span(t.row(0).data(), static_cast<std::size_t>(t.cols())));
    row.masked_positions = pseudo.plans.front().positions;
    rows.push_back(std::move(row));
  }
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw Error("cannot write dump: " + out_path.string());
  out << "original\tgenerated\tteacher_label\tmasked_positions\n";
  for (const auto& r : rows)
    out << r.original << '\t' << r.generated << '\t' << r.teacher_label << '\t' << join_positions(r.masked_positions)
        << '\n';
  return rows;
}

std::vector<DumpRow> read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dump: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "original\tgenerated\tteacher_label\tmasked_positions") throw Error("unexpected dump header");
  std::vector<DumpRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, '\t')) f.push_back(cell);
    if (line.back() == '\t') f.emplace_back();
    if (f.size() != 4) throw Error("malformed dump row: " + line);
    DumpRow r;
    r.original = f[0];
    r.generated = f[1];
    r.teacher_label = std::stoi(f[2]);
    r.masked_positions = parse_positions(f[3]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace matekd
