#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "matekd/error.hpp"
#include "matekd/evalsuite.hpp"
#include "matekd/rng.hpp"
#include "matekd/trainer.hpp"
#include "matekd/vocab_data.hpp"

#ifndef MATEKD_SOURCE_REVISION
#define MATEKD_SOURCE_REVISION "unknown"
#endif

namespace matekd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json model_section(int layers, int dim, int heads, int ffn, double dropout) {
  return {{"num_layers", layers}, {"hidden_dim", dim}, {"num_heads", heads}, {"ffn_dim", ffn}, {"dropout", dropout}};
}

json train_section(const TrainConfig& c) {
  json j = c;
  j.erase("checkpoint_dir");
  return j;
}

bool compatible(const json& def, const json& value) {
  if (def.is_number_integer()) return value.is_number_integer();
  if (def.is_number()) return value.is_number();
  return def.type() == value.type();
}

json::json_pointer pointer_for(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return json::json_pointer(p);
}

void merge_into(json& base, const json& file, const std::string& prefix) {
  if (!file.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : file.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key: " + path);
    json& target = base[key];
    if (target.is_object()) {
      merge_into(target, value, path);
    } else {
      if (!compatible(target, value)) throw ConfigError("wrong type for config key: " + path);
      target = value;
    }
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_line(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

template <typename T>
T get(const json& config, const std::string& dotted) {
  try {
    return config.at(pointer_for(dotted)).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad config value for " + dotted + ": " + e.what());
  }
}

// Typed view of the resolved config.
struct Settings {
  json raw;
  std::uint64_t seed = 0;
  SyntheticSpec synthetic;
  ColumnSchema schema;
  EncoderConfig teacher_model, generator_model, student_model;
  TrainConfig teacher_train, generator_train, trainer;
  std::vector<std::uint64_t> seeds;
  std::vector<double> rho_values;

  std::string path_of(const std::string& name) const {
    auto p = get<std::string>(raw, "paths." + name);
    if (p.empty()) throw ConfigError("paths." + name + " is not set");
    return p;
  }
};

Settings decode(const json& raw) {
  Settings s;
  s.raw = raw;
  s.seed = get<std::uint64_t>(raw, "seed");
  auto& syn = s.synthetic;
  syn.n_train = get<int>(raw, "synthetic.n_train");
  syn.n_dev = get<int>(raw, "synthetic.n_dev");
  syn.vocab_content_size = get<int>(raw, "synthetic.vocab_content_size");
  syn.seq_len = get<int>(raw, "synthetic.seq_len");
  try {
    syn.rule = parse_synthetic_rule(get<std::string>(raw, "synthetic.rule"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  syn.keywords_per_class = get<int>(raw, "synthetic.keywords_per_class");
  syn.overlap_k = get<int>(raw, "synthetic.overlap_k");

  s.schema.text_a = get<std::string>(raw, "data.text_a");
  if (auto b = get<std::string>(raw, "data.text_b"); !b.empty()) s.schema.text_b = b;
  s.schema.label = get<std::string>(raw, "data.label");
  if (!is_known_metric(get<std::string>(raw, "data.metric")))
    throw ConfigError("unknown data.metric: " + get<std::string>(raw, "data.metric"));
  if (get<int>(raw, "data.max_len") < 4) throw ConfigError("data.max_len must be >= 4");
  if (get<int>(raw, "data.vocab_size") < Vocabulary::kNumSpecials + 2) throw ConfigError("data.vocab_size must be >= 7");

  s.teacher_model = get<EncoderConfig>(raw, "teacher.model");
  s.generator_model = get<EncoderConfig>(raw, "generator.model");
  s.student_model = get<EncoderConfig>(raw, "student.model");
  for (EncoderConfig c : {s.teacher_model, s.generator_model, s.student_model}) {
    // Data-dependent fields are filled in later; check the rest now.
    c.vocab_size = Vocabulary::kNumSpecials + 2;
    c.max_len = get<int>(raw, "data.max_len");
    c.validate();
  }
  s.teacher_train = get<TrainConfig>(raw, "teacher.train");
  s.generator_train = get<TrainConfig>(raw, "generator.train");
  s.trainer = get<TrainConfig>(raw, "trainer");
  for (TrainConfig* c : {&s.teacher_train, &s.generator_train, &s.trainer}) {
    c->seed = s.seed;
    c->validate();
  }
  s.seeds = get<std::vector<std::uint64_t>>(raw, "experiment.seeds");
  if (s.seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
  s.rho_values = get<std::vector<double>>(raw, "experiment.rho_values");
  if (get<int>(raw, "experiment.dump_samples") < 1) throw ConfigError("experiment.dump_samples must be >= 1");
  return s;
}

struct TaskData {
  Vocabulary vocab;
  EncodedDataset train;
  EncodedDataset dev;
  std::string task;
  std::string metric;
};

TaskData load_task(const Settings& s) {
  const auto dir = get<std::string>(s.raw, "data.dir");
  if (dir.empty()) throw ConfigError("data.dir is not set");
  Dataset train = load_dataset(fs::path(dir) / get<std::string>(s.raw, "data.train_file"), s.schema, "train");
  Dataset dev = load_dataset(fs::path(dir) / get<std::string>(s.raw, "data.dev_file"), s.schema, "dev",
                             train.label_names);
  if (dev.num_classes != train.num_classes) throw Error("dev split has labels not seen in the train split");
  TaskData t;
  t.task = get<std::string>(s.raw, "data.task");
  t.metric = get<std::string>(s.raw, "data.metric");
  train.metric = dev.metric = t.metric;
  std::vector<std::string> corpus;
  for (const auto& e : train.examples) {
    corpus.push_back(e.text_a);
    if (e.text_b) corpus.push_back(*e.text_b);
  }
  t.vocab = build_vocab(corpus, get<int>(s.raw, "data.vocab_size"));
  const int max_len = get<int>(s.raw, "data.max_len");
  t.train = encode_dataset(train, t.vocab, max_len);
  t.dev = encode_dataset(dev, t.vocab, max_len);
  return t;
}

EncoderConfig bind(EncoderConfig c, const TaskData& t, const Settings& s) {
  c.vocab_size = t.vocab.size();
  c.max_len = get<int>(s.raw, "data.max_len");
  c.num_classes = t.train.num_classes;
  c.validate();
  return c;
}

TrainConfig for_output(TrainConfig c, const TaskData& t, const fs::path& out) {
  c.checkpoint_dir = out.string();
  c.vocab_hash = t.vocab.hash();
  return c;
}

void write_report(MetricsReport report, const Settings& s, const fs::path& out) {
  report.config = s.raw;
  report.seed = s.seed;
  report.validate();
  write_line(out / "metrics.json", report.to_json());
  std::cout << report.task << " " << report.split << " " << report.metric << " = " << report.value << '\n';
}

void write_runs(const fs::path& path, const std::vector<std::pair<json, std::vector<RunResult>>>& groups) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [key, runs] : groups)
    for (const auto& r : runs) {
      json line = key;
      line["seed"] = r.seed;
      line["dev_metric"] = r.dev_metric;
      line["best_epoch"] = r.history.best_epoch;
      out << line.dump() << '\n';
    }
}

// ---- subcommands ----

void make_data(const Settings& s, const fs::path& out) {
  SyntheticTask task = make_synthetic_task(s.synthetic, s.seed);
  if (s.synthetic.rule == SyntheticRule::kPairOverlap && !s.schema.text_b)
    throw ConfigError("pair-overlap data needs data.text_b");
  save_dataset(task.train, out / get<std::string>(s.raw, "data.train_file"), s.schema);
  save_dataset(task.dev, out / get<std::string>(s.raw, "data.dev_file"), s.schema);
  write_line(out / "keywords.json",
             {{"rule", synthetic_rule_name(s.synthetic.rule)}, {"keywords", task.keywords}});
  std::cout << "wrote " << task.train.examples.size() << " train and " << task.dev.examples.size()
            << " dev examples to " << out.string() << '\n';
}

void pretrain_teacher_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  Classifier model(bind(s.teacher_model, t, s), derive_seed(s.seed, "teacher-init"));
  TrainHistory h = pretrain_teacher(model, t.train, t.dev, for_output(s.teacher_train, t, out));
  h.write_jsonl(out / "history.jsonl");
  write_report(evaluate(model, t.dev, t.metric, t.task, "dev"), s, out);
}

void pretrain_generator_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  MaskedLM generator(bind(s.generator_model, t, s), derive_seed(s.seed, "generator-init"));
  TrainHistory h = pretrain_generator_mlm(generator, t.train, t.dev, for_output(s.generator_train, t, out));
  h.write_jsonl(out / "history.jsonl");
  const double chance = 1.0 / t.vocab.content_size();
  write_line(out / "metrics.json", {{"task", t.task},
                                    {"split", "dev"},
                                    {"metric", "mlm_recovery"},
                                    {"value", h.best_dev_metric},
                                    {"chance", chance},
                                    {"seed", s.seed},
                                    {"config", s.raw}});
  std::cout << t.task << " dev mlm_recovery = " << h.best_dev_metric << " (chance " << chance << ")\n";
}

Teacher load_teacher(const Settings& s, const TaskData& t) {
  return Teacher(load_classifier(s.path_of("teacher"), t.vocab.hash()));
}

void train_student_cmd(const Settings& s, const fs::path& out, bool adversarial) {
  TaskData t = load_task(s);
  Teacher teacher = load_teacher(s, t);
  Classifier student = make_student(bind(s.student_model, t, s), s.seed);
  const TrainConfig c = for_output(s.trainer, t, out);
  TrainHistory h;
  if (adversarial) {
    MaskedLM generator = load_masked_lm(s.path_of("generator"), t.vocab.hash());
    h = train_mate_kd(teacher, student, generator, t.train, t.dev, c);
  } else {
    h = train_kd_baseline(teacher, student, t.train, t.dev, c);
  }
  h.write_jsonl(out / "history.jsonl");
  write_report(evaluate(student, t.dev, t.metric, t.task, "dev"), s, out);
}

void ablate_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  Teacher teacher = load_teacher(s, t);
  MaskedLM generator = load_masked_lm(s.path_of("generator"), t.vocab.hash());
  AblationResult r =
      run_ablation({teacher, generator, bind(s.student_model, t, s), t.train, t.dev, s.trainer, s.seeds});
  Table table = r.table();
  table.write(out / "ablation");
  std::vector<std::pair<json, std::vector<RunResult>>> groups;
  for (const auto& [variant, runs] : r.variants) groups.push_back({{{"variant", variant_name(variant)}}, runs});
  write_runs(out / "runs.jsonl", groups);
  std::cout << table.to_text();
}

void sweep_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  Teacher teacher = load_teacher(s, t);
  MaskedLM generator = load_masked_lm(s.path_of("generator"), t.vocab.hash());
  SweepResult r =
      sweep_rho({teacher, generator, bind(s.student_model, t, s), t.train, t.dev, s.trainer, s.seeds}, s.rho_values);
  Table table = r.table();
  table.write(out / "sweep");
  std::vector<std::pair<json, std::vector<RunResult>>> groups;
  for (std::size_t i = 0; i < r.rho_values.size(); ++i) groups.push_back({{{"rho", r.rho_values[i]}}, r.runs[i]});
  write_runs(out / "runs.jsonl", groups);
  std::cout << table.to_text();
}

void evaluate_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  Classifier student = load_classifier(s.path_of("student"), t.vocab.hash());
  write_report(evaluate(student, t.dev, t.metric, t.task, "dev"), s, out);
}

void dump_cmd(const Settings& s, const fs::path& out) {
  TaskData t = load_task(s);
  Teacher teacher = load_teacher(s, t);
  MaskedLM generator = load_masked_lm(s.path_of("generator"), t.vocab.hash());
  const int n = get<int>(s.raw, "experiment.dump_samples");
  dump_generated(generator, teacher, t.vocab, t.dev, n, s.trainer.rho, s.trainer.tau, s.seed, out / "samples.tsv");
  std::cout << "wrote " << n << " samples to " << (out / "samples.tsv").string() << '\n';
}

}  // namespace

json default_config() {
  TrainConfig teacher_train;
  teacher_train.epochs = 30;
  teacher_train.lr = 5e-4;
  TrainConfig generator_train;
  generator_train.epochs = 10;
  TrainConfig trainer;
  SyntheticSpec syn;
  syn.vocab_content_size = 96;
  syn.keywords_per_class = 12;
  return {
      {"seed", 0},
      {"data",
       {{"dir", ""},
        {"task", "synthetic"},
        {"train_file", "train.tsv"},
        {"dev_file", "dev.tsv"},
        {"text_a", "sentence"},
        {"text_b", ""},
        {"label", "label"},
        {"metric", "accuracy"},
        {"vocab_size", 1000},
        {"max_len", syn.seq_len + 2}}},
      {"synthetic",
       {{"n_train", syn.n_train},
        {"n_dev", syn.n_dev},
        {"vocab_content_size", syn.vocab_content_size},
        {"seq_len", syn.seq_len},
        {"rule", synthetic_rule_name(syn.rule)},
        {"keywords_per_class", syn.keywords_per_class},
        {"overlap_k", syn.overlap_k}}},
      {"teacher", {{"model", model_section(4, 128, 4, 256, 0.1)}, {"train", train_section(teacher_train)}}},
      {"generator", {{"model", model_section(2, 64, 4, 128, 0.1)}, {"train", train_section(generator_train)}}},
      {"student", {{"model", model_section(2, 64, 4, 128, 0.1)}}},
      {"trainer", train_section(trainer)},
      {"experiment",
       {{"seeds", {0, 1, 2, 3, 4, 5, 6}}, {"rho_values", {0.1, 0.2, 0.3, 0.4, 0.5}}, {"dump_samples", 200}}},
      {"paths", {{"teacher", ""}, {"generator", ""}, {"student", ""}}},
  };
}

json merge_config(json base, const json& file) {
  merge_into(base, file, "");
  return base;
}

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> seen;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + o);
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    if (auto [it, inserted] = seen.emplace(key, text); !inserted && it->second != text)
      throw ConfigError("conflicting overrides for " + key);
    const auto ptr = pointer_for(key);
    if (!config.contains(ptr)) throw ConfigError("unknown config key: " + key);
    json& target = config[ptr];
    if (target.is_object()) throw ConfigError("cannot override a whole section: " + key);
    json value;
    if (target.is_string()) {
      value = text;
    } else {
      value = json::parse(text, nullptr, false);
      if (value.is_discarded()) throw ConfigError("cannot parse override value: " + o);
    }
    if (!compatible(target, value)) throw ConfigError("wrong type for config key: " + key);
    target = value;
  }
  return config;
}

int run(int argc, char** argv) {
  CLI::App app{"MATE-KD desk-scale pipeline", "matekd-cli"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "run seed (overrides the config's seed)");
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--override", overrides, "dotted.key=value config override")->take_all();

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"make-data", "generate the synthetic task"},
      {"pretrain-teacher", "train the teacher classifier"},
      {"pretrain-generator", "masked-token pretraining of the generator"},
      {"train-kd", "distill a student with plain KD"},
      {"train-mate-kd", "distill a student with the adversarial generator"},
      {"ablate", "full method vs frozen generator vs plain KD over seeds"},
      {"sweep-rho", "masking probability sweep over seeds"},
      {"evaluate", "score a student checkpoint on the dev split"},
      {"dump-samples", "write generated pseudo samples with teacher labels"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto extra = app.remaining();
    if (!extra.empty() && !extra.front().starts_with("-")) std::cerr << "error: unknown subcommand: " << extra.front() << '\n';
    else std::cerr << "error: " << e.what() << '\n';
    std::cerr << '\n' << app.help();
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  Settings settings;
  try {
    json config = default_config();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      json file = json::parse(in, nullptr, false);
      if (file.is_discarded()) throw ConfigError("config is not valid JSON: " + config_path);
      config = merge_config(std::move(config), file);
    }
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    settings = decode(apply_overrides(std::move(config), overrides));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  const fs::path out(out_dir);
  json manifest{{"command", command},
                {"argv", std::vector<std::string>(argv, argv + argc)},
                {"config_path", config_path},
                {"config", settings.raw},
                {"seed", settings.seed},
                {"source_revision", MATEKD_SOURCE_REVISION},
                {"out_dir", out_dir},
                {"started_at", utc_now()},
                {"finished_at", nullptr},
                {"status", "running"}};
  int code = 0;
  try {
    fs::create_directories(out);
    write_line(out / "manifest.json", manifest);
    if (command == "make-data") make_data(settings, out);
    else if (command == "pretrain-teacher") pretrain_teacher_cmd(settings, out);
    else if (command == "pretrain-generator") pretrain_generator_cmd(settings, out);
    else if (command == "train-kd") train_student_cmd(settings, out, false);
    else if (command == "train-mate-kd") train_student_cmd(settings, out, true);
    else if (command == "ablate") ablate_cmd(settings, out);
    else if (command == "sweep-rho") sweep_cmd(settings, out);
    else if (command == "evaluate") evaluate_cmd(settings, out);
    else if (command == "dump-samples") dump_cmd(settings, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    code = 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    code = 1;
  }
  if (fs::exists(out / "manifest.json")) {
    manifest["finished_at"] = utc_now();
    manifest["status"] = code == 0 ? "ok" : "failed";
    try {
      write_line(out / "manifest.json", manifest);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      code = code == 0 ? 1 : code;
    }
  }
  return code;
}

}  // namespace matekd::cli
