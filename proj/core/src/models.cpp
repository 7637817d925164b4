#include "matekd/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "matekd/error.hpp"
#include "matekd/hashing.hpp"

namespace matekd {

using ag::Matrix;
using ag::Var;

void EncoderConfig::validate() const {
  if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 || max_len < 1 ||
      num_classes < 1)
    throw ConfigError("encoder dimensions must all be >= 1");
  if (hidden_dim % num_heads != 0) throw ConfigError("hidden_dim must be divisible by num_heads");
  if (vocab_size < Vocabulary::kNumSpecials + 2)
    throw ConfigError("vocab_size must be >= 7 (5 specials + 2 content tokens)");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
                     {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
                     {"num_classes", c.num_classes}, {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.dropout = j.value("dropout", c.dropout);
}

Batch Batch::from_sequences(std::span<const TokenSequence> seqs, std::span<const int> labels) {
  if (seqs.empty()) throw Error("empty batch");
  if (!labels.empty() && labels.size() != seqs.size()) throw Error("batch label count mismatch");
  Batch b;
  b.size = static_cast<int>(seqs.size());
  b.seq_len = seqs.front().length();
  for (const auto& s : seqs) {
    if (s.length() != b.seq_len) throw Error("batch sequences must share one padded length");
    b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
    b.maskable.insert(b.maskable.end(), s.maskable.begin(), s.maskable.end());
    for (int id : s.ids) b.key_valid.push_back(id == Vocabulary::kPad ? 0 : 1);
  }
  b.labels.assign(labels.begin(), labels.end());
  return b;
}

// ---- Module ----

std::vector<Var> Module::parameters() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [_, v] : params_) out.push_back(v);
  return out;
}

void Module::set_requires_grad(bool on) {
  for (auto& [_, v] : params_) v.set_requires_grad(on);
}

void Module::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

std::uint64_t Module::parameter_hash() const {
  Fnv1a h;
  for (const auto& [name, v] : params_) {
    h.update(name);
    const Matrix& m = v.value();
    h.update(std::as_bytes(std::span(m.data(), static_cast<std::size_t>(m.size()))));
  }
  return h.digest();
}

std::vector<Matrix> Module::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const auto& [_, v] : params_) out.push_back(v.value());
  return out;
}

void Module::restore(const std::vector<Matrix>& values) {
  if (values.size() != params_.size()) throw Error("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    Var& v = params_[i].second;
    if (values[i].rows() != v.rows() || values[i].cols() != v.cols())
      throw Error("restore: shape mismatch for " + params_[i].first);
    v.mutable_value() = values[i];
  }
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

Var Module::add_parameter(std::string name, Matrix init) {
  Var v(std::move(init), true);
  params_.emplace_back(std::move(name), v);
  return v;
}

// ---- EncoderModel ----

namespace {

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix xavier(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return normal_matrix(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

Var linear(const Var& x, const Var& w, const Var& b) { return ag::add_row_bias(ag::matmul(x, w), b); }

Var maybe_dropout(const Var& x, double rate, const ForwardOptions& opts) {
  if (!opts.training || rate <= 0.0) return x;
  if (opts.rng == nullptr) throw Error("training-mode forward with dropout needs an rng");
  return ag::dropout(x, rate, *opts.rng);
}

}  // namespace

EncoderModel::EncoderModel(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, "init"));
  const int d = config_.hidden_dim;
  token_embedding_ = add_parameter("embeddings.token", normal_matrix(config_.vocab_size, d, 0.02, rng));
  position_embedding_ = add_parameter("embeddings.position", normal_matrix(config_.max_len, d, 0.02, rng));
  emb_ln_g_ = add_parameter("embeddings.ln.gamma", Matrix::Ones(1, d));
  emb_ln_b_ = add_parameter("embeddings.ln.beta", Matrix::Zero(1, d));
  for (int l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer layer;
    layer.wq = add_parameter(p + "attn.wq", xavier(d, d, rng));
    layer.bq = add_parameter(p + "attn.bq", Matrix::Zero(1, d));
    layer.wk = add_parameter(p + "attn.wk", xavier(d, d, rng));
    layer.bk = add_parameter(p + "attn.bk", Matrix::Zero(1, d));
    layer.wv = add_parameter(p + "attn.wv", xavier(d, d, rng));
    layer.bv = add_parameter(p + "attn.bv", Matrix::Zero(1, d));
    layer.wo = add_parameter(p + "attn.wo", xavier(d, d, rng));
    layer.bo = add_parameter(p + "attn.bo", Matrix::Zero(1, d));
    layer.ln1_g = add_parameter(p + "ln1.gamma", Matrix::Ones(1, d));
    layer.ln1_b = add_parameter(p + "ln1.beta", Matrix::Zero(1, d));
    layer.w1 = add_parameter(p + "ffn.w1", xavier(d, config_.ffn_dim, rng));
    layer.b1 = add_parameter(p + "ffn.b1", Matrix::Zero(1, config_.ffn_dim));
    layer.w2 = add_parameter(p + "ffn.w2", xavier(config_.ffn_dim, d, rng));
    layer.b2 = add_parameter(p + "ffn.b2", Matrix::Zero(1, d));
    layer.ln2_g = add_parameter(p + "ln2.gamma", Matrix::Ones(1, d));
    layer.ln2_b = add_parameter(p + "ln2.beta", Matrix::Zero(1, d));
    layers_.push_back(std::move(layer));
  }
}

void EncoderModel::check_shape(int batch, int seq_len, std::size_t key_valid_size) const {
  if (batch < 1 || seq_len < 1) throw Error("empty input");
  if (seq_len > config_.max_len)
    throw Error("sequence length " + std::to_string(seq_len) + " exceeds max_len " +
                std::to_string(config_.max_len));
  if (key_valid_size != static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq_len))
    throw Error("key mask size does not match batch layout");
}

Var EncoderModel::embed_hard(std::span<const int> ids) const {
  return ag::gather_rows(token_embedding_, ids);
}

Var EncoderModel::embed_relaxed(const Var& rows) const {
  if (rows.cols() != config_.vocab_size)
    throw Error("relaxed row length " + std::to_string(rows.cols()) + " != vocabulary size " +
                std::to_string(config_.vocab_size));
  return ag::matmul(rows, token_embedding_);
}

Var EncoderModel::encode(const Var& token_embeddings, int batch, int seq_len,
                         std::span<const unsigned char> key_valid, const ForwardOptions& opts) const {
  std::vector<int> positions(static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq_len));
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % static_cast<std::size_t>(seq_len));
  Var x = ag::add(token_embeddings, ag::gather_rows(position_embedding_, positions));
  x = ag::layer_norm(x, emb_ln_g_, emb_ln_b_);
  x = maybe_dropout(x, config_.dropout, opts);
  for (const Layer& layer : layers_) {
    Var q = linear(x, layer.wq, layer.bq);
    Var k = linear(x, layer.wk, layer.bk);
    Var v = linear(x, layer.wv, layer.bv);
    Var attn = ag::self_attention(q, k, v, batch, seq_len, config_.num_heads, key_valid);
    attn = maybe_dropout(linear(attn, layer.wo, layer.bo), config_.dropout, opts);
    x = ag::layer_norm(ag::add(x, attn), layer.ln1_g, layer.ln1_b);
    Var h = ag::gelu(linear(x, layer.w1, layer.b1));
    h = maybe_dropout(linear(h, layer.w2, layer.b2), config_.dropout, opts);
    x = ag::layer_norm(ag::add(x, h), layer.ln2_g, layer.ln2_b);
  }
  return x;
}

// ---- Classifier ----

Classifier::Classifier(const EncoderConfig& config, std::uint64_t seed) : EncoderModel(config, seed) {
  Rng rng(derive_seed(seed, "classifier-head"));
  w_cls_ = add_parameter("head.w", xavier(this->config().hidden_dim, this->config().num_classes, rng));
  b_cls_ = add_parameter("head.b", Matrix::Zero(1, this->config().num_classes));
}

Var Classifier::head(const Var& hidden, int batch, int seq_len) const {
  std::vector<int> cls_rows(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) cls_rows[static_cast<std::size_t>(b)] = b * seq_len;
  return linear(ag::select_rows(hidden, cls_rows), w_cls_, b_cls_);
}

Var Classifier::logits(const Batch& batch, const ForwardOptions& opts) const {
  check_shape(batch.size, batch.seq_len, batch.key_valid.size());
  for (int id : batch.ids)
    if (id < 0 || id >= config().vocab_size) throw Error("token id outside the model vocabulary");
  Var hidden = encode(embed_hard(batch.ids), batch.size, batch.seq_len, batch.key_valid, opts);
  return head(hidden, batch.size, batch.seq_len);
}

Var Classifier::logits_relaxed(const Var& rows, int batch, int seq_len,
                               std::span<const unsigned char> key_valid,
                               const ForwardOptions& opts) const {
  check_shape(batch, seq_len, key_valid.size());
  if (rows.rows() != static_cast<Eigen::Index>(batch) * seq_len)
    throw Error("relaxed input row count does not match batch layout");
  Var hidden = encode(embed_relaxed(rows), batch, seq_len, key_valid, opts);
  return head(hidden, batch, seq_len);
}

Classifier Classifier::clone() const {
  Classifier out(config(), 0);
  out.restore(snapshot());
  return out;
}

// ---- MaskedLM ----

MaskedLM::MaskedLM(const EncoderConfig& config, std::uint64_t seed) : EncoderModel(config, seed) {
  Rng rng(derive_seed(seed, "lm-head"));
  w_lm_ = add_parameter("lm_head.w", xavier(this->config().hidden_dim, this->config().vocab_size, rng));
  b_lm_ = add_parameter("lm_head.b", Matrix::Zero(1, this->config().vocab_size));
}

Var MaskedLM::logits(const Batch& batch, const ForwardOptions& opts) const {
  check_shape(batch.size, batch.seq_len, batch.key_valid.size());
  for (int id : batch.ids)
    if (id < 0 || id >= config().vocab_size) throw Error("token id outside the model vocabulary");
  Var hidden = encode(embed_hard(batch.ids), batch.size, batch.seq_len, batch.key_valid, opts);
  return linear(hidden, w_lm_, b_lm_);
}

MaskedLM MaskedLM::clone() const {
  MaskedLM out(config(), 0);
  out.restore(snapshot());
  return out;
}

// ---- Teacher ----

Teacher::Teacher(Classifier model) : model_(std::move(model)) { model_.set_requires_grad(false); }

Matrix Teacher::logits(const Batch& batch) const {
  ag::NoGradGuard guard;
  return model_.logits(batch).value();
}

Matrix Teacher::logits(std::span<const int> ids, int batch, int seq_len,
                       std::span<const unsigned char> key_valid) const {
  Batch b;
  b.size = batch;
  b.seq_len = seq_len;
  b.ids.assign(ids.begin(), ids.end());
  b.key_valid.assign(key_valid.begin(), key_valid.end());
  return logits(b);
}

std::vector<double> Teacher::logits(const TokenSequence& seq) const {
  Matrix m = logits(Batch::from_sequences(std::span(&seq, 1)));
  return {m.data(), m.data() + m.size()};
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'M', 'A', 'T', 'E', 'K', 'D', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("truncated checkpoint");
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << v;
  return s.str();
}

void load_values(Module& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw Error("not a checkpoint blob: " + path.string());
  const auto count = read_pod<std::uint32_t>(in);
  const auto& params = model.named_parameters();
  if (count != params.size()) throw Error("checkpoint parameter count mismatch");
  std::vector<Matrix> values;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != params[i].first) throw Error("checkpoint parameter name mismatch: " + name);
    const auto rows = read_pod<std::uint32_t>(in);
    const auto cols = read_pod<std::uint32_t>(in);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw Error("truncated checkpoint");
    values.push_back(std::move(m));
  }
  model.restore(values);
}

CheckpointMeta checked_meta(const std::filesystem::path& path, std::uint64_t vocab_hash,
                            const std::string& kind) {
  CheckpointMeta meta = read_checkpoint_meta(path);
  if (meta.kind != kind) throw Error("checkpoint kind is " + meta.kind + ", expected " + kind);
  if (meta.vocab_hash != vocab_hash)
    throw Error("vocabulary hash mismatch: checkpoint " + hex64(meta.vocab_hash) + ", expected " +
                hex64(vocab_hash));
  return meta;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& blob) {
  return std::filesystem::path(blob.string() + ".json");
}

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path,
                     std::uint64_t vocab_hash, long step, double dev_metric) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint: " + path.string());
    out.write(kMagic, 8);
    const auto& params = model.named_parameters();
    write_pod(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, v] : params) {
      write_pod(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod(out, static_cast<std::uint32_t>(v.rows()));
      write_pod(out, static_cast<std::uint32_t>(v.cols()));
      out.write(reinterpret_cast<const char*>(v.value().data()),
                static_cast<std::streamsize>(sizeof(double) * v.value().size()));
    }
  }
  nlohmann::json side{{"kind", model.kind()},
                      {"config", model.config()},
                      {"vocab_hash", hex64(vocab_hash)},
                      {"step", step},
                      {"dev_metric", dev_metric},
                      {"parameter_hash", hex64(model.parameter_hash())}};
  std::ofstream out(sidecar_path(path));
  if (!out) throw Error("cannot write checkpoint sidecar: " + sidecar_path(path).string());
  out << side.dump(2) << '\n';
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw Error("cannot open checkpoint sidecar: " + sidecar_path(path).string());
  nlohmann::json side;
  try {
    in >> side;
    CheckpointMeta meta;
    meta.kind = side.at("kind").get<std::string>();
    meta.config = side.at("config").get<EncoderConfig>();
    meta.vocab_hash = std::stoull(side.at("vocab_hash").get<std::string>(), nullptr, 16);
    meta.step = side.value("step", 0L);
    meta.dev_metric = side.value("dev_metric", 0.0);
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
}

Classifier load_classifier(const std::filesystem::path& path, std::uint64_t vocab_hash) {
  CheckpointMeta meta = checked_meta(path, vocab_hash, "classifier");
  Classifier model(meta.config, 0);
  load_values(model, path);
  return model;
}

MaskedLM load_masked_lm(const std::filesystem::path& path, std::uint64_t vocab_hash) {
  CheckpointMeta meta = checked_meta(path, vocab_hash, "masked_lm");
  MaskedLM model(meta.config, 0);
  load_values(model, path);
  return model;
}

}  // namespace matekd
