#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "matekd/autograd.hpp"
#include "matekd/rng.hpp"
#include "matekd/vocab_data.hpp"

namespace matekd {

struct EncoderConfig {
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 0;
  int max_len = 12;
  int num_classes = 2;
  double dropout = 0.1;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// A padded batch of equal-length sequences, flattened row-major
// (row b * seq_len + t is position t of sequence b).
struct Batch {
  int size = 0;
  int seq_len = 0;
  std::vector<int> ids;
  std::vector<unsigned char> key_valid;  // 0 at pad positions
  std::vector<unsigned char> maskable;
  std::vector<int> labels;  // empty when unlabeled

  static Batch from_sequences(std::span<const TokenSequence> seqs, std::span<const int> labels = {});
  int rows() const { return size * seq_len; }
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

// Owns a flat list of named trainable parameters.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = default;
  Module& operator=(Module&&) = default;
  virtual ~Module() = default;

  const std::vector<std::pair<std::string, ag::Var>>& named_parameters() const { return params_; }
  std::vector<ag::Var> parameters() const;
  void set_requires_grad(bool on);
  void zero_grad();
  std::uint64_t parameter_hash() const;
  std::vector<ag::Matrix> snapshot() const;
  void restore(const std::vector<ag::Matrix>& values);
  std::size_t parameter_count() const;

 protected:
  ag::Var add_parameter(std::string name, ag::Matrix init);

 private:
  std::vector<std::pair<std::string, ag::Var>> params_;
};

// Post-LN transformer encoder shared by the classifier and the masked LM.
class EncoderModel : public Module {
 public:
  const EncoderConfig& config() const { return config_; }
  virtual std::string kind() const = 0;

 protected:
  EncoderModel(const EncoderConfig& config, std::uint64_t seed);

  // Token embeddings for hard ids (row gather).
  ag::Var embed_hard(std::span<const int> ids) const;
  // Token embeddings for distributions over the vocabulary (row-vector x table).
  ag::Var embed_relaxed(const ag::Var& rows) const;
  // Adds positions, runs every layer; returns (batch * seq_len) x hidden.
  ag::Var encode(const ag::Var& token_embeddings, int batch, int seq_len,
                 std::span<const unsigned char> key_valid, const ForwardOptions& opts) const;
  void check_shape(int batch, int seq_len, std::size_t key_valid_size) const;

 private:
  struct Layer {
    ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
    ag::Var ln1_g, ln1_b;
    ag::Var w1, b1, w2, b2;
    ag::Var ln2_g, ln2_b;
  };

  EncoderConfig config_;
  ag::Var token_embedding_;
  ag::Var position_embedding_;
  ag::Var emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
};

// Sequence classifier: cls-position vector through one affine layer.
class Classifier : public EncoderModel {
 public:
  Classifier(const EncoderConfig& config, std::uint64_t seed);
  std::string kind() const override { return "classifier"; }

  // (batch x C) logits from hard token ids.
  ag::Var logits(const Batch& batch, const ForwardOptions& opts = {}) const;
  // (batch x C) logits from (batch * seq_len) x K rows; differentiable w.r.t. rows.
  ag::Var logits_relaxed(const ag::Var& rows, int batch, int seq_len,
                         std::span<const unsigned char> key_valid,
                         const ForwardOptions& opts = {}) const;

  Classifier clone() const;

 private:
  ag::Var head(const ag::Var& hidden, int batch, int seq_len) const;

  ag::Var w_cls_, b_cls_;
};

// Masked LM generator: per-position vocabulary logits.
class MaskedLM : public EncoderModel {
 public:
  MaskedLM(const EncoderConfig& config, std::uint64_t seed);
  std::string kind() const override { return "masked_lm"; }

  // (batch * seq_len) x K logits.
  ag::Var logits(const Batch& batch, const ForwardOptions& opts = {}) const;

  MaskedLM clone() const;

 private:
  ag::Var w_lm_, b_lm_;
};

// Logits-only view of a trained classifier. Every call runs in eval mode
// with graph construction disabled, so outputs are plain constants.
class Teacher {
 public:
  explicit Teacher(Classifier model);

  ag::Matrix logits(const Batch& batch) const;
  ag::Matrix logits(std::span<const int> ids, int batch, int seq_len,
                    std::span<const unsigned char> key_valid) const;
  // Single-sequence convenience; returns a length-C vector.
  std::vector<double> logits(const TokenSequence& seq) const;

  const EncoderConfig& config() const { return model_.config(); }
  std::uint64_t parameter_hash() const { return model_.parameter_hash(); }

 private:
  Classifier model_;
};

struct ModelBundle {
  Teacher teacher;
  Classifier student;
  MaskedLM generator;
};

// ---- checkpoints ----

struct CheckpointMeta {
  std::string kind;
  EncoderConfig config;
  std::uint64_t vocab_hash = 0;
  long step = 0;
  double dev_metric = 0.0;
};

std::filesystem::path sidecar_path(const std::filesystem::path& blob);

// Writes the parameter blob at `path` and a JSON sidecar next to it.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path,
                     std::uint64_t vocab_hash, long step = 0, double dev_metric = 0.0);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
// Both loaders reject a sidecar whose vocabulary hash differs from `vocab_hash`.
Classifier load_classifier(const std::filesystem::path& path, std::uint64_t vocab_hash);
MaskedLM load_masked_lm(const std::filesystem::path& path, std::uint64_t vocab_hash);

}  // namespace matekd
