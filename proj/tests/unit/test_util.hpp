#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "matekd/models.hpp"
#include "matekd/trainer.hpp"
#include "matekd/vocab_data.hpp"

namespace matekd::testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("matekd_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Vocabulary small_vocab(int content = 8) {
  std::vector<std::string> tokens(Vocabulary::kSpecialTokens.begin(), Vocabulary::kSpecialTokens.end());
  for (int i = 0; i < content; ++i) tokens.push_back("t" + std::to_string(i));
  return Vocabulary::from_tokens(tokens);
}

inline EncoderConfig tiny_config(int vocab_size, int num_classes = 2) {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_dim = 32;
  c.num_heads = 4;
  c.ffn_dim = 64;
  c.vocab_size = vocab_size;
  c.max_len = 8;
  c.num_classes = num_classes;
  c.dropout = 0.0;
  return c;
}

struct TinyTask {
  SyntheticTask task;
  Vocabulary vocab;
  EncodedDataset train;
  EncodedDataset dev;
};

inline TinyTask tiny_task(int n_train = 64, int n_dev = 32, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.n_train = n_train;
  spec.n_dev = n_dev;
  spec.vocab_content_size = 16;
  spec.seq_len = 6;
  spec.keywords_per_class = 2;
  TinyTask t{make_synthetic_task(spec, seed), {}, {}, {}};
  std::vector<std::string> corpus;
  for (const auto& e : t.task.train.examples) corpus.push_back(e.text_a);
  t.vocab = build_vocab(corpus, 1000);
  t.train = encode_dataset(t.task.train, t.vocab, spec.seq_len + 2);
  t.dev = encode_dataset(t.task.dev, t.vocab, spec.seq_len + 2);
  return t;
}

// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central difference of f w.r.t. one entry of a matrix.
inline double central_difference(ag::Matrix& m, Eigen::Index r, Eigen::Index c, double h,
                                 const std::function<double()>& f) {
  const double saved = m(r, c);
  m(r, c) = saved + h;
  const double up = f();
  m(r, c) = saved - h;
  const double down = f();
  m(r, c) = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace matekd::testutil
