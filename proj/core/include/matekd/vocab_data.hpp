#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace matekd {

// Token/id map. Ids 0-4 are always pad, mask, cls, sep, unk in that order.
class Vocabulary {
 public:
  static constexpr std::array<std::string_view, 5> kSpecialTokens = {"[PAD]", "[MASK]", "[CLS]",
                                                                     "[SEP]", "[UNK]"};
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;

  // `tokens` must start with the five special tokens; duplicates are rejected.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  // One token per line; line number is the id.
  std::string serialize() const;
  std::uint64_t hash() const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int content_size() const { return size() - kNumSpecials; }
  // Unknown strings map to kUnk.
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> token_to_id_;
};

std::vector<std::string> split_whitespace(std::string_view text);

// Specials first, then whitespace tokens by descending frequency with
// lexicographic tie-break, up to `max_size` entries in total.
Vocabulary build_vocab(std::span<const std::string> corpus, int max_size);

struct Example {
  std::string text_a;
  std::optional<std::string> text_b;
  int label = 0;
};

// [cls, a..., sep, (b..., sep), pad...] padded to max_len.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<unsigned char> maskable;
  std::vector<int> sep_positions;

  int length() const { return static_cast<int>(ids.size()); }
  // Number of non-pad positions.
  int used_length() const;
};

TokenSequence encode(const Example& example, const Vocabulary& vocab, int max_len);

// Drops special tokens and joins the rest with single spaces.
std::string decode(std::span<const int> ids, const Vocabulary& vocab);

struct Dataset {
  std::string split;
  std::vector<Example> examples;
  int num_classes = 0;
  std::string metric = "accuracy";
  // Class id -> original label string.
  std::vector<std::string> label_names;
};

struct ColumnSchema {
  std::string text_a = "sentence";
  std::optional<std::string> text_b;
  std::string label = "label";
};

// Reads a UTF-8 TSV file with a header row. Labels map to class ids in
// first-appearance order, continuing from `known_labels` so that a dev split
// can share the train split's mapping.
Dataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema,
                     std::string split = "train",
                     std::span<const std::string> known_labels = {});

// Writes the columns of `schema` (text_b only when the schema names it).
void save_dataset(const Dataset& dataset, const std::filesystem::path& path,
                  const ColumnSchema& schema);

enum class SyntheticRule { kKeywordMajority, kPairOverlap };

struct SyntheticSpec {
  int n_train = 512;
  int n_dev = 256;
  int vocab_content_size = 48;
  // Tokens per text (text_a and, for pair-overlap, text_b).
  int seq_len = 10;
  SyntheticRule rule = SyntheticRule::kKeywordMajority;
  // Keywords per class for keyword-majority.
  int keywords_per_class = 4;
  // Minimum shared tokens for a positive pair-overlap label.
  int overlap_k = 1;
};

struct SyntheticTask {
  Dataset train;
  Dataset dev;
  std::vector<std::string> content_tokens;
  // Keyword-majority: label 0 wins on keywords[0], label 1 on keywords[1].
  std::array<std::vector<std::string>, 2> keywords;
  SyntheticSpec spec;
};

SyntheticTask make_synthetic_task(const SyntheticSpec& spec, std::uint64_t seed);

// Labeling rules exactly as applied by the generator.
int keyword_majority_rule(std::string_view text,
                          const std::array<std::vector<std::string>, 2>& keywords);
int pair_overlap_rule(std::string_view text_a, std::string_view text_b, int k);

SyntheticRule parse_synthetic_rule(std::string_view name);
std::string_view synthetic_rule_name(SyntheticRule rule);

}  // namespace matekd
