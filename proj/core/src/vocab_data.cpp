#include "matekd/vocab_data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "matekd/error.hpp"
#include "matekd/hashing.hpp"
#include "matekd/rng.hpp"

namespace matekd {

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) {
      extra = 0;
    } else if ((c >> 5) == 0x6 && c >= 0xc2) {
      extra = 1;
    } else if ((c >> 4) == 0xe) {
      extra = 2;
    } else if ((c >> 3) == 0x1e && c <= 0xf4) {
      extra = 3;
    } else {
      return false;
    }
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

std::string join(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecialTokens.size() + 1)
    throw Error("vocabulary needs the 5 special tokens plus at least 1 content token");
  for (std::size_t i = 0; i < kSpecialTokens.size(); ++i)
    if (tokens[i] != kSpecialTokens[i])
      throw Error("vocabulary line " + std::to_string(i) + " must be " +
                  std::string(kSpecialTokens[i]));
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (v.tokens_[i].empty()) throw Error("vocabulary contains an empty token");
    if (!v.token_to_id_.emplace(v.tokens_[i], static_cast<int>(i)).second)
      throw Error("duplicate vocabulary token: " + v.tokens_[i]);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary: " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary: " + path.string());
  out << serialize();
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

std::uint64_t Vocabulary::hash() const {
  Fnv1a h;
  h.update(serialize());
  return h.digest();
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw Error("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, int max_size) {
  if (corpus.empty()) throw Error("empty corpus");
  if (max_size < 6) throw Error("max_size must leave room for at least one content token");
  std::map<std::string, long> counts;
  for (const auto& text : corpus)
    for (auto& w : split_whitespace(text)) ++counts[w];
  for (auto s : Vocabulary::kSpecialTokens) counts.erase(std::string(s));

  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(Vocabulary::kSpecialTokens.begin(), Vocabulary::kSpecialTokens.end());
  for (auto& [tok, _] : ranked) {
    if (static_cast<int>(tokens.size()) >= max_size) break;
    tokens.push_back(tok);
  }
  if (tokens.size() == Vocabulary::kSpecialTokens.size()) throw Error("empty corpus");
  return Vocabulary::from_tokens(std::move(tokens));
}

int TokenSequence::used_length() const {
  return static_cast<int>(std::count_if(ids.begin(), ids.end(), [](int id) { return id != Vocabulary::kPad; }));
}

TokenSequence encode(const Example& example, const Vocabulary& vocab, int max_len) {
  if (max_len < 4) throw Error("max_len must be >= 4");
  auto a = split_whitespace(example.text_a);
  std::vector<std::string> b;
  const bool pair = example.text_b.has_value();
  if (pair) b = split_whitespace(*example.text_b);

  int room = max_len - (pair ? 3 : 2);
  std::size_t take_a = std::min<std::size_t>(a.size(), static_cast<std::size_t>(room));
  room -= static_cast<int>(take_a);
  std::size_t take_b = pair ? std::min<std::size_t>(b.size(), static_cast<std::size_t>(room)) : 0;

  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(max_len));
  auto push = [&](int id, bool maskable) {
    seq.ids.push_back(id);
    seq.maskable.push_back(maskable ? 1 : 0);
  };
  push(Vocabulary::kCls, false);
  for (std::size_t i = 0; i < take_a; ++i) push(vocab.id(a[i]), true);
  seq.sep_positions.push_back(seq.length());
  push(Vocabulary::kSep, false);
  if (pair) {
    for (std::size_t i = 0; i < take_b; ++i) push(vocab.id(b[i]), true);
    seq.sep_positions.push_back(seq.length());
    push(Vocabulary::kSep, false);
  }
  while (seq.length() < max_len) push(Vocabulary::kPad, false);
  return seq;
}

std::string decode(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size())
      throw Error("token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(vocab.size()));
    if (Vocabulary::is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& path, const ColumnSchema& schema,
                     std::string split, std::span<const std::string> known_labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();
  if (content.empty()) throw Error("empty dataset file: " + path.string());
  if (!valid_utf8(content)) throw Error("dataset is not valid UTF-8: " + path.string());

  std::istringstream lines(content);
  std::string line;
  std::getline(lines, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("missing column: " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t col_a = column(schema.text_a);
  const std::size_t col_label = column(schema.label);
  std::optional<std::size_t> col_b;
  if (schema.text_b) col_b = column(*schema.text_b);

  Dataset ds;
  ds.split = std::move(split);
  ds.label_names.assign(known_labels.begin(), known_labels.end());
  std::unordered_map<std::string, int> label_ids;
  for (std::size_t i = 0; i < ds.label_names.size(); ++i)
    label_ids.emplace(ds.label_names[i], static_cast<int>(i));

  int line_no = 1;
  while (std::getline(lines, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != header.size())
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                  std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
    Example ex;
    ex.text_a = fields[col_a];
    if (ex.text_a.empty() || split_whitespace(ex.text_a).empty())
      throw Error(path.string() + ":" + std::to_string(line_no) + ": empty text");
    if (col_b) ex.text_b = fields[*col_b];
    const std::string& raw = fields[col_label];
    auto [it, inserted] = label_ids.emplace(raw, static_cast<int>(ds.label_names.size()));
    if (inserted) ds.label_names.push_back(raw);
    ex.label = it->second;
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw Error("dataset has no rows: " + path.string());
  ds.num_classes = static_cast<int>(ds.label_names.size());
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path,
                  const ColumnSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset: " + path.string());
  out << schema.text_a;
  if (schema.text_b) out << '\t' << *schema.text_b;
  out << '\t' << schema.label << '\n';
  for (const auto& ex : dataset.examples) {
    out << ex.text_a;
    if (schema.text_b) out << '\t' << ex.text_b.value_or("");
    const auto& name = ex.label < static_cast<int>(dataset.label_names.size())
                           ? dataset.label_names[static_cast<std::size_t>(ex.label)]
                           : std::to_string(ex.label);
    out << '\t' << name << '\n';
  }
}

int keyword_majority_rule(std::string_view text,
                          const std::array<std::vector<std::string>, 2>& keywords) {
  std::array<int, 2> hits{0, 0};
  for (const auto& w : split_whitespace(text))
    for (int c = 0; c < 2; ++c)
      if (std::find(keywords[c].begin(), keywords[c].end(), w) != keywords[c].end()) ++hits[c];
  return hits[1] > hits[0] ? 1 : 0;
}

int pair_overlap_rule(std::string_view text_a, std::string_view text_b, int k) {
  auto a = split_whitespace(text_a);
  auto b = split_whitespace(text_b);
  std::set<std::string> sa(a.begin(), a.end());
  std::set<std::string> sb(b.begin(), b.end());
  int shared = 0;
  for (const auto& w : sa) shared += sb.contains(w) ? 1 : 0;
  return shared >= k ? 1 : 0;
}

SyntheticRule parse_synthetic_rule(std::string_view name) {
  if (name == "keyword-majority") return SyntheticRule::kKeywordMajority;
  if (name == "pair-overlap") return SyntheticRule::kPairOverlap;
  throw Error("unknown synthetic rule: " + std::string(name));
}

std::string_view synthetic_rule_name(SyntheticRule rule) {
  return rule == SyntheticRule::kKeywordMajority ? "keyword-majority" : "pair-overlap";
}

namespace {

// Filler text follows a sparse Markov chain so a masked LM has context to learn from.
class FillerChain {
 public:
  FillerChain(std::vector<std::string> fillers, Rng& rng) : fillers_(std::move(fillers)) {
    successor_.resize(fillers_.size());
    for (std::size_t i = 0; i < fillers_.size(); ++i) successor_[i] = i;
    std::shuffle(successor_.begin(), successor_.end(), rng);
  }

  std::vector<std::string> sample(int n, Rng& rng) const {
    std::vector<std::string> out;
    std::size_t cur = uniform_index(rng, fillers_.size());
    for (int i = 0; i < n; ++i) {
      out.push_back(fillers_[cur]);
      cur = uniform01(rng) < 0.6 ? successor_[cur] : uniform_index(rng, fillers_.size());
    }
    return out;
  }

  const std::vector<std::string>& fillers() const { return fillers_; }

 private:
  std::vector<std::string> fillers_;
  std::vector<std::size_t> successor_;
};

Example keyword_example(int label, const SyntheticSpec& spec, const FillerChain& chain,
                        const std::array<std::vector<std::string>, 2>& keywords, Rng& rng) {
  auto words = chain.sample(spec.seq_len, rng);
  const int max_win = std::min(3, spec.seq_len);
  int win = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_win)));
  int lose_cap = std::min(win - 1, spec.seq_len - win);
  int lose = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(lose_cap + 1)));
  std::vector<int> positions(static_cast<std::size_t>(spec.seq_len));
  for (int i = 0; i < spec.seq_len; ++i) positions[static_cast<std::size_t>(i)] = i;
  std::shuffle(positions.begin(), positions.end(), rng);
  std::size_t next = 0;
  auto place = [&](int cls, int count) {
    const auto& kw = keywords[static_cast<std::size_t>(cls)];
    for (int i = 0; i < count; ++i)
      words[static_cast<std::size_t>(positions[next++])] = kw[uniform_index(rng, kw.size())];
  };
  place(label, win);
  place(1 - label, lose);
  return Example{join(words), std::nullopt, label};
}

Example overlap_example(int label, const SyntheticSpec& spec, const std::vector<std::string>& content,
                        Rng& rng) {
  std::vector<std::string> a;
  std::set<std::string> in_a;
  for (int i = 0; i < spec.seq_len; ++i) {
    a.push_back(content[uniform_index(rng, content.size())]);
    in_a.insert(a.back());
  }
  std::vector<std::string> outside;
  for (const auto& w : content)
    if (!in_a.contains(w)) outside.push_back(w);
  std::vector<std::string> b;
  for (int i = 0; i < spec.seq_len; ++i) b.push_back(outside[uniform_index(rng, outside.size())]);
  if (label == 1) {
    std::vector<std::string> shared(in_a.begin(), in_a.end());
    std::shuffle(shared.begin(), shared.end(), rng);
    std::vector<int> slots(static_cast<std::size_t>(spec.seq_len));
    for (int i = 0; i < spec.seq_len; ++i) slots[static_cast<std::size_t>(i)] = i;
    std::shuffle(slots.begin(), slots.end(), rng);
    for (int i = 0; i < spec.overlap_k; ++i)
      b[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])] = shared[static_cast<std::size_t>(i)];
  }
  return Example{join(a), join(b), label};
}

}  // namespace

SyntheticTask make_synthetic_task(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.seq_len < 2) throw Error("infeasible synthetic spec: seq_len must be >= 2");
  if (spec.n_train < 1 || spec.n_dev < 1) throw Error("infeasible synthetic spec: empty split");
  if (spec.rule == SyntheticRule::kKeywordMajority &&
      spec.vocab_content_size < 2 * spec.keywords_per_class + 2)
    throw Error("infeasible synthetic spec: too few content tokens for the keyword sets");
  if (spec.rule == SyntheticRule::kKeywordMajority && spec.keywords_per_class < 1)
    throw Error("infeasible synthetic spec: keywords_per_class must be >= 1");
  if (spec.rule == SyntheticRule::kPairOverlap &&
      (spec.overlap_k < 1 || spec.overlap_k > spec.seq_len ||
       spec.vocab_content_size <= spec.seq_len))
    throw Error("infeasible synthetic spec: pair-overlap needs 1 <= k <= seq_len < content size");

  Rng rng(derive_seed(seed, "synthetic-task"));
  SyntheticTask task;
  task.spec = spec;
  const int width = static_cast<int>(std::to_string(spec.vocab_content_size - 1).size());
  for (int i = 0; i < spec.vocab_content_size; ++i) {
    std::string n = std::to_string(i);
    task.content_tokens.push_back("w" + std::string(static_cast<std::size_t>(width) - n.size(), '0') + n);
  }
  std::vector<std::string> shuffled = task.content_tokens;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<std::string> fillers;
  if (spec.rule == SyntheticRule::kKeywordMajority) {
    const auto k = static_cast<std::size_t>(spec.keywords_per_class);
    task.keywords[0].assign(shuffled.begin(), shuffled.begin() + static_cast<long>(k));
    task.keywords[1].assign(shuffled.begin() + static_cast<long>(k), shuffled.begin() + static_cast<long>(2 * k));
    fillers.assign(shuffled.begin() + static_cast<long>(2 * k), shuffled.end());
  } else {
    fillers = shuffled;
  }
  FillerChain chain(fillers, rng);

  auto make_split = [&](const std::string& name, int n) {
    Dataset ds;
    ds.split = name;
    ds.num_classes = 2;
    ds.metric = "accuracy";
    ds.label_names = {"0", "1"};
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int label : labels) {
      ds.examples.push_back(spec.rule == SyntheticRule::kKeywordMajority
                                ? keyword_example(label, spec, chain, task.keywords, rng)
                                : overlap_example(label, spec, task.content_tokens, rng));
    }
    return ds;
  };
  task.train = make_split("train", spec.n_train);
  task.dev = make_split("dev", spec.n_dev);
  return task;
}

}  // namespace matekd
