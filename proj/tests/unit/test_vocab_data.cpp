#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "matekd/error.hpp"
#include "matekd/vocab_data.hpp"
#include "test_util.hpp"

using namespace matekd;

namespace {

std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(MATEKD_TEST_DATA_DIR) / name;
}

void write_file(const std::filesystem::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

}  // namespace

TEST(Vocabulary, FrequencyOrderWithSpecialsFirst) {
  std::vector<std::string> corpus = {"a b", "a"};
  Vocabulary v = build_vocab(corpus, 10);
  ASSERT_EQ(v.size(), 7);
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i) EXPECT_EQ(v.token(i), Vocabulary::kSpecialTokens[i]);
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_EQ(v.id("b"), 6);
}

TEST(Vocabulary, SingleTokenCorpus) {
  std::vector<std::string> corpus = {"x"};
  Vocabulary v = build_vocab(corpus, 6);
  EXPECT_EQ(v.size(), 6);
  EXPECT_EQ(v.token(5), "x");
}

TEST(Vocabulary, TiesBreakLexicographically) {
  std::vector<std::string> corpus = {"zeta alpha mid", "mid"};
  Vocabulary v = build_vocab(corpus, 100);
  EXPECT_EQ(v.token(5), "mid");
  EXPECT_EQ(v.token(6), "alpha");
  EXPECT_EQ(v.token(7), "zeta");
}

TEST(Vocabulary, MaxSizeTruncatesByFrequency) {
  std::vector<std::string> corpus = {"a a a b b c"};
  Vocabulary v = build_vocab(corpus, 7);
  EXPECT_EQ(v.size(), 7);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("b"));
  EXPECT_FALSE(v.contains("c"));
}

TEST(Vocabulary, EmptyCorpusIsAnError) {
  std::vector<std::string> corpus;
  try {
    build_vocab(corpus, 10);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty corpus");
  }
}

TEST(Vocabulary, DeterministicSerialization) {
  std::vector<std::string> corpus = {"the cat sat", "the dog sat down", "a cat"};
  testutil::TempDir dir("vocab");
  build_vocab(corpus, 50).save(dir / "v1.txt");
  build_vocab(corpus, 50).save(dir / "v2.txt");
  std::ifstream a(dir / "v1.txt"), b(dir / "v2.txt");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  Vocabulary back = Vocabulary::load(dir / "v1.txt");
  EXPECT_EQ(back.tokens(), build_vocab(corpus, 50).tokens());
  EXPECT_EQ(back.hash(), build_vocab(corpus, 50).hash());
}

TEST(Vocabulary, IdsInvertTokens) {
  Vocabulary v = testutil::small_vocab(10);
  for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
  EXPECT_EQ(v.id("never-seen"), Vocabulary::kUnk);
}

TEST(Vocabulary, RejectsBadTokenLists) {
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f"}), Error);
  auto dup = testutil::small_vocab(2).tokens();
  dup.push_back("t0");
  EXPECT_THROW(Vocabulary::from_tokens(dup), Error);
}

TEST(Encode, SingleSentenceLayout) {
  Vocabulary v = Vocabulary::from_tokens({"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "a", "b"});
  TokenSequence s = encode({"a b", std::nullopt, 0}, v, 6);
  EXPECT_EQ(s.ids, (std::vector<int>{2, 5, 6, 3, 0, 0}));
  EXPECT_EQ(s.maskable, (std::vector<unsigned char>{0, 1, 1, 0, 0, 0}));
}

TEST(Encode, PairLayout) {
  Vocabulary v = Vocabulary::from_tokens({"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "a", "b"});
  TokenSequence s = encode({"a", "b", 0}, v, 6);
  EXPECT_EQ(s.ids, (std::vector<int>{2, 5, 3, 6, 3, 0}));
  EXPECT_EQ(s.sep_positions, (std::vector<int>{2, 4}));
}

TEST(Encode, UnknownTokenMapsToUnk) {
  Vocabulary v = testutil::small_vocab(3);
  TokenSequence s = encode({"zzz", std::nullopt, 0}, v, 6);
  EXPECT_EQ(s.ids[1], Vocabulary::kUnk);
  EXPECT_TRUE(s.maskable[1]);
}

TEST(Encode, TruncationKeepsLeadingTokens) {
  Vocabulary v = testutil::small_vocab(8);
  TokenSequence s = encode({"t0 t1 t2 t3 t4 t5", std::nullopt, 0}, v, 5);
  EXPECT_EQ(s.ids, (std::vector<int>{2, v.id("t0"), v.id("t1"), v.id("t2"), 3}));
  EXPECT_THROW(encode({"t0", std::nullopt, 0}, v, 3), Error);
}

TEST(Encode, SpecialPositionsNeverMaskable) {
  Vocabulary v = testutil::small_vocab(8);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    auto words = [&] {
      std::string s;
      const int n = 1 + static_cast<int>(rng() % 8);
      for (int i = 0; i < n; ++i) s += (i ? " " : "") + ("t" + std::to_string(rng() % 10));
      return s;
    };
    std::optional<std::string> b;
    if (rng() % 2) b = words();
    const int max_len = 4 + static_cast<int>(rng() % 10);
    TokenSequence s = encode({words(), b, 0}, v, max_len);
    ASSERT_EQ(s.length(), max_len);
    EXPECT_EQ(s.ids[0], Vocabulary::kCls);
    for (int i = 0; i < s.length(); ++i) {
      const bool special = Vocabulary::is_special(s.ids[i]) && s.ids[i] != Vocabulary::kUnk;
      EXPECT_EQ(static_cast<bool>(s.maskable[i]), !special) << "position " << i;
    }
  }
}

TEST(Decode, DropsSpecials) {
  Vocabulary v = Vocabulary::from_tokens({"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "a", "b"});
  std::vector<int> ids = {2, 5, 6, 3, 0};
  EXPECT_EQ(decode(ids, v), "a b");
  std::vector<int> pads = {0, 0, 0};
  EXPECT_EQ(decode(pads, v), "");
  std::vector<int> bad = {2, 7};
  EXPECT_THROW(decode(bad, v), Error);
}

TEST(Decode, RoundTripOnRandomInVocabText) {
  Vocabulary v = testutil::small_vocab(12);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> words;
    const int n = 1 + static_cast<int>(rng() % 9);
    for (int i = 0; i < n; ++i) words.push_back("t" + std::to_string(rng() % 12));
    // Irregular whitespace on input; decode normalizes to single spaces.
    std::string messy, normal;
    for (std::size_t i = 0; i < words.size(); ++i) {
      messy += (i ? "  \t" : " ") + words[i];
      normal += (i ? " " : "") + words[i];
    }
    TokenSequence s = encode({messy, std::nullopt, 0}, v, std::max(4, n + 2));
    EXPECT_EQ(decode(s.ids, v), normal);
  }
}

TEST(LoadDataset, FirstAppearanceLabelOrder) {
  testutil::TempDir dir("ds");
  write_file(dir / "t.tsv", "sentence\tlabel\ngood film\tpos\nbad film\tneg\nfine film\tpos\n");
  Dataset ds = load_dataset(dir / "t.tsv", ColumnSchema{});
  EXPECT_EQ(ds.num_classes, 2);
  ASSERT_EQ(ds.examples.size(), 3u);
  EXPECT_EQ(ds.examples[0].label, 0);
  EXPECT_EQ(ds.examples[1].label, 1);
  EXPECT_EQ(ds.examples[2].label, 0);
  EXPECT_EQ(ds.label_names, (std::vector<std::string>{"pos", "neg"}));
  EXPECT_EQ(ds.examples[1].text_a, "bad film");
}

TEST(LoadDataset, KnownLabelsAreShared) {
  testutil::TempDir dir("ds");
  write_file(dir / "dev.tsv", "sentence\tlabel\nx\tneg\ny\tpos\n");
  std::vector<std::string> known = {"pos", "neg"};
  Dataset ds = load_dataset(dir / "dev.tsv", ColumnSchema{}, "dev", known);
  EXPECT_EQ(ds.examples[0].label, 1);
  EXPECT_EQ(ds.examples[1].label, 0);
}

TEST(LoadDataset, MissingColumnIsNamed) {
  testutil::TempDir dir("ds");
  write_file(dir / "t.tsv", "sentence\tscore\nx\t1\n");
  try {
    load_dataset(dir / "t.tsv", ColumnSchema{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "missing column: label");
  }
}

TEST(LoadDataset, RejectsEmptyAndNonUtf8) {
  testutil::TempDir dir("ds");
  write_file(dir / "empty.tsv", "");
  EXPECT_THROW(load_dataset(dir / "empty.tsv", ColumnSchema{}), Error);
  write_file(dir / "bin.tsv", "sentence\tlabel\n\xff\xfe bad\t1\n");
  EXPECT_THROW(load_dataset(dir / "bin.tsv", ColumnSchema{}), Error);
  EXPECT_THROW(load_dataset(dir / "missing.tsv", ColumnSchema{}), Error);
}

TEST(LoadDataset, Sst2Fixture) {
  Dataset ds = load_dataset(fixture("sst2_sample.tsv"), ColumnSchema{});
  EXPECT_EQ(ds.examples.size(), 10u);
  EXPECT_EQ(ds.num_classes, 2);
  for (const auto& e : ds.examples) {
    EXPECT_FALSE(e.text_b.has_value());
    EXPECT_FALSE(e.text_a.empty());
  }
  EXPECT_EQ(ds.label_names, (std::vector<std::string>{"1", "0"}));
}

TEST(LoadDataset, SaveLoadRoundTripPreservesOrder) {
  testutil::TempDir dir("ds");
  Dataset ds = load_dataset(fixture("sst2_sample.tsv"), ColumnSchema{});
  save_dataset(ds, dir / "copy.tsv", ColumnSchema{});
  Dataset back = load_dataset(dir / "copy.tsv", ColumnSchema{});
  ASSERT_EQ(back.examples.size(), ds.examples.size());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    EXPECT_EQ(back.examples[i].text_a, ds.examples[i].text_a);
    EXPECT_EQ(back.examples[i].label, ds.examples[i].label);
  }
}

TEST(Synthetic, KeywordMajorityLabelsMatchOracle) {
  SyntheticSpec spec;
  spec.n_train = 512;
  SyntheticTask t = make_synthetic_task(spec, 7);
  int positives = 0;
  for (const auto* split : {&t.train, &t.dev}) {
    for (const auto& e : split->examples) {
      ASSERT_EQ(e.label, keyword_majority_rule(e.text_a, t.keywords)) << e.text_a;
      EXPECT_EQ(static_cast<int>(split_whitespace(e.text_a).size()), spec.seq_len);
    }
  }
  for (const auto& e : t.train.examples) positives += e.label;
  const double frac = positives / 512.0;
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
}

TEST(Synthetic, PairOverlapLabelsMatchOracle) {
  SyntheticSpec spec;
  spec.rule = SyntheticRule::kPairOverlap;
  spec.n_train = 200;
  spec.n_dev = 50;
  spec.seq_len = 5;
  SyntheticTask t = make_synthetic_task(spec, 9);
  int positives = 0;
  for (const auto& e : t.train.examples) {
    ASSERT_TRUE(e.text_b.has_value());
    ASSERT_EQ(e.label, pair_overlap_rule(e.text_a, *e.text_b, spec.overlap_k));
    positives += e.label;
  }
  EXPECT_GE(positives, 90);
  EXPECT_LE(positives, 110);
}

TEST(Synthetic, PairOverlapRule) {
  EXPECT_EQ(pair_overlap_rule("a b", "b c", 1), 1);
  EXPECT_EQ(pair_overlap_rule("a b", "c d", 1), 0);
  EXPECT_EQ(pair_overlap_rule("a b", "b c", 2), 0);
}

TEST(Synthetic, DeterministicInSeed) {
  SyntheticSpec spec;
  SyntheticTask a = make_synthetic_task(spec, 4), b = make_synthetic_task(spec, 4);
  SyntheticTask c = make_synthetic_task(spec, 5);
  ASSERT_EQ(a.train.examples.size(), b.train.examples.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.train.examples.size(); ++i) {
    EXPECT_EQ(a.train.examples[i].text_a, b.train.examples[i].text_a);
    EXPECT_EQ(a.train.examples[i].label, b.train.examples[i].label);
    differs |= a.train.examples[i].text_a != c.train.examples[i].text_a;
  }
  EXPECT_TRUE(differs);
}

TEST(Synthetic, InfeasibleSpecs) {
  SyntheticSpec spec;
  spec.seq_len = 1;
  EXPECT_THROW(make_synthetic_task(spec, 1), Error);
  spec.seq_len = 10;
  spec.vocab_content_size = 3;
  EXPECT_THROW(make_synthetic_task(spec, 1), Error);
  EXPECT_THROW(parse_synthetic_rule("majority"), Error);
  EXPECT_EQ(parse_synthetic_rule("pair-overlap"), SyntheticRule::kPairOverlap);
}
