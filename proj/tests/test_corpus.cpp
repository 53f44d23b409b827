// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "advlm/corpus.hpp"

using namespace advlm;

namespace {

std::vector<std::string> tokens_of(const std::string& text) {
  std::istringstream in(text);
  return tokenize_lines(in);
}

std::vector<TokenId> iota_ids(std::size_t n) {
  std::vector<TokenId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

}  // namespace

TEST(Vocab, SmallExample) {
  auto toks = tokens_of("a b a\n");
  auto v = build_vocab(toks, 1);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v.token(0), "<unk>");
  EXPECT_EQ(v.token(1), "<eos>");
  EXPECT_EQ(v.token(2), "a");
  EXPECT_EQ(v.token(3), "b");
}

TEST(Vocab, MinCountMapsRareToUnk) {
  auto v = build_vocab(tokens_of("a b a\n"), 2);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.id("b"), kUnkId);
  EXPECT_EQ(v.id("a"), 2u);
}

TEST(Vocab, EmptyCorpusIsIngestionError) {
  EXPECT_THROW(build_vocab({}, 1), IngestionError);
}

TEST(Vocab, TiesBrokenLexicographically) {
  auto v = build_vocab(tokens_of("z y x x\n"), 1);
  EXPECT_EQ(v.token(2), "x");
  EXPECT_EQ(v.token(3), "y");
  EXPECT_EQ(v.token(4), "z");
}

TEST(Vocab, LiteralReservedTokensUseReservedIds) {
  auto toks = tokens_of("<unk> a <unk>\n");
  auto v = build_vocab(toks, 1);
  EXPECT_EQ(v.size(), 3u);
  auto ids = v.encode(toks);
  EXPECT_EQ(ids, (std::vector<TokenId>{kUnkId, 2, kUnkId, kEosId}));
}

TEST(Vocab, BundledSampleSizeMatchesIndependentCount) {
  const auto path = std::filesystem::path(ADVLM_SOURCE_DIR) / "data" / "valid.txt";
  auto toks = read_corpus(path);
  auto v = build_vocab(toks, 1);

  std::set<std::string> distinct;
  std::ifstream in(path);
  std::string w;
  std::size_t lines = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lines;
    std::istringstream ls(line);
    while (ls >> w)
      if (w != "<unk>") distinct.insert(w);
  }
  EXPECT_EQ(v.size(), distinct.size() + 2);
  EXPECT_EQ(std::count(toks.begin(), toks.end(), "<eos>"), static_cast<std::ptrdiff_t>(lines));
}

TEST(Vocab, EncodeDecodeAndFileRoundTrip) {
  auto v = build_vocab(tokens_of("the cat sat on the mat\nthe end\n"), 1);
  for (TokenId i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
  std::istringstream in(v.serialize());
  auto w = Vocab::parse(in);
  EXPECT_EQ(w.serialize(), v.serialize());
}

TEST(Vocab, DeterministicSerialization) {
  const std::string text = "b a c a b d e e e\nq r\n";
  EXPECT_EQ(build_vocab(tokens_of(text), 1).serialize(), build_vocab(tokens_of(text), 1).serialize());
}

TEST(Vocab, RejectsMalformedFile) {
  std::istringstream missing_reserved("a\t0\n");
  EXPECT_THROW(Vocab::parse(missing_reserved), FormatError);
  std::istringstream gap("<unk>\t0\n<eos>\t1\nx\t3\n");
  EXPECT_THROW(Vocab::parse(gap), FormatError);
  EXPECT_THROW(Vocab::load("/nonexistent/vocab.tsv"), FormatError);
}

TEST(Batchify, HandLayout) {
  auto s = batchify(iota_ids(10), 2, 2);
  EXPECT_EQ(s.steps(), 5u);
  ASSERT_EQ(s.window_count(), 2u);
  auto w = s.window(0);
  // rows are time steps, columns are the two streams 0..4 and 5..9
  EXPECT_EQ(w.inputs, (std::vector<TokenId>{0, 5, 1, 6}));
  EXPECT_EQ(w.targets, (std::vector<TokenId>{1, 6, 2, 7}));
  auto w1 = s.window(1);
  EXPECT_EQ(w1.inputs, (std::vector<TokenId>{2, 7, 3, 8}));
  EXPECT_EQ(w1.targets, (std::vector<TokenId>{3, 8, 4, 9}));
}

TEST(Batchify, SingleWindowCoversStream) {
  auto s = batchify(iota_ids(7), 1, 6);
  ASSERT_EQ(s.window_count(), 1u);
  auto w = s.window(0);
  EXPECT_EQ(w.inputs, (std::vector<TokenId>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(w.targets, (std::vector<TokenId>{1, 2, 3, 4, 5, 6}));
}

TEST(Batchify, RemainderDropped) {
  auto s = batchify(iota_ids(11), 2, 2);
  EXPECT_EQ(s.steps(), 5u);
  EXPECT_EQ(s.at(0, 1), 5u);
}

TEST(Batchify, ConfigErrors) {
  EXPECT_THROW(batchify(iota_ids(10), 0, 2), ConfigError);
  EXPECT_THROW(batchify(iota_ids(10), 2, 0), ConfigError);
  EXPECT_THROW(batchify(iota_ids(3), 2, 1), ConfigError);
}

TEST(Batchify, CursorIteratesAllWindows) {
  auto s = batchify(iota_ids(40), 3, 4);
  Window w;
  std::size_t n = 0;
  while (s.next(w)) ++n;
  EXPECT_EQ(n, s.window_count());
  EXPECT_FALSE(s.next(w));
  s.rewind();
  EXPECT_TRUE(s.next(w));
}

TEST(BatchifyProperty, TargetCountAndColumnReconstruction) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng() % 6;
    const std::size_t l = 1 + rng() % 9;
    const std::size_t len = 2 * b + rng() % 300;
    auto ids = iota_ids(len);
    auto s = batchify(ids, b, l);
    const std::size_t steps = len / b;
    const std::size_t windows = (steps - 1) / l;
    ASSERT_EQ(s.window_count(), windows);

    std::size_t targets = 0;
    std::vector<std::vector<TokenId>> cols(b);
    for (std::size_t k = 0; k < windows; ++k) {
      auto w = s.window(k);
      targets += w.targets.size();
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t c = 0; c < b; ++c) {
          cols[c].push_back(w.inputs[t * b + c]);
          ASSERT_EQ(w.targets[t * b + c], w.inputs[t * b + c] + 1);
        }
    }
    ASSERT_EQ(targets, b * l * windows);
    for (std::size_t c = 0; c < b; ++c)
      for (std::size_t i = 0; i < cols[c].size(); ++i) ASSERT_EQ(cols[c][i], c * steps + i);
  }
}
