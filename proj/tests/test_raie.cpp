#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace xprompt;
using xprompt::testing::pair_of;
using xprompt::testing::random_grid;

namespace {

double norm(const Embedding& e) {
  double s = 0;
  for (float f : e) s += static_cast<double>(f) * f;
  return std::sqrt(s);
}

std::string random_instruction(Rng& rng) {
  static const std::vector<std::string> words = {"invert", "colors", "draw", "border", "shift", "left",
                                                 "right",  "add",    "noise", "level", "seed", "1",
                                                 "2",      "3",      "7",     "map",   "swap", "threshold"};
  std::string s;
  const int n = rng.range(1, 6);
  for (int i = 0; i < n; ++i) s += (i ? " " : "") + words[rng.below(words.size())];
  return s;
}

}  // namespace

TEST(Embedding, UnitNormAndOrderInvariant) {
  const HashedBagOfWords emb{256};
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_instruction(rng);
    EXPECT_NEAR(norm(emb(s)), 1.0, 1e-6) << s;
  }
  EXPECT_EQ(emb("draw border 3"), emb("3 border draw"));
  EXPECT_EQ(emb("invert  colors"), emb("invert colors"));
  EXPECT_THROW(emb("   "), ConfigError);
}

TEST(Embedding, SharedWordsRankAboveUnrelated) {
  const HashedBagOfWords emb{256};
  const auto q = emb("add noise level 3");
  EXPECT_GT(cosine(q, emb("add noise level 7")), cosine(q, emb("invert colors")));
  EXPECT_NEAR(cosine(q, q), 1.0, 1e-6);
}

TEST(Embedding, MatchesFnvFeatureHashing) {
  // independent recomputation: bucket = h mod dim, sign from top bit
  const int dim = 64;
  const std::string text = "shift left 2 shift";
  std::vector<double> acc(dim, 0.0);
  for (const auto& w : {"shift", "left", "2", "shift"}) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const char* c = w; *c; ++c) {
      h ^= static_cast<unsigned char>(*c);
      h *= 1099511628211ULL;
    }
    acc[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double n = 0;
  for (double a : acc) n += a * a;
  const auto e = HashedBagOfWords{dim}(text);
  for (int i = 0; i < dim; ++i) EXPECT_NEAR(e[static_cast<std::size_t>(i)], acc[static_cast<std::size_t>(i)] / std::sqrt(n), 1e-7);
}

TEST(Index, EmptyAndDuplicateErrors) {
  RetrievalIndex idx(16);
  const auto q = idx.embed("invert colors");
  EXPECT_THROW(idx.retrieve(q), ConfigError);
  EXPECT_THROW(idx.retrieve_linear(q), ConfigError);
  idx.add("a", q);
  EXPECT_THROW(idx.add("a", q), ConfigError);
  EXPECT_THROW(idx.retrieve(q, "a"), ConfigError);
  EXPECT_THROW(idx.add("b", Embedding(8, 0.0f)), ConfigError);
  EXPECT_THROW(idx.retrieve(Embedding(8, 0.0f)), ConfigError);
}

TEST(Index, NeverReturnsExcludedId) {
  std::vector<TaskExample> pool;
  Rng rng(2);
  for (int i = 0; i < 5; ++i)
    pool.push_back(pair_of(random_grid(rng, 2, 2, 16), random_grid(rng, 2, 2, 16), "invert colors", "e" + std::to_string(i)));
  const auto idx = build_index(pool, 32);
  for (const auto& ex : pool) {
    const auto hit = idx.retrieve(ex.instruction, ex.id);
    EXPECT_NE(hit.id, ex.id);
    EXPECT_NEAR(hit.similarity, 1.0, 1e-6);
    // ties broken by smallest id
    EXPECT_EQ(hit.id, ex.id == "e0" ? "e1" : "e0");
  }
}

TEST(Index, PostingsAgreeWithLinearScan) {
  Rng rng(3);
  for (int dim : {8, 64, 256}) {
    RetrievalIndex idx(dim);
    for (int i = 0; i < 300; ++i) {
      const auto s = random_instruction(rng);
      idx.add("id" + std::to_string(rng.below(1000000)) + "_" + std::to_string(i), idx.embed(s));
    }
    for (int t = 0; t < 200; ++t) {
      const auto q = idx.embed(random_instruction(rng));
      std::optional<std::string_view> ex;
      if (t % 3 == 0) ex = idx.ids()[rng.below(idx.size())];
      const auto a = idx.retrieve(q, ex);
      const auto b = idx.retrieve_linear(q, ex);
      EXPECT_EQ(a.id, b.id);
      EXPECT_DOUBLE_EQ(a.similarity, b.similarity);
      EXPECT_EQ(idx.retrieve_top(q, 1, ex).front(), b);
    }
  }
}

TEST(Index, ZeroOverlapFallsBackToSmallestId) {
  RetrievalIndex idx(4);
  idx.add("zeta", Embedding{1, 0, 0, 0});
  idx.add("beta", Embedding{1, 0, 0, 0});
  idx.add("alpha", Embedding{0, 1, 0, 0});
  const Embedding q{0, 0, 1, 0};
  EXPECT_EQ(idx.retrieve(q).id, "alpha");
  EXPECT_EQ(idx.retrieve(q, "alpha").id, "beta");
  EXPECT_EQ(idx.retrieve_linear(q, "alpha").id, "beta");
  const auto top = idx.retrieve_top(Embedding{1, 0, 0, 0}, 5);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].id, "beta");
  EXPECT_EQ(top[1].id, "zeta");
  EXPECT_EQ(top[2].id, "alpha");
}

TEST(Index, SaveLoadRoundTrip) {
  Rng rng(4);
  RetrievalIndex idx(32);
  for (int i = 0; i < 50; ++i) idx.add("x" + std::to_string(i), idx.embed(random_instruction(rng)));
  const std::string path = ::testing::TempDir() + "/xprompt_index.bin";
  idx.save(path);
  const auto back = RetrievalIndex::load(path);
  ASSERT_EQ(back.size(), idx.size());
  EXPECT_EQ(back.dim(), 32);
  EXPECT_EQ(back.ids(), idx.ids());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto a = idx.embedding(i), b = back.embedding(i);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  for (int t = 0; t < 20; ++t) {
    const auto q = idx.embed(random_instruction(rng));
    EXPECT_EQ(back.retrieve(q), idx.retrieve(q));
  }
  // truncate
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(RetrievalIndex::load(path), IoError);
  EXPECT_THROW(RetrievalIndex::load(path + ".missing"), IoError);
}

TEST(AssemblePrompt, RetrievedPairBecomesTheExample) {
  const auto v = task_vocab();
  Rng rng(5);
  const auto ex = pair_of(random_grid(rng, 3, 2, 16), random_grid(rng, 3, 2, 16), "draw border 3", "r");
  const Query q{random_grid(rng, 3, 2, 16), "draw border 5"};
  const auto p = assemble_prompt(q, ex, 16, v);
  const auto& L = p.layout;
  int xp = 0, ie = 0, td = 0;
  for (auto r : L.roles) {
    xp += r == Role::Xp;
    ie += is_ie(r);
    td += is_td(r);
  }
  EXPECT_EQ(xp, 16);
  EXPECT_EQ(ie, 3 + 2 * (6 + 2));
  EXPECT_EQ(td, 0);
  EXPECT_EQ(L.generation_begin, L.size());
  const auto direct = pack_sequence(std::span(&ex, 1), q, std::nullopt, 16, v);
  EXPECT_EQ(p.tokens, direct.tokens);
  EXPECT_EQ(L.roles, direct.layout.roles);
  EXPECT_TRUE(validate_mask(build_mask(L), L).empty());
}
