#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include "preroute/cache/route_cache.hpp"
#include "preroute/error.hpp"
#include "preroute/grouter/grouter.hpp"
#include "preroute/io/binary.hpp"
#include "preroute/synthetic.hpp"

namespace {

using namespace preroute;
using cache::RouteCache;

grouter::Grouter frozen_grouter(std::size_t experts = 8, std::uint64_t seed = 3) {
  grouter::GrouterConfig c;
  c.vocab_size = 32;
  c.embed = 16;
  c.num_blocks = 1;
  c.num_experts = experts;
  c.ffn_hidden = 16;
  c.max_seq_len = 16;
  grouter::Grouter g(c, seed);
  g.freeze();
  return g;
}

Corpus corpus(std::size_t n) {
  SyntheticSpec s;
  s.vocab_size = 32;
  s.seq_len = 16;
  s.num_sequences = n;
  return generate_corpus(s);
}

TEST(Bf16, KnownPatterns) {
  EXPECT_EQ(cache::to_bf16(1.0), 0x3F80);
  EXPECT_EQ(cache::to_bf16(-2.0), 0xC000);
  EXPECT_EQ(cache::to_bf16(0.0), 0x0000);
  EXPECT_EQ(cache::from_bf16(0x3F80), 1.0);
  // Exact halfway cases round to even.
  EXPECT_EQ(cache::to_bf16(std::bit_cast<float>(0x3F808000U)), 0x3F80);
  EXPECT_EQ(cache::to_bf16(std::bit_cast<float>(0x3F818000U)), 0x3F82);
  EXPECT_EQ(cache::to_bf16(std::bit_cast<float>(0x3F808001U)), 0x3F81);
  EXPECT_TRUE(std::isnan(cache::from_bf16(cache::to_bf16(std::nan("")))));
  EXPECT_TRUE(std::isinf(cache::from_bf16(cache::to_bf16(INFINITY))));
}

TEST(Bf16, RelativeErrorBound) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 10);
  for (int i = 0; i < 100000; ++i) {
    const double x = g(rng);
    EXPECT_LE(std::abs(cache::from_bf16(cache::to_bf16(x)) - x), std::abs(x) * std::ldexp(1.0, -8) * (1 + 1e-6));
  }
}

TEST(BuildCache, EmptyCorpusIsHeaderOnly) {
  Corpus empty;
  empty.vocab_size = 32;
  empty.seq_len = 16;
  const auto c = cache::build_cache(frozen_grouter(), empty, 2);
  EXPECT_EQ(c.token_count(), 0u);
  EXPECT_EQ(c.encode().size(), cache::CacheHeader::kBytes);
}

TEST(BuildCache, RequiresFrozenGrouter) {
  grouter::GrouterConfig cfg;
  cfg.vocab_size = 32;
  grouter::Grouter g(cfg, 1);
  EXPECT_THROW(cache::build_cache(g, corpus(1), 2), ConfigError);
}

TEST(BuildCache, RoundTripMatchesLiveRouting) {
  const auto g = frozen_grouter();
  const auto c = corpus(10);
  const auto built = cache::build_cache(g, c, 2);
  const auto path = std::filesystem::temp_directory_path() / "preroute_cache.grtc";
  built.save(path);
  EXPECT_EQ(std::filesystem::file_size(path), 24u + 10u * 16u * 2u * (1u + 2u));
  const auto loaded = RouteCache::load(path);
  EXPECT_EQ(loaded, built);
  for (std::size_t s = 0; s < c.size(); ++s) {
    const moe::Batch b{c.sequences[s]};
    const auto scores = g.scores(b);
    const auto live = moe::route(scores, 2, moe::Normalizer::softmax);
    const std::vector<std::size_t> ids{s};
    const auto replayed = loaded.replay_sequences(ids, moe::Normalizer::softmax);
    EXPECT_EQ(replayed.indices, live.indices);
    for (std::size_t t = 0; t < 16; ++t) {
      const auto stored = loaded.scores(s * 16 + t);
      for (std::size_t j = 0; j < 2; ++j) {
        const double exact = scores.data()[t * 8 + live.indices[t * 2 + j]];
        EXPECT_LE(std::abs(cache::from_bf16(stored[j]) - exact), std::abs(exact) * std::ldexp(1.0, -8) * (1 + 1e-6));
      }
    }
    for (std::size_t i = 0; i < live.weights.size(); ++i) EXPECT_NEAR(replayed.weights[i], live.weights[i], 1e-2);
  }
}

TEST(Replay, FirstTokenDeterministicAndBounds) {
  RouteCache c(4, 2, 2);
  moe::RoutingDecision d{4, 2, {0, 3, 1, 2}, {0.5, 0.5, 0.5, 0.5}};
  c.append(d, std::vector<double>{1.0, 0.0, 2.0, 2.0});
  const std::vector<std::uint64_t> first{0};
  const auto a = c.replay(first, moe::Normalizer::softmax);
  EXPECT_EQ(a.indices, (std::vector<std::uint32_t>{0, 3}));
  EXPECT_NEAR(a.weights[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_EQ(a, c.replay(first, moe::Normalizer::softmax));
  const auto sig = c.replay(first, moe::Normalizer::sigmoid);
  EXPECT_NEAR(sig.weights[1], 0.5, 1e-15);
  const std::vector<std::uint64_t> bad{2};
  EXPECT_THROW(c.replay(bad, moe::Normalizer::softmax), Error);
}

TEST(CacheFormat, WideIndicesAboveTwoHundredFiftySixExperts) {
  RouteCache c(300, 1, 1);
  c.append(moe::RoutingDecision{300, 1, {299}, {1.0}}, std::vector<double>{0.5});
  EXPECT_EQ(c.header().index_width, 2);
  const auto bytes = c.encode();
  EXPECT_EQ(bytes.size(), 24u + 1u * (2u + 2u));
  EXPECT_EQ(RouteCache::decode(bytes).indices(0)[0], 299u);
  EXPECT_THROW(RouteCache(65537, 1, 1), ConfigError);
}

TEST(CacheFormat, HeaderLayoutIsLittleEndian) {
  RouteCache c(8, 2, 1);
  c.append(moe::RoutingDecision{8, 2, {1, 5}, {0.5, 0.5}}, std::vector<double>{1.0, -2.0});
  const auto b = c.encode();
  const std::vector<unsigned char> expect{'G', 'R', 'T', 'C', 1, 0, 8, 0, 0, 0, 2, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0,
                                          1, 5, 0x80, 0x3F, 0x00, 0xC0};
  EXPECT_EQ(b, expect);
}

TEST(CacheFormat, FuzzedHeadersNeverCrash) {
  const auto built = cache::build_cache(frozen_grouter(), corpus(2), 2);
  const auto good = built.encode();
  std::mt19937_64 rng(99);
  int rejected = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    auto bytes = good;
    const int flips = 1 + int(rng() % 4);
    for (int f = 0; f < flips; ++f) bytes[rng() % cache::CacheHeader::kBytes] = static_cast<unsigned char>(rng());
    if (rng() % 4 == 0) bytes.resize(rng() % (bytes.size() + 1));
    try {
      const auto c = RouteCache::decode(bytes);
      EXPECT_EQ(bytes.size(), 24u + c.header().body_bytes());
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0);
  // A header claiming a huge token count is rejected before allocation.
  auto huge = good;
  for (int i = 12; i < 20; ++i) huge[i] = 0xFF;
  EXPECT_THROW(RouteCache::decode(huge), FormatError);
}

TEST(CacheReplay, TrainingMatchesLiveFrozenRouting) {
  const auto g = frozen_grouter(4, 8);
  const auto c = corpus(16);
  const auto built = cache::build_cache(g, c, 2);
  moe::MoeConfig mc;
  mc.vocab_size = 32;
  mc.hidden = 16;
  mc.num_experts = 4;
  mc.expert_hidden = 16;
  mc.seq_len = 16;
  auto run = [&](const moe::ExternalRouter& router) {
    moe::MoeModel m(mc, 2);
    moe::TrainOptions o;
    o.steps = 30;
    o.batch_size = 4;
    o.mode = moe::RouterMode::external;
    o.external_router = router;
    return moe::train_lm(m, c, o).log;
  };
  const auto live = run(grouter::make_external_router(g, 2, moe::Normalizer::softmax));
  const auto replay = run(cache::make_cache_router(built, moe::Normalizer::softmax));
  ASSERT_EQ(live.size(), replay.size());
  for (std::size_t i = 0; i < live.size(); ++i) EXPECT_LT(std::abs(live[i].loss - replay[i].loss), 1e-3) << "step " << i;
}

}  // namespace
