#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "preroute/diag/diagnostics.hpp"
#include "preroute/error.hpp"
#include "preroute/synthetic.hpp"

namespace {

using namespace preroute;
using namespace preroute::diag;

RoutingSnapshot snap(std::vector<double> scores, std::size_t e, std::size_t k) {
  const std::size_t n = scores.size() / e;
  return snapshot("x", ad::Tensor({n, e}, std::move(scores)), k, moe::Normalizer::softmax);
}

TEST(ExactMatch, Examples) {
  const auto a = snap({3, 2, 1, 0, 0, 1, 2, 3}, 4, 2);
  EXPECT_EQ(exact_match_rate(a, a), 1.0);
  const auto b = snap({0, 1, 2, 3, 3, 2, 1, 0}, 4, 2);
  EXPECT_EQ(exact_match_rate(a, b), 0.0);
  const auto c = snap({3, 2, 1, 0, 3, 2, 1, 0}, 4, 2);
  EXPECT_EQ(exact_match_rate(a, c), 0.5);
  EXPECT_THROW(exact_match_rate(a, snap({1, 2, 3, 4}, 4, 2)), ShapeError);
}

TEST(ScoreCosine, Examples) {
  const auto a = snap({1, 2, 0, -1}, 4, 1);
  EXPECT_NEAR(score_cosine(a, a), 1.0, 1e-15);
  EXPECT_NEAR(score_cosine(a, snap({-1, -2, 0, 1}, 4, 1)), -1.0, 1e-15);
  EXPECT_NEAR(score_cosine(snap({1, 0}, 2, 1), snap({0, 1}, 2, 1)), 0.0, 1e-15);
}

TEST(GradNormCv, Examples) {
  for (double v : grad_norm_cv(std::vector<double>(10, 2.5), 4)) {
    if (!std::isnan(v)) EXPECT_EQ(v, 0.0);
  }
  const auto cv = grad_norm_cv({1, 3}, 2);
  EXPECT_TRUE(std::isnan(cv[0]));
  EXPECT_DOUBLE_EQ(cv[1], 0.5);
  EXPECT_TRUE(std::isnan(max_defined(grad_norm_cv({1, 2}, 3))));
}

TEST(GradNormCv, MatchesNaiveRecomputation) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 5);
  std::vector<double> trace(300);
  for (auto& v : trace) v = u(rng);
  const std::size_t w = 50;
  const auto cv = grad_norm_cv(trace, w);
  for (std::size_t i = w - 1; i < trace.size(); ++i) {
    std::vector<double> win(trace.begin() + long(i + 1 - w), trace.begin() + long(i + 1));
    double m = 0;
    for (double v : win) m += v;
    m /= double(w);
    double ss = 0;
    for (double v : win) ss += (v - m) * (v - m);
    EXPECT_NEAR(cv[i], std::sqrt(ss / double(w)) / m, 1e-12);
  }
}

TEST(EOpt, Examples) {
  const std::vector<std::vector<double>> g{{1, 2}, {3, 4}};
  EXPECT_EQ(e_opt(g, g), 0.0);
  EXPECT_EQ(e_opt({{1, 0, 0}}, {{1, 1, 0}}), 1.0);
  EXPECT_THROW(e_opt(g, {{1, 2}}), ShapeError);
}

TEST(GradAlignmentTest, Examples) {
  auto a = grad_alignment({{1, 0}, {0, 1}});
  EXPECT_EQ(a.cross_term, 0.0);
  EXPECT_FALSE(a.stagnating);
  a = grad_alignment({{1, -2, 3}, {-1, 2, -3}});
  EXPECT_EQ(a.norm_sq, 0.0);
  EXPECT_TRUE(a.stagnating);
}

TEST(GradAlignmentTest, DecompositionIdentity) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> grads(1 + rng() % 10, std::vector<double>(1 + rng() % 20));
    for (auto& v : grads)
      for (auto& x : v) x = g(rng);
    const auto a = grad_alignment(grads);
    EXPECT_NEAR(a.norm_sq, a.sum_sq + a.cross_term, 1e-9);
  }
}

moe::MoeConfig tiny() {
  moe::MoeConfig c;
  c.vocab_size = 32;
  c.hidden = 16;
  c.num_experts = 4;
  c.expert_hidden = 8;
  c.seq_len = 16;
  return c;
}

Corpus corpus(std::size_t n) {
  SyntheticSpec s;
  s.vocab_size = 32;
  s.seq_len = 16;
  s.num_sequences = n;
  return generate_corpus(s);
}

TEST(PerTokenGrads, SumToFullExpertGradient) {
  moe::MoeModel m(tiny(), 4);
  const auto c = corpus(2);
  const moe::Batch batch(c.sequences.begin(), c.sequences.end());
  const auto split = per_token_expert_grads(m, batch, {}, 1, 2);
  ASSERT_FALSE(split.grads.empty());
  const auto r = m.forward(batch);
  m.lm_loss(r, batch).backward();
  std::vector<double> full;
  for (const char* w : {"w1", "w3", "w2"}) {
    const auto& t = m.params().at(std::string("layer1.expert2.") + w);
    full.insert(full.end(), t.grad().begin(), t.grad().end());
  }
  std::vector<double> sum(full.size(), 0.0);
  for (const auto& g : split.grads)
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(sum[i], full[i], 1e-12);
  const auto a = grad_alignment(split.grads);
  EXPECT_NEAR(a.norm_sq, a.sum_sq + a.cross_term, 1e-9);
  // Token ids are those routed to expert 2 in layer 1.
  for (auto t : split.tokens) {
    const auto ex = r.decisions[1].experts_of(t);
    EXPECT_NE(std::find(ex.begin(), ex.end(), 2u), ex.end());
  }
}

TEST(PerturbProbe, IntervalBeyondStepsLeavesTrajectoryUnchanged) {
  const moe::MoeModel m(tiny(), 1);
  ProbeOptions o;
  o.interval = 100;
  o.steps = 6;
  o.batch_size = 2;
  o.learning_rate = 1e-3;
  const auto r = perturb_probe(m, corpus(8), o);
  ASSERT_EQ(r.loss_delta.size(), 6u);
  for (double d : r.loss_delta) EXPECT_EQ(d, 0.0);
  EXPECT_TRUE(r.probe_steps.empty());
}

TEST(PerturbProbe, KEqualsEOnlyReweights) {
  auto cfg = tiny();
  cfg.top_k = cfg.num_experts;
  const moe::MoeModel m(cfg, 1);
  ProbeOptions o;
  o.interval = 2;
  o.steps = 6;
  o.batch_size = 2;
  const auto r = perturb_probe(m, corpus(8), o);
  EXPECT_EQ(r.probe_steps.size(), 3u);
  for (double d : r.loss_delta) EXPECT_LT(std::abs(d), 0.5);
}

TEST(FrozenRouting, SnapshotsAcrossCheckpointsAreIdentical) {
  grouter::GrouterConfig gc;
  gc.vocab_size = 32;
  gc.embed = 16;
  gc.num_blocks = 1;
  gc.num_experts = 4;
  gc.ffn_hidden = 16;
  gc.max_seq_len = 16;
  grouter::Grouter g(gc, 2);
  g.freeze();
  const auto c = corpus(8);
  moe::MoeModel m(tiny(), 3);
  moe::TrainOptions t;
  t.steps = 6;
  t.batch_size = 2;
  t.checkpoint_every = 2;
  t.mode = moe::RouterMode::external;
  t.external_router = grouter::make_external_router(g, 2, moe::Normalizer::softmax);
  t.track_ideal_gap = true;
  const auto r = moe::train_lm(m, c, t);
  const moe::Batch probe(c.sequences.begin(), c.sequences.begin() + 4);
  std::vector<RoutingSnapshot> snaps;
  for (const auto& ck : r.checkpoints) snaps.push_back(snapshot(std::to_string(ck.step), g, probe, 2, moe::Normalizer::softmax));
  for (const auto& a : snaps)
    for (const auto& b : snaps) {
      EXPECT_EQ(exact_match_rate(a, b), 1.0);
      EXPECT_EQ(score_cosine(a, b), 1.0);
    }
  EXPECT_EQ(e_opt(r.log), 0.0);
  for (const auto& rec : r.log) EXPECT_EQ(rec.router_grad_norm, 0.0);
}

}  // namespace
