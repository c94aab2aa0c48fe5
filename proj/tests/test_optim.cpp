#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace xprompt;
using xprompt::testing::tiny_config;

namespace {

// Single scalar parameter living in the final-norm bias; all other tensors
// have zero gradient.
ModelParams<double> scalar_model(double w) {
  auto p = init_params<double>(tiny_config(8, 4, 1, 1, 0, 4));
  p.visit([](const std::string&, Mat<double>& m) { m.setZero(); });
  p.lnf_b(0, 0) = w;
  return p;
}

}  // namespace

TEST(CosineLr, Landmarks) {
  const ScheduleConfig c{1e-3, 100, 1100};
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(50, c), 5e-4);
  EXPECT_DOUBLE_EQ(cosine_lr(100, c), 1e-3);
  EXPECT_NEAR(cosine_lr(600, c), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(1100, c), 0.0, 1e-18);
  EXPECT_THROW(cosine_lr(-1, c), ConfigError);
  EXPECT_THROW(cosine_lr(1101, c), ConfigError);
  EXPECT_THROW(cosine_lr(0, ScheduleConfig{1e-3, 10, 5}), ConfigError);
}

TEST(CosineLr, NonIncreasingAfterWarmup) {
  const ScheduleConfig c{3e-4, 37, 500};
  for (int s = 37; s < 500; ++s) EXPECT_LE(cosine_lr(s + 1, c), cosine_lr(s, c));
  for (int s = 0; s < 37; ++s) EXPECT_LT(cosine_lr(s, c), cosine_lr(s + 1, c));
  const ScheduleConfig nowarm{1.0, 0, 10};
  EXPECT_DOUBLE_EQ(cosine_lr(0, nowarm), 1.0);
}

TEST(Adam, FirstStepOnQuadratic) {
  // f(w) = w^2 at w = 1: g = 2, m = 0.2, v = 0.004; bias-corrected m/sqrt(v) = 1
  auto p = scalar_model(1.0);
  auto g = p.zeros_like();
  g.lnf_b(0, 0) = 2.0;
  OptimState<double> st(p, AdamConfig{0.9, 0.999, 1e-8, 0.0});
  adam_step(p, g, st, 0.1);
  const double mhat = (0.1 * 2.0) / 0.1;
  const double vhat = (0.001 * 4.0) / 0.001;
  EXPECT_NEAR(p.lnf_b(0, 0), 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-15);
  EXPECT_NEAR(st.m.lnf_b(0, 0), 0.2, 1e-15);
  EXPECT_NEAR(st.v.lnf_b(0, 0), 0.004, 1e-15);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  auto p = scalar_model(1.0);
  OptimState<double> st(p, AdamConfig{0.9, 0.999, 1e-8, 0.0});
  double w = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    auto g = p.zeros_like();
    g.lnf_b(0, 0) = 2.0 * p.lnf_b(0, 0);
    adam_step(p, g, st, 0.05);
    const double gw = 2.0 * w;
    m = 0.9 * m + 0.1 * gw;
    v = 0.999 * v + 0.001 * gw * gw;
    w -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.lnf_b(0, 0), w, 1e-14);
  }
}

TEST(Adam, ZeroGradientOnlyDecays) {
  auto p = init_params<double>(tiny_config(8));
  const auto before = p;
  OptimState<double> st(p, AdamConfig{0.9, 0.999, 1e-8, 0.0});
  adam_step(p, p.zeros_like(), st, 0.1);
  EXPECT_EQ((p.tok_emb - before.tok_emb).cwiseAbs().maxCoeff(), 0.0);
  OptimState<double> wd(p, AdamConfig{0.9, 0.999, 1e-8, 0.5});
  adam_step(p, p.zeros_like(), wd, 0.1);
  EXPECT_NEAR((p.tok_emb - before.tok_emb * 0.95).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(Adam, ShapeMismatch) {
  auto p = init_params<double>(tiny_config(8));
  auto g = init_params<double>(tiny_config(9));
  OptimState<double> st(p, {});
  EXPECT_THROW(adam_step(p, g, st, 0.1), ConfigError);
}

TEST(Clip, RescalesToMaxNorm) {
  auto g = init_params<double>(tiny_config(8)).zeros_like();
  g.tok_emb(0, 0) = 3.0;
  g.lnf_b(0, 1) = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-12);
  EXPECT_NEAR(g.tok_emb(0, 0), 0.6, 1e-12);
  auto small = g;
  clip_grad_norm(small, 10.0);
  EXPECT_EQ(small.tok_emb(0, 0), g.tok_emb(0, 0));
}

TEST(Clip, NonFiniteAborts) {
  auto g = init_params<double>(tiny_config(8)).zeros_like();
  g.layers[1].w1(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    clip_grad_norm(g, 1.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1.w1"), std::string::npos);
  }
}
