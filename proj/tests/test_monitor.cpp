#include <gtest/gtest.h>

#include <filesystem>

#include "papo/monitor.hpp"

using namespace papo;

namespace {

std::vector<StepMetrics> history_of(const std::vector<double>& kl, const std::vector<double>& reward,
                                    const std::vector<double>& ent, const std::vector<double>& ent_mask) {
  std::vector<StepMetrics> h;
  for (size_t t = 0; t < kl.size(); ++t) {
    StepMetrics m;
    m.step = static_cast<long>(t);
    m.kl_prcp_mean = kl[t];
    m.mean_reward = reward[t];
    m.entropy_pi = ent[t];
    m.entropy_pi_mask = ent_mask[t];
    h.push_back(m);
  }
  return h;
}

CollapseRules tight_rules() {
  CollapseRules r;
  r.smoothing_window = 1;
  r.slope_window = 3;
  return r;
}

}  // namespace

TEST(Smoothing, WindowOneIsIdentityAndPrefixIsShort) {
  const std::vector<double> y = {3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_EQ(running_average(y, 1), y);
  const auto s = running_average(y, 3);
  EXPECT_DOUBLE_EQ(s[0], 3.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0);
  EXPECT_DOUBLE_EQ(s[2], 8.0 / 3);
  EXPECT_DOUBLE_EQ(s[7], 17.0 / 3);
  const std::vector<double> c(40, 0.7);
  for (double v : running_average(c, 20)) EXPECT_DOUBLE_EQ(v, 0.7);
  EXPECT_THROW(running_average(y, 0), DomainError);
}

TEST(Slope, RecoversLinearTrend) {
  std::vector<double> y;
  for (int i = 0; i < 30; ++i) y.push_back(2.5 - 0.03 * i);
  EXPECT_NEAR(least_squares_slope(y), -0.03, 1e-14);
  EXPECT_EQ(least_squares_slope(std::vector<double>{1.0}), 0.0);
  // {0, 1, 0, 1}: x-bar 1.5, sum dx*dy = 1, sum dx^2 = 5.
  EXPECT_DOUBLE_EQ(least_squares_slope(std::vector<double>{0, 1, 0, 1}), 0.2);
}

TEST(Collapse, FiresAtFirstStepWithAllThreeSignals) {
  // kl peaks at 4: drop below 1 first at t=5. reward peaks at 0.8: below
  // 0.48 first at t=6. entropy slope over t=4..6 is 0.1. So t=6.
  const auto h = history_of({1, 2, 4, 4, 3, 0.9, 0.5, 0.4}, {0.5, 0.6, 0.8, 0.8, 0.7, 0.6, 0.4, 0.3},
                            {1, 1, 1, 1, 1.0, 1.1, 1.2, 1.3}, {2, 2, 2, 2, 2, 2, 2, 2});
  const auto sig = detect_collapse(h, tight_rules());
  ASSERT_TRUE(sig.fired);
  EXPECT_EQ(sig.at_step, 6);
  EXPECT_TRUE(sig.evidence.prcp_drop);
  EXPECT_TRUE(sig.evidence.reward_drop);
  EXPECT_TRUE(sig.evidence.entropy_pi_rise);
  EXPECT_FALSE(sig.evidence.entropy_mask_rise);
  EXPECT_DOUBLE_EQ(sig.kl_prcp_at, 0.5);
  EXPECT_DOUBLE_EQ(sig.kl_prcp_peak, 4.0);
}

TEST(Collapse, MaskEntropyAloneSuffices) {
  const auto h = history_of({1, 2, 4, 4, 3, 0.9, 0.5, 0.4}, {0.5, 0.6, 0.8, 0.8, 0.7, 0.6, 0.4, 0.3},
                            {1, 1, 1, 1, 1, 1, 1, 1}, {2, 2, 2, 2, 2.0, 2.2, 2.4, 2.6});
  const auto sig = detect_collapse(h, tight_rules());
  ASSERT_TRUE(sig.fired);
  EXPECT_EQ(sig.at_step, 6);
  EXPECT_TRUE(sig.evidence.entropy_mask_rise);
}

TEST(Collapse, NeedsEveryCondition) {
  const std::vector<double> kl = {1, 2, 4, 4, 3, 0.9, 0.5, 0.4}, reward = {0.5, 0.6, 0.8, 0.8, 0.7, 0.6, 0.4, 0.3};
  const std::vector<double> flat(8, 1.0), rising = {1, 1, 1, 1, 1.0, 1.1, 1.2, 1.3};
  EXPECT_FALSE(detect_collapse(history_of(kl, reward, flat, flat), tight_rules()).fired);
  EXPECT_FALSE(detect_collapse(history_of(kl, std::vector<double>(8, 0.8), rising, flat), tight_rules()).fired);
  EXPECT_FALSE(detect_collapse(history_of(std::vector<double>(8, 3.0), reward, rising, flat), tight_rules()).fired);
  EXPECT_FALSE(detect_collapse(std::vector<StepMetrics>{}, tight_rules()).fired);
}

TEST(Collapse, DefaultRulesOnSmoothedTrajectory) {
  // 60 steps of healthy training, then kl and reward fall to zero while
  // entropy climbs.
  std::vector<double> kl, reward, ent, flat;
  for (int t = 0; t < 200; ++t) {
    const bool late = t >= 60;
    kl.push_back(late ? 0.0 : 1.0);
    reward.push_back(late ? 0.0 : 0.9);
    ent.push_back(late ? 1.0 + 0.01 * (t - 60) : 1.0);
    flat.push_back(1.0);
  }
  const auto sig = detect_collapse(history_of(kl, reward, ent, flat));
  ASSERT_TRUE(sig.fired);
  // 20-step trailing mean of kl is (79 - t) / 20 after the drop: below 0.25
  // first at t = 75. Reward gives the same t. The entropy slope over 30 steps
  // is positive from t = 62 on.
  EXPECT_EQ(sig.at_step, 75);
}

TEST(MetricsFile, RoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "papo_metrics.jsonl").string();
  std::vector<StepMetrics> steps;
  for (long t = 0; t < 5; ++t) {
    StepMetrics m;
    m.step = t;
    m.mean_reward = 0.1 * static_cast<double>(t) + 1.0 / 3;
    m.kl_prcp_mean = 1e-17 * static_cast<double>(t);
    m.loss.total = -0.123456789012345678;
    m.loss.clip_high_fraction = m.clip_high_frac = 0.25;
    m.degenerate_groups = t;
    m.relatedness_proxy = 0.5;
    steps.push_back(m);
  }
  {
    MetricsWriter w(path, false);
    w.write_header({{"seed", 3}});
    for (const auto& m : steps) w.write_step(m);
  }
  const MetricsFile f = read_metrics(path);
  EXPECT_EQ(f.header["seed"], 3);
  ASSERT_EQ(f.steps.size(), steps.size());
  for (size_t i = 0; i < steps.size(); ++i) EXPECT_EQ(to_json(f.steps[i]), to_json(steps[i]));
  {
    MetricsWriter w(path, true);
    w.write_step(steps[0]);
  }
  EXPECT_EQ(read_metrics(path).steps.size(), steps.size() + 1);
  std::filesystem::remove(path);
  EXPECT_THROW(read_metrics(path), NotFoundError);
}

TEST(MetricsFile, ValidateRejectsNonFinite) {
  StepMetrics m;
  m.kl_prcp_mean = INFINITY;
  EXPECT_THROW(m.validate(), NumericError);
  m.kl_prcp_mean = 0;
  m.clip_high_frac = 1.5;
  EXPECT_THROW(m.validate(), DomainError);
}

TEST(Relatedness, FractionOfDigitOrAnswerTokens) {
  Prompt p;
  p.answer = {vocab::kFirst};
  EXPECT_DOUBLE_EQ(relatedness_proxy({vocab::kFirst, vocab::kEnd}, p), 1.0);
  EXPECT_DOUBLE_EQ(relatedness_proxy({vocab::kSecond, 3}, p), 0.5);
  EXPECT_DOUBLE_EQ(relatedness_proxy({vocab::kEnd}, p), 0.0);
  p.answer = {4};
  EXPECT_DOUBLE_EQ(relatedness_proxy({vocab::kSecond, vocab::kFirst, 7}, p), 1.0 / 3);
}
