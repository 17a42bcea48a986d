#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "papo/environment.hpp"
#include "papo/masking.hpp"
#include "papo/policy.hpp"
#include "support/toy_instance.hpp"

using namespace papo;
using papo::testing::make_toy_instance;
using papo::testing::random_params;
using papo::testing::toy_arch;

namespace {

Prompt small_prompt(uint64_t seed) {
  TaskSpec spec;
  spec.width = 3;
  spec.height = 3;
  spec.num_colors = 2;
  spec.answer_range = 2;
  return generate_task(spec, RngStream::root(seed));
}

GridImage fully_masked(const GridImage& img) {
  GridImage m = img;
  for (int& c : m.cells) c = vocab::kMasked;
  return m;
}

}  // namespace

TEST(Layout, ParameterCountIsAFunctionOfArch) {
  ArchConfig a;
  const size_t expect = static_cast<size_t>(a.num_symbols * a.d + a.vocab_q * a.d + a.n_max * a.d +
                                            a.max_answer_len * a.d + a.d * a.d + a.h * a.d + a.h +
                                            a.vocab_out * a.h + a.vocab_out);
  EXPECT_EQ(ParamLayout(a).total, expect);
  EXPECT_EQ(PolicyParams(a).size(), expect);
  a.d = 0;
  EXPECT_THROW(a.validate(), ValidationError);
}

TEST(Forward, StepDistributionsAreNormalized) {
  const PolicyParams p = random_params(toy_arch(), 3);
  const Prompt pr = small_prompt(1);
  PolicyForward fwd(p, pr.question, pr.image);
  for (const TokenSeq& prefix : {TokenSeq{}, TokenSeq{4}, TokenSeq{4, 1}}) {
    const auto s = fwd.step(prefix);
    double z = 0;
    for (double lp : s.logp) {
      EXPECT_LE(lp, 0.0);
      z += std::exp(lp);
    }
    EXPECT_NEAR(z, 1.0, 1e-9);
  }
  for (double lp : logprob_sequence(p, pr.question, pr.image, {3, 2, vocab::kEnd})) EXPECT_LE(lp, 0.0);
}

TEST(Forward, ZeroParamsAreUniform) {
  const PolicyParams p(toy_arch());
  const Prompt pr = small_prompt(2);
  for (double lp : logprob_sequence(p, pr.question, pr.image, {1, 5, vocab::kEnd})) {
    EXPECT_NEAR(lp, -std::log(static_cast<double>(vocab::kNumOutputTokens)), 1e-15);
  }
  // Default initialization zeroes the output layer, so it starts uniform too.
  const PolicyParams q = init_params(toy_arch(), RngStream::root(1));
  for (double lp : logprob_sequence(q, pr.question, pr.image, {1, vocab::kEnd})) {
    EXPECT_NEAR(lp, -std::log(static_cast<double>(vocab::kNumOutputTokens)), 1e-12);
  }
}

TEST(Forward, OutOfRangeTokensAreDomainErrors) {
  const PolicyParams p = random_params(toy_arch(), 3);
  const Prompt pr = small_prompt(1);
  EXPECT_THROW(logprob_sequence(p, pr.question, pr.image, {vocab::kNumOutputTokens}), DomainError);
  EXPECT_THROW(logprob_sequence(p, {-1}, pr.image, {1}), DomainError);
  EXPECT_THROW(logprob_sequence(p, pr.question, pr.image, {1, 2, 3, 4}), DomainError);
  EXPECT_THROW(logprob_sequence(p, pr.question, GridImage(4, 4), {1}), DomainError);
}

TEST(Forward, SinglePatchEmbeddingRowMakesMaskingVisible) {
  // Hidden and output layers are live; every patch embedding is zero except
  // one symbol row. The fully masked image shares no symbol with it.
  PolicyParams p = random_params(toy_arch(), 5);
  const ParamLayout l = p.layout();
  std::fill(p.values.begin() + static_cast<long>(l.sym_embed), p.values.begin() + static_cast<long>(l.tok_embed), 0.0);
  std::fill(p.values.begin() + static_cast<long>(l.pos_embed), p.values.begin() + static_cast<long>(l.step_embed), 0.0);
  const Prompt pr = small_prompt(4);
  const int sym = pr.image.cells[0];
  auto row = p.row(l.sym_embed, sym, p.arch.d);
  row[0] = 1.0;
  row[2] = -0.5;

  // Direct computation of the first-step logits from the definition.
  const int d = p.arch.d, h = p.arch.h;
  const int n = pr.image.size();
  int count = 0;
  for (int c : pr.image.cells) count += c == sym;
  auto first_step = [&](const GridImage& img) {
    std::vector<double> c(static_cast<size_t>(d), 0.0);
    for (int tok : pr.question) {
      auto e = p.row(l.tok_embed, tok, d);
      for (int k = 0; k < d; ++k) c[static_cast<size_t>(k)] += e[static_cast<size_t>(k)] / static_cast<double>(pr.question.size());
    }
    auto se = p.row(l.step_embed, 0, d);
    for (int k = 0; k < d; ++k) c[static_cast<size_t>(k)] += se[static_cast<size_t>(k)];
    std::vector<double> q(static_cast<size_t>(d), 0.0);
    for (int r = 0; r < d; ++r) {
      for (int k = 0; k < d; ++k) q[static_cast<size_t>(r)] += p.values[l.w_att + static_cast<size_t>(r * d + k)] * c[static_cast<size_t>(k)];
    }
    // Patches carrying `sym` share one vector x; all others are zero.
    std::vector<double> x(row.begin(), row.end());
    double score = 0;
    for (int k = 0; k < d; ++k) score += x[static_cast<size_t>(k)] * q[static_cast<size_t>(k)];
    score /= std::sqrt(static_cast<double>(d));
    int m = 0;
    for (int cc : img.cells) m += cc == sym;
    const double weight = m * std::exp(score) / (m * std::exp(score) + (n - m));
    std::vector<double> v = c;
    for (int k = 0; k < d; ++k) v[static_cast<size_t>(k)] += weight * x[static_cast<size_t>(k)];
    std::vector<double> hid(static_cast<size_t>(h));
    for (int r = 0; r < h; ++r) {
      double a = p.values[l.b1 + static_cast<size_t>(r)];
      for (int k = 0; k < d; ++k) a += p.values[l.w1 + static_cast<size_t>(r * d + k)] * v[static_cast<size_t>(k)];
      hid[static_cast<size_t>(r)] = std::tanh(a);
    }
    std::vector<double> logits(static_cast<size_t>(p.arch.vocab_out));
    double mx = -INFINITY;
    for (int o = 0; o < p.arch.vocab_out; ++o) {
      double a = p.values[l.b2 + static_cast<size_t>(o)];
      for (int k = 0; k < h; ++k) a += p.values[l.w2 + static_cast<size_t>(o * h + k)] * hid[static_cast<size_t>(k)];
      logits[static_cast<size_t>(o)] = a;
      mx = std::max(mx, a);
    }
    double z = 0;
    for (double a : logits) z += std::exp(a - mx);
    for (double& a : logits) a = a - mx - std::log(z);
    return logits;
  };
  ASSERT_GT(count, 0);
  const GridImage masked = fully_masked(pr.image);
  const auto direct = first_step(pr.image), direct_mask = first_step(masked);
  const auto model = next_token_logprobs(p, pr.question, pr.image, {});
  const auto model_mask = next_token_logprobs(p, pr.question, masked, {});
  double diff = 0;
  for (size_t o = 0; o < direct.size(); ++o) {
    EXPECT_NEAR(model[o], direct[o], 1e-12);
    EXPECT_NEAR(model_mask[o], direct_mask[o], 1e-12);
    diff = std::max(diff, std::abs(model[o] - model_mask[o]));
  }
  EXPECT_GT(diff, 1e-6);
}

TEST(Forward, PatchPermutationWithPositionsIsInvariant) {
  PolicyParams p = random_params(toy_arch(), 8);
  const Prompt pr = small_prompt(6);
  const TokenSeq resp = {2, 1, vocab::kEnd};
  const auto base = logprob_sequence(p, pr.question, pr.image, resp);
  GridImage img = pr.image;
  const int i = 1, j = 7;
  std::swap(img.cells[static_cast<size_t>(i)], img.cells[static_cast<size_t>(j)]);
  const ParamLayout l = p.layout();
  auto ri = p.row(l.pos_embed, i, p.arch.d), rj = p.row(l.pos_embed, j, p.arch.d);
  std::swap_ranges(ri.begin(), ri.end(), rj.begin());
  const auto perm = logprob_sequence(p, pr.question, img, resp);
  for (size_t t = 0; t < base.size(); ++t) EXPECT_NEAR(base[t], perm[t], 1e-13);
}

TEST(Forward, BlindPolicyFixedPoint) {
  PolicyParams p = random_params(toy_arch(), 9);
  const ParamLayout l = p.layout();
  std::fill(p.values.begin() + static_cast<long>(l.sym_embed), p.values.begin() + static_cast<long>(l.tok_embed), 0.0);
  std::fill(p.values.begin() + static_cast<long>(l.pos_embed), p.values.begin() + static_cast<long>(l.step_embed), 0.0);
  for (uint64_t s = 0; s < 20; ++s) {
    const Prompt pr = small_prompt(s);
    const GridImage masked = random_mask(pr.image, 0.6, RngStream::root(s + 100)).first;
    const TokenSeq resp = sample_response(p, pr.question, pr.image, RngStream::root(s), 1.0);
    const auto a = logprob_sequence(p, pr.question, pr.image, resp);
    const auto b = logprob_sequence(p, pr.question, masked, resp);
    for (double r : perception_ratios(a, b)) ASSERT_EQ(r, 1.0);
    for (size_t t = 0; t < a.size(); ++t) ASSERT_EQ(kl_k3_from_log(a[t] - b[t]), 0.0);
  }
}

TEST(Forward, Deterministic) {
  const PolicyParams p = random_params(toy_arch(), 10);
  const Prompt pr = small_prompt(3);
  EXPECT_EQ(logprob_sequence(p, pr.question, pr.image, {1, 2}), logprob_sequence(p, pr.question, pr.image, {1, 2}));
}

TEST(Sampling, SameStreamSameResponseAndGreedy) {
  const PolicyParams p = random_params(toy_arch(), 11);
  const Prompt pr = small_prompt(3);
  const RngStream s = RngStream::root(42);
  EXPECT_EQ(sample_response(p, pr.question, pr.image, s, 1.0), sample_response(p, pr.question, pr.image, s, 1.0));
  // Greedy decoding follows the argmax at every step.
  const TokenSeq g = sample_response(p, pr.question, pr.image, s, 0.0);
  TokenSeq prefix;
  for (int tok : g) {
    const auto lp = next_token_logprobs(p, pr.question, pr.image, prefix);
    EXPECT_EQ(tok, std::max_element(lp.begin(), lp.end()) - lp.begin());
    prefix.push_back(tok);
  }
  EXPECT_EQ(g, sample_response(p, pr.question, pr.image, RngStream::root(7), 0.0));
  // Very low temperature agrees with greedy.
  EXPECT_EQ(g, sample_response(p, pr.question, pr.image, s, 1e-6));
  EXPECT_THROW(sample_response(p, pr.question, pr.image, s, -1.0), DomainError);
}

TEST(Sampling, FirstTokenFrequenciesMatchProbabilities) {
  const PolicyParams p = random_params(toy_arch(), 12);
  const Prompt pr = small_prompt(5);
  const auto lp = next_token_logprobs(p, pr.question, pr.image, {});
  const int n = 10000;
  std::vector<int> counts(lp.size(), 0);
  for (int i = 0; i < n; ++i) {
    const TokenSeq r = sample_response(p, pr.question, pr.image, derive_stream(RngStream::root(77), "s", static_cast<uint64_t>(i)), 1.0);
    ++counts[static_cast<size_t>(r[0])];
  }
  for (size_t k = 0; k < lp.size(); ++k) {
    const double pk = std::exp(lp[k]);
    const double sigma = std::sqrt(n * pk * (1 - pk));
    EXPECT_LE(std::abs(counts[k] - n * pk), 3 * sigma + 1e-9) << "token " << k;
  }
}

TEST(Gradient, MatchesFiniteDifferencesForEveryVariant) {
  for (Algorithm a : {Algorithm::grpo, Algorithm::dapo, Algorithm::papo_grpo, Algorithm::papo_dapo}) {
    for (bool mask_grad : {false, true}) {
      const auto inst = make_toy_instance(a, mask_grad, 21);
      const auto rep = papo::testing::finite_difference_check(inst);
      EXPECT_LT(rep.max_rel_error, 1e-4) << to_string(a) << " mask_grad=" << mask_grad << " worst index "
                                         << rep.worst_index;
    }
  }
}

TEST(Gradient, VanishesWithZeroCoefficientsAndAdvantages) {
  auto inst = make_toy_instance(Algorithm::grpo, false, 3);
  inst.cfg.beta = 0;
  for (auto& a : inst.advantages) std::fill(a.begin(), a.end(), 0.0);
  const auto gr = loss_gradient(inst.params, inst.groups, inst.advantages, inst.cfg);
  for (double g : gr.grad) EXPECT_EQ(g, 0.0);
}

TEST(Gradient, HighClippedTokenContributesNothing) {
  auto inst = make_toy_instance(Algorithm::grpo, false, 4);
  inst.cfg.beta = 0;
  inst.groups.resize(1);
  inst.advantages = {{1.0, 0.0}};
  RolloutGroup& g = inst.groups[0];
  g.responses = {{3}, {4}};
  for (size_t i = 0; i < 2; ++i) {
    const auto lp = logprob_sequence(inst.params, g.prompt.question, g.prompt.image, g.responses[i]);
    g.logp_new[i] = lp;
    g.logp_ref[i] = lp;
    g.logp_mask[i] = lp;
    g.logp_old[i] = lp;
  }
  g.logp_old[0] = {g.logp_new[0][0] - std::log(1.5)};  // ratio 1.5 > 1 + eps_h
  const auto gr = loss_gradient(inst.params, inst.groups, inst.advantages, inst.cfg);
  for (double x : gr.grad) EXPECT_EQ(x, 0.0);
  EXPECT_DOUBLE_EQ(gr.breakdown.clip_high_fraction, 0.5);
}

TEST(Gradient, NonFiniteInputsAreNumericErrors) {
  auto inst = make_toy_instance(Algorithm::papo_grpo, false, 5);
  inst.groups[0].logp_mask[0][0] = -1e6;  // perception ratio overflows
  EXPECT_THROW(loss_gradient(inst.params, inst.groups, inst.advantages, inst.cfg), NumericError);
}

TEST(Checkpoint, PolicyRoundTripIsBitExact) {
  const PolicyParams p = random_params(toy_arch(), 13);
  const auto path = (std::filesystem::temp_directory_path() / "papo_policy_roundtrip.ckpt").string();
  save_policy(path, p);
  const PolicyParams q = load_policy(path);
  EXPECT_EQ(p.arch, q.arch);
  ASSERT_EQ(p.values.size(), q.values.size());
  EXPECT_EQ(std::memcmp(p.values.data(), q.values.data(), p.values.size() * sizeof(double)), 0);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreLoadErrors) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "papo_policy_bad.ckpt").string();
  {
    std::ofstream os(path);
    os << "NOT-A-CHECKPOINT\n";
  }
  EXPECT_THROW(load_policy(path), LoadError);
  save_policy(path, random_params(toy_arch(), 1));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  EXPECT_THROW(load_policy(path), LoadError);
  EXPECT_THROW(load_policy((dir / "papo_missing.ckpt").string()), LoadError);
  std::filesystem::remove(path);
}
