#pragma once

// Loss kernels for GRPO, DAPO and their perception-aware variants.
//
// Every loss is returned as a minimization target (negated objective). The
// breakdown fields keep the objective's sign so they read like the terms in
// the objective: surrogate, kl_ref, kl_prcp, ent_pi, ent_mask.
//
// Besides the scalar, each loss produces per-token weights
// dLoss/dlogp_new and dLoss/dlogp_mask. The policy turns those into parameter
// gradients, so this header stays free of any model code.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "papo/domain.hpp"
#include "papo/errors.hpp"

namespace papo {

enum class Algorithm { grpo, dapo, papo_grpo, papo_dapo };

// Sign convention for the double-entropy term. `confidence` adds +eta*mean(logp)
// to the objective (rewards confident sequences, keeps entropy low); `literal`
// adds -eta*mean(logp) as the formula is printed.
enum class EntropySign { confidence, literal };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::grpo: return "grpo";
    case Algorithm::dapo: return "dapo";
    case Algorithm::papo_grpo: return "papo_grpo";
    case Algorithm::papo_dapo: return "papo_dapo";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "grpo") return Algorithm::grpo;
  if (s == "dapo") return Algorithm::dapo;
  if (s == "papo_grpo") return Algorithm::papo_grpo;
  if (s == "papo_dapo") return Algorithm::papo_dapo;
  throw DomainError("unknown algorithm '" + std::string(s) + "'");
}

inline std::string_view to_string(EntropySign s) {
  return s == EntropySign::confidence ? "confidence" : "literal";
}

inline EntropySign parse_entropy_sign(std::string_view s) {
  if (s == "confidence") return EntropySign::confidence;
  if (s == "literal") return EntropySign::literal;
  throw DomainError("unknown entropy sign '" + std::string(s) + "'");
}

inline bool is_dapo_family(Algorithm a) { return a == Algorithm::dapo || a == Algorithm::papo_dapo; }
inline bool is_perception_aware(Algorithm a) {
  return a == Algorithm::papo_grpo || a == Algorithm::papo_dapo;
}

struct ObjectiveConfig {
  Algorithm algorithm = Algorithm::grpo;
  double gamma = 0.0;  // perception KL weight
  double beta = 0.01;  // reference KL weight
  double eta1 = 0.0;   // entropy weight on pi
  double eta2 = 0.0;   // entropy weight on pi_mask
  double eps_l = 0.2;
  double eps_h = 0.3;
  double std_floor = 1e-6;
  bool mask_branch_grad = false;
  // Upper bound on the per-token perception k3 value; 0 leaves it unbounded.
  // Tokens above the bound contribute a constant and no gradient.
  double kl_prcp_clip = 0.0;
  EntropySign entropy_sign = EntropySign::confidence;

  // Throws ValidationError naming the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError(m); };
    if (!(gamma >= 0)) fail("objective.gamma must be >= 0");
    if (!(beta >= 0)) fail("objective.beta must be >= 0");
    if (!(eta1 >= 0) || !(eta2 >= 0)) fail("objective.eta1/eta2 must be >= 0");
    if (!(eps_l > 0 && eps_l < 1)) fail("objective.eps_l must lie in (0,1)");
    if (!(eps_h > 0 && eps_h < 1)) fail("objective.eps_h must lie in (0,1)");
    if (!(eps_h >= eps_l)) fail("clip-higher invariant violated: objective.eps_h must be >= objective.eps_l");
    if (!(std_floor > 0)) fail("objective.std_floor must be > 0");
    if (!(kl_prcp_clip >= 0)) fail("objective.kl_prcp_clip must be >= 0");
    if (is_dapo_family(algorithm) && beta != 0.0) {
      fail("objective.beta must be 0 for " + std::string(to_string(algorithm)) +
           " (no reference KL penalty)");
    }
    if (!is_perception_aware(algorithm) && (gamma != 0.0 || eta1 != 0.0 || eta2 != 0.0)) {
      fail("objective.gamma/eta1/eta2 must be 0 for " + std::string(to_string(algorithm)));
    }
  }

  double entropy_sign_factor() const { return entropy_sign == EntropySign::confidence ? 1.0 : -1.0; }

  // Default coefficients per algorithm.
  static ObjectiveConfig preset(Algorithm a) {
    ObjectiveConfig c;
    c.algorithm = a;
    switch (a) {
      case Algorithm::grpo:
        c.beta = 0.01, c.eps_l = 0.2, c.eps_h = 0.3;
        break;
      case Algorithm::papo_grpo:
        c.gamma = 0.02, c.beta = 0.01, c.eps_l = 0.2, c.eps_h = 0.3;
        break;
      case Algorithm::dapo:
        c.beta = 0.0, c.eps_l = 0.2, c.eps_h = 0.28;
        break;
      case Algorithm::papo_dapo:
        c.gamma = 0.01, c.eta1 = 0.03, c.eta2 = 0.03, c.beta = 0.0, c.eps_l = 0.2, c.eps_h = 0.28;
        break;
    }
    return c;
  }
};

struct LossBreakdown {
  double total = 0.0;
  double surrogate = 0.0;
  double kl_ref = 0.0;
  double kl_prcp = 0.0;
  double ent_pi = 0.0;
  double ent_mask = 0.0;
  double clip_high_fraction = 0.0;
};

// dLoss/dlogp for each response token.
struct TokenWeights {
  LogProbTable d_logp_new;
  LogProbTable d_logp_mask;
};

struct LossResult {
  LossBreakdown breakdown;
  TokenWeights weights;
  size_t clipped_high_tokens = 0;
  size_t tokens = 0;
};

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

inline std::vector<double> normalize_advantages(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw InvalidGroupError("normalize_advantages: group size must be >= 2");
  if (!(std_floor > 0)) throw DomainError("normalize_advantages: std_floor must be > 0");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  const double denom = std::max(sd, std_floor);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / denom);
  return out;
}

struct SurrogateValue {
  double value = 0.0;
  bool clipped_high = false;
  // d value / d ratio; zero whenever min() picks the clipped constant branch.
  double d_ratio = 0.0;
};

inline SurrogateValue clipped_surrogate(double ratio, double advantage, double eps_l, double eps_h) {
  if (!(ratio > 0)) throw DomainError("clipped_surrogate: ratio must be > 0");
  const double clipped = std::clamp(ratio, 1.0 - eps_l, 1.0 + eps_h);
  const double unclipped_term = ratio * advantage;
  const double clipped_term = clipped * advantage;
  SurrogateValue out;
  if (unclipped_term <= clipped_term) {
    out.value = unclipped_term;
    out.d_ratio = advantage;
  } else {
    out.value = clipped_term;
    out.d_ratio = clipped == ratio ? advantage : 0.0;
  }
  out.clipped_high = ratio > 1.0 + eps_h && advantage > 0;
  return out;
}

inline double kl_k3(double ratio) {
  if (!(ratio > 0)) throw DomainError("kl_k3: ratio must be > 0");
  return ratio - std::log(ratio) - 1.0;
}

// k3 evaluated from a log-ratio; avoids a round trip through exp/log.
inline double kl_k3_from_log(double log_ratio) { return std::exp(log_ratio) - log_ratio - 1.0; }

// Perception k3 as the objective sees it: bounded above by cap when cap > 0.
inline double perception_k3(double log_ratio, double cap) {
  const double v = kl_k3_from_log(log_ratio);
  return cap > 0 && !(v <= cap) ? cap : v;
}

inline std::vector<double> perception_ratios(std::span<const double> logp_new, std::span<const double> logp_mask) {
  if (logp_new.size() != logp_mask.size()) throw ShapeError("perception_ratios: length mismatch");
  std::vector<double> out(logp_new.size());
  for (size_t t = 0; t < out.size(); ++t) out[t] = std::exp(logp_new[t] - logp_mask[t]);
  return out;
}

inline double sequence_entropy_term(std::span<const double> logp) {
  if (logp.empty()) throw ShapeError("sequence_entropy_term: empty sequence");
  return std::accumulate(logp.begin(), logp.end(), 0.0) / static_cast<double>(logp.size());
}

inline double exact_kl_categorical(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw DomainError("exact_kl_categorical: support mismatch");
  double sp = 0.0, sq = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0) || !(q[i] > 0)) throw DomainError("exact_kl_categorical: nonpositive mass");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-12 || std::abs(sq - 1.0) > 1e-12) {
    throw DomainError("exact_kl_categorical: distribution not normalized");
  }
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

// ---------------------------------------------------------------------------
// Composite objectives
// ---------------------------------------------------------------------------

namespace detail {

inline void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in loss term '") + term + "'");
}

// Per-token objective pieces shared by both averaging schemes.
struct TokenTerms {
  double surrogate;
  double kl_ref;
  double kl_prcp;
  double logp_new;
  double logp_mask;
  bool clipped_high;
  double d_obj_d_logp_new;
  double d_obj_d_logp_mask;
};

inline TokenTerms token_terms(double lp_new, double lp_old, double lp_ref, double lp_mask, double adv,
                              const ObjectiveConfig& cfg) {
  TokenTerms t{};
  const double ratio = std::exp(lp_new - lp_old);
  const SurrogateValue s = clipped_surrogate(ratio, adv, cfg.eps_l, cfg.eps_h);
  t.surrogate = s.value;
  t.clipped_high = s.clipped_high;

  // Reference KL in the k3 form with ratio pi_ref / pi_theta.
  const double log_ref_ratio = lp_ref - lp_new;
  const double ref_ratio = std::exp(log_ref_ratio);
  t.kl_ref = ref_ratio - log_ref_ratio - 1.0;

  const double log_prcp = lp_new - lp_mask;
  const double prcp = std::exp(log_prcp);
  t.kl_prcp = prcp - log_prcp - 1.0;
  const bool prcp_capped = cfg.kl_prcp_clip > 0 && t.kl_prcp > cfg.kl_prcp_clip;
  if (prcp_capped) t.kl_prcp = cfg.kl_prcp_clip;
  const double d_prcp = prcp_capped ? 0.0 : prcp - 1.0;

  t.logp_new = lp_new;
  t.logp_mask = lp_mask;

  const double sgn = cfg.entropy_sign_factor();
  // d surrogate / d logp_new = d_ratio * ratio
  // d k3(pi_ref/pi) / d logp_new = 1 - ref_ratio
  // d k3(pi/pi_mask) / d logp_new = prcp - 1, and / d logp_mask = 1 - prcp
  t.d_obj_d_logp_new = s.d_ratio * ratio - cfg.beta * (1.0 - ref_ratio) + cfg.gamma * d_prcp + sgn * cfg.eta1;
  t.d_obj_d_logp_mask = -cfg.gamma * d_prcp + sgn * cfg.eta2;

  require_finite(t.surrogate, "surrogate");
  require_finite(t.kl_ref, "kl_ref");
  require_finite(t.kl_prcp, "kl_prcp");
  return t;
}

inline void check_group(const RolloutGroup& g, std::span<const double> adv) {
  g.validate();
  if (adv.size() != g.size()) throw ShapeError("advantages not aligned with group");
}

inline double weighted_total(const LossBreakdown& b, const ObjectiveConfig& cfg) {
  const double sgn = cfg.entropy_sign_factor();
  return -(b.surrogate - cfg.beta * b.kl_ref + cfg.gamma * b.kl_prcp + sgn * cfg.eta1 * b.ent_pi +
           sgn * cfg.eta2 * b.ent_mask);
}

}  // namespace detail

// Response-level averaging: mean over responses of the per-response token mean.
inline LossResult papo_grpo_loss_weights(const RolloutGroup& group, std::span<const double> advantages,
                                         const ObjectiveConfig& cfg) {
  if (is_dapo_family(cfg.algorithm)) throw DomainError("papo_grpo_loss: algorithm must be grpo or papo_grpo");
  detail::check_group(group, advantages);
  const size_t g = group.size();
  LossResult out;
  out.weights.d_logp_new.resize(g);
  out.weights.d_logp_mask.resize(g);
  LossBreakdown& b = out.breakdown;
  size_t clipped = 0, tokens = 0;
  const double inv_g = 1.0 / static_cast<double>(g);
  for (size_t i = 0; i < g; ++i) {
    const size_t len = group.responses[i].size();
    const double w = inv_g / static_cast<double>(len);
    out.weights.d_logp_new[i].resize(len);
    out.weights.d_logp_mask[i].resize(len);
    for (size_t t = 0; t < len; ++t) {
      const auto tt = detail::token_terms(group.logp_new[i][t], group.logp_old[i][t], group.logp_ref[i][t],
                                          group.logp_mask[i][t], advantages[i], cfg);
      b.surrogate += w * tt.surrogate;
      b.kl_ref += w * tt.kl_ref;
      b.kl_prcp += w * tt.kl_prcp;
      b.ent_pi += w * tt.logp_new;
      b.ent_mask += w * tt.logp_mask;
      clipped += tt.clipped_high ? 1 : 0;
      out.weights.d_logp_new[i][t] = -w * tt.d_obj_d_logp_new;
      out.weights.d_logp_mask[i][t] = -w * tt.d_obj_d_logp_mask;
    }
    tokens += len;
  }
  b.clip_high_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
  b.total = detail::weighted_total(b, cfg);
  detail::require_finite(b.total, "total");
  out.clipped_high_tokens = clipped;
  out.tokens = tokens;
  return out;
}

inline LossBreakdown papo_grpo_loss(const RolloutGroup& group, std::span<const double> advantages,
                                    const ObjectiveConfig& cfg) {
  return papo_grpo_loss_weights(group, advantages, cfg).breakdown;
}

// Token-level averaging across the whole batch with weight 1 / sum_i |o_i|.
// Every group must have mixed correctness.
inline std::vector<LossResult> papo_dapo_loss_weights(std::span<const RolloutGroup> groups,
                                                      std::span<const std::vector<double>> advantages,
                                                      const ObjectiveConfig& cfg, LossBreakdown* breakdown) {
  if (!is_dapo_family(cfg.algorithm)) throw DomainError("papo_dapo_loss: algorithm must be dapo or papo_dapo");
  if (groups.size() != advantages.size()) throw ShapeError("papo_dapo_loss: advantages not aligned with groups");
  if (groups.empty()) throw ShapeError("papo_dapo_loss: empty batch");
  size_t total_tokens = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    detail::check_group(groups[k], advantages[k]);
    const int correct = groups[k].num_correct();
    if (!(correct > 0 && correct < static_cast<int>(groups[k].size()))) {
      throw ConstraintError("papo_dapo_loss: group " + std::to_string(k) + " has " + std::to_string(correct) +
                            " correct of " + std::to_string(groups[k].size()) +
                            "; mixed correctness (0 < #correct < G) required");
    }
    total_tokens += groups[k].token_count();
  }
  const double w = 1.0 / static_cast<double>(total_tokens);
  std::vector<LossResult> per_group(groups.size());
  LossBreakdown b;
  size_t clipped = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    const RolloutGroup& g = groups[k];
    auto& wt = per_group[k].weights;
    wt.d_logp_new.resize(g.size());
    wt.d_logp_mask.resize(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
      const size_t len = g.responses[i].size();
      wt.d_logp_new[i].resize(len);
      wt.d_logp_mask[i].resize(len);
      for (size_t t = 0; t < len; ++t) {
        const auto tt = detail::token_terms(g.logp_new[i][t], g.logp_old[i][t], g.logp_ref[i][t],
                                            g.logp_mask[i][t], advantages[k][i], cfg);
        b.surrogate += w * tt.surrogate;
        b.kl_ref += w * tt.kl_ref;
        b.kl_prcp += w * tt.kl_prcp;
        b.ent_pi += w * tt.logp_new;
        b.ent_mask += w * tt.logp_mask;
        clipped += tt.clipped_high ? 1 : 0;
        wt.d_logp_new[i][t] = -w * tt.d_obj_d_logp_new;
        wt.d_logp_mask[i][t] = -w * tt.d_obj_d_logp_mask;
      }
    }
  }
  b.clip_high_fraction = static_cast<double>(clipped) / static_cast<double>(total_tokens);
  b.total = detail::weighted_total(b, cfg);
  detail::require_finite(b.total, "total");
  if (breakdown) *breakdown = b;
  return per_group;
}

inline LossBreakdown papo_dapo_loss(std::span<const RolloutGroup> groups,
                                    std::span<const std::vector<double>> advantages, const ObjectiveConfig& cfg) {
  LossBreakdown b;
  papo_dapo_loss_weights(groups, advantages, cfg, &b);
  return b;
}

// Batch loss for any algorithm. GRPO-family batches average the per-group
// losses; DAPO-family batches use token-level averaging over all groups.
inline std::vector<LossResult> batch_loss_weights(std::span<const RolloutGroup> groups,
                                                  std::span<const std::vector<double>> advantages,
                                                  const ObjectiveConfig& cfg, LossBreakdown* breakdown) {
  if (is_dapo_family(cfg.algorithm)) return papo_dapo_loss_weights(groups, advantages, cfg, breakdown);
  if (groups.size() != advantages.size()) throw ShapeError("batch loss: advantages not aligned with groups");
  if (groups.empty()) throw ShapeError("batch loss: empty batch");
  std::vector<LossResult> per_group;
  per_group.reserve(groups.size());
  LossBreakdown b;
  const double inv = 1.0 / static_cast<double>(groups.size());
  size_t clipped = 0;
  size_t tokens = 0;
  for (size_t k = 0; k < groups.size(); ++k) {
    LossResult r = papo_grpo_loss_weights(groups[k], advantages[k], cfg);
    clipped += r.clipped_high_tokens;
    tokens += r.tokens;
    b.surrogate += inv * r.breakdown.surrogate;
    b.kl_ref += inv * r.breakdown.kl_ref;
    b.kl_prcp += inv * r.breakdown.kl_prcp;
    b.ent_pi += inv * r.breakdown.ent_pi;
    b.ent_mask += inv * r.breakdown.ent_mask;
    for (auto* table : {&r.weights.d_logp_new, &r.weights.d_logp_mask}) {
      for (auto& row : *table) {
        for (double& x : row) x *= inv;
      }
    }
    per_group.push_back(std::move(r));
  }
  b.clip_high_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
  b.total = detail::weighted_total(b, cfg);
  if (breakdown) *breakdown = b;
  return per_group;
}

}  // namespace papo
