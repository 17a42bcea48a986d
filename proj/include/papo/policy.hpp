#pragma once

// A small autoregressive policy over (question, grid image) pairs.
//
// Per response step t:
//   u    = mean of question-token embeddings
//   c_t  = u + mean of embeddings of tokens emitted so far + step embedding[t]
//   x_j  = symbol embedding[cell_j] + patch position embedding[j]
//   a_j  = x_j . (W_att c_t) / sqrt(d),  alpha = softmax(a)
//   z    = sum_j alpha_j x_j
//   h    = tanh(W1 (z + c_t) + b1)
//   out  = log_softmax(W2 h + b2)
//
// Gradients are hand-derived reverse-mode passes over exactly this graph.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "papo/domain.hpp"
#include "papo/errors.hpp"
#include "papo/objectives.hpp"

namespace papo {

struct ArchConfig {
  int d = 16;
  int h = 32;
  int vocab_q = vocab::kNumTokens;    // question / response token embeddings
  int vocab_out = vocab::kNumOutputTokens;  // output classes; token k is output k
  int num_symbols = vocab::kNumPatchSymbols;
  int n_max = 64;
  int max_answer_len = 3;

  void validate() const {
    if (d <= 0 || h <= 0 || vocab_q <= 0 || vocab_out <= 0 || num_symbols <= 0 || n_max <= 0 ||
        max_answer_len <= 0) {
      throw ValidationError("arch: all sizes must be positive");
    }
    if (vocab_out > vocab_q) throw ValidationError("arch: vocab_out must not exceed vocab_q");
    if (vocab_out <= vocab::kEnd) throw ValidationError("arch: vocab_out must include the END token");
  }
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// Offsets of each parameter block inside the flat array. The order is part of
// the checkpoint format.
struct ParamLayout {
  size_t sym_embed, tok_embed, pos_embed, step_embed, w_att, w1, b1, w2, b2, total;

  explicit ParamLayout(const ArchConfig& a) {
    const auto d = static_cast<size_t>(a.d), h = static_cast<size_t>(a.h);
    size_t o = 0;
    sym_embed = o, o += static_cast<size_t>(a.num_symbols) * d;
    tok_embed = o, o += static_cast<size_t>(a.vocab_q) * d;
    pos_embed = o, o += static_cast<size_t>(a.n_max) * d;
    step_embed = o, o += static_cast<size_t>(a.max_answer_len) * d;
    w_att = o, o += d * d;
    w1 = o, o += h * d;
    b1 = o, o += h;
    w2 = o, o += static_cast<size_t>(a.vocab_out) * h;
    b2 = o, o += static_cast<size_t>(a.vocab_out);
    total = o;
  }
};

struct PolicyParams {
  ArchConfig arch;
  std::vector<double> values;

  PolicyParams() = default;
  explicit PolicyParams(const ArchConfig& a) : arch(a), values(ParamLayout(a).total, 0.0) { a.validate(); }

  ParamLayout layout() const { return ParamLayout(arch); }
  size_t size() const { return values.size(); }

  std::span<const double> row(size_t block, int index, int width) const {
    return {values.data() + block + static_cast<size_t>(index) * static_cast<size_t>(width),
            static_cast<size_t>(width)};
  }
  std::span<double> row(size_t block, int index, int width) {
    return {values.data() + block + static_cast<size_t>(index) * static_cast<size_t>(width),
            static_cast<size_t>(width)};
  }

  std::span<double> symbol_embeddings() {
    const auto l = layout();
    return {values.data() + l.sym_embed, l.tok_embed - l.sym_embed};
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

// Scaled-normal initialization. Output layer starts at zero so the initial
// policy is uniform over the output vocabulary.
inline PolicyParams init_params(const ArchConfig& arch, const RngStream& stream, double scale = 1.0) {
  PolicyParams p(arch);
  const ParamLayout l = p.layout();
  Rng rng(stream);
  auto fill = [&](size_t begin, size_t end, double sd) {
    for (size_t i = begin; i < end; ++i) p.values[i] = sd * rng.normal();
  };
  const double d = arch.d;
  fill(l.sym_embed, l.tok_embed, scale * 1.0 / std::sqrt(d));
  fill(l.tok_embed, l.pos_embed, scale * 1.0 / std::sqrt(d));
  fill(l.pos_embed, l.step_embed, scale * 0.1 / std::sqrt(d));
  fill(l.step_embed, l.w_att, scale * 1.0 / std::sqrt(d));
  fill(l.w_att, l.w1, scale * 1.0 / std::sqrt(d));
  fill(l.w1, l.b1, scale * 1.0 / std::sqrt(d));
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace detail {

inline void log_softmax_inplace(std::span<double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  const double lse = m + std::log(s);
  for (double& x : v) x -= lse;
}

}  // namespace detail

struct StepCache {
  std::vector<double> c;      // context (d)
  std::vector<double> query;  // W_att c (d)
  std::vector<double> alpha;  // attention weights (N)
  std::vector<double> v;      // z + c (d)
  std::vector<double> hidden; // tanh output (h)
  std::vector<double> logp;   // log-softmax over outputs (vocab_out)
};

// Image-dependent and question-dependent quantities shared by every step.
struct Encoded {
  int n = 0;
  std::vector<double> patches;  // n x d
  std::vector<double> question; // d
};

class PolicyForward {
 public:
  PolicyForward(const PolicyParams& params, const TokenSeq& question, const GridImage& image)
      : p_(params), a_(params.arch), l_(params.layout()), question_(question), image_(image) {
    check_tokens(question, a_.vocab_q, "question");
    image.validate();
    if (image.size() > a_.n_max) throw DomainError("image has more patches than arch.n_max");
    const int d = a_.d;
    enc_.n = image.size();
    enc_.patches.assign(static_cast<size_t>(enc_.n) * static_cast<size_t>(d), 0.0);
    for (int j = 0; j < enc_.n; ++j) {
      const int sym = image.cells[static_cast<size_t>(j)];
      if (sym >= a_.num_symbols) throw DomainError("patch symbol outside arch.num_symbols");
      auto e = p_.row(l_.sym_embed, sym, d);
      auto pos = p_.row(l_.pos_embed, j, d);
      double* x = enc_.patches.data() + static_cast<size_t>(j) * static_cast<size_t>(d);
      for (int k = 0; k < d; ++k) x[k] = e[static_cast<size_t>(k)] + pos[static_cast<size_t>(k)];
    }
    enc_.question.assign(static_cast<size_t>(d), 0.0);
    for (int tok : question) {
      auto e = p_.row(l_.tok_embed, tok, d);
      for (int k = 0; k < d; ++k) enc_.question[static_cast<size_t>(k)] += e[static_cast<size_t>(k)];
    }
    for (double& x : enc_.question) x /= static_cast<double>(question.size());
  }

  // Output log-probabilities at step t given the emitted prefix.
  StepCache step(std::span<const int> prefix) const {
    const int t = static_cast<int>(prefix.size());
    if (t >= a_.max_answer_len) throw DomainError("response longer than arch.max_answer_len");
    const auto d = static_cast<size_t>(a_.d);
    const auto h = static_cast<size_t>(a_.h);
    StepCache s;
    s.c = enc_.question;
    if (t > 0) {
      const double inv = 1.0 / static_cast<double>(t);
      for (int tok : prefix) {
        auto e = p_.row(l_.tok_embed, tok, a_.d);
        for (size_t k = 0; k < d; ++k) s.c[k] += inv * e[k];
      }
    }
    auto se = p_.row(l_.step_embed, t, a_.d);
    for (size_t k = 0; k < d; ++k) s.c[k] += se[k];

    s.query.assign(d, 0.0);
    const double* wa = p_.values.data() + l_.w_att;
    for (size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (size_t k = 0; k < d; ++k) acc += wa[r * d + k] * s.c[k];
      s.query[r] = acc;
    }

    const auto n = static_cast<size_t>(enc_.n);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    s.alpha.assign(n, 0.0);
    double amax = -INFINITY;
    for (size_t j = 0; j < n; ++j) {
      const double* x = enc_.patches.data() + j * d;
      double acc = 0.0;
      for (size_t k = 0; k < d; ++k) acc += x[k] * s.query[k];
      s.alpha[j] = acc * inv_sqrt_d;
      amax = std::max(amax, s.alpha[j]);
    }
    double asum = 0.0;
    for (double& a : s.alpha) {
      a = std::exp(a - amax);
      asum += a;
    }
    for (double& a : s.alpha) a /= asum;

    s.v = s.c;
    for (size_t j = 0; j < n; ++j) {
      const double* x = enc_.patches.data() + j * d;
      for (size_t k = 0; k < d; ++k) s.v[k] += s.alpha[j] * x[k];
    }

    s.hidden.assign(h, 0.0);
    const double* w1 = p_.values.data() + l_.w1;
    const double* b1 = p_.values.data() + l_.b1;
    for (size_t r = 0; r < h; ++r) {
      double acc = b1[r];
      for (size_t k = 0; k < d; ++k) acc += w1[r * d + k] * s.v[k];
      s.hidden[r] = std::tanh(acc);
    }

    const auto vo = static_cast<size_t>(a_.vocab_out);
    s.logp.assign(vo, 0.0);
    const double* w2 = p_.values.data() + l_.w2;
    const double* b2 = p_.values.data() + l_.b2;
    for (size_t r = 0; r < vo; ++r) {
      double acc = b2[r];
      for (size_t k = 0; k < h; ++k) acc += w2[r * h + k] * s.hidden[k];
      s.logp[r] = acc;
    }
    detail::log_softmax_inplace(s.logp);
    return s;
  }

  // Accumulates into `grad` the gradient of sum_t weight[t] * logp(response[t]).
  void backward(const TokenSeq& response, const std::vector<StepCache>& caches, std::span<const double> weights,
                std::span<double> grad) const {
    const auto d = static_cast<size_t>(a_.d);
    const auto h = static_cast<size_t>(a_.h);
    const auto vo = static_cast<size_t>(a_.vocab_out);
    const auto n = static_cast<size_t>(enc_.n);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double* wa = p_.values.data() + l_.w_att;
    const double* w1 = p_.values.data() + l_.w1;
    const double* w2 = p_.values.data() + l_.w2;

    std::vector<double> d_patches(n * d, 0.0);
    std::vector<double> d_question(d, 0.0);
    std::vector<double> dlogits(vo), dh(h), dv(d), dc(d), dq(d), dalpha(n);

    for (size_t t = 0; t < response.size(); ++t) {
      const double w = weights[t];
      if (w == 0.0) continue;
      const StepCache& s = caches[t];
      const auto tok = static_cast<size_t>(response[t]);

      // d logp[tok] / d logits = onehot - softmax
      for (size_t r = 0; r < vo; ++r) dlogits[r] = -w * std::exp(s.logp[r]);
      dlogits[tok] += w;

      double* gw2 = grad.data() + l_.w2;
      double* gb2 = grad.data() + l_.b2;
      std::fill(dh.begin(), dh.end(), 0.0);
      for (size_t r = 0; r < vo; ++r) {
        const double g = dlogits[r];
        gb2[r] += g;
        for (size_t k = 0; k < h; ++k) {
          gw2[r * h + k] += g * s.hidden[k];
          dh[k] += g * w2[r * h + k];
        }
      }

      double* gw1 = grad.data() + l_.w1;
      double* gb1 = grad.data() + l_.b1;
      std::fill(dv.begin(), dv.end(), 0.0);
      for (size_t r = 0; r < h; ++r) {
        const double g = dh[r] * (1.0 - s.hidden[r] * s.hidden[r]);
        gb1[r] += g;
        for (size_t k = 0; k < d; ++k) {
          gw1[r * d + k] += g * s.v[k];
          dv[k] += g * w1[r * d + k];
        }
      }

      // v = z + c; z = sum_j alpha_j x_j
      dc = dv;
      double dot_sum = 0.0;
      for (size_t j = 0; j < n; ++j) {
        const double* x = enc_.patches.data() + j * d;
        double acc = 0.0;
        for (size_t k = 0; k < d; ++k) {
          acc += x[k] * dv[k];
          d_patches[j * d + k] += s.alpha[j] * dv[k];
        }
        dalpha[j] = acc;
        dot_sum += s.alpha[j] * acc;
      }
      // softmax, then a_j = x_j . q / sqrt(d)
      std::fill(dq.begin(), dq.end(), 0.0);
      for (size_t j = 0; j < n; ++j) {
        const double da = s.alpha[j] * (dalpha[j] - dot_sum) * inv_sqrt_d;
        if (da == 0.0) continue;
        const double* x = enc_.patches.data() + j * d;
        for (size_t k = 0; k < d; ++k) {
          d_patches[j * d + k] += da * s.query[k];
          dq[k] += da * x[k];
        }
      }
      // q = W_att c
      double* gwa = grad.data() + l_.w_att;
      for (size_t r = 0; r < d; ++r) {
        for (size_t k = 0; k < d; ++k) {
          gwa[r * d + k] += dq[r] * s.c[k];
          dc[k] += dq[r] * wa[r * d + k];
        }
      }
      // c = u + mean(prefix embeddings) + step[t]
      double* gstep = grad.data() + l_.step_embed + t * d;
      for (size_t k = 0; k < d; ++k) {
        gstep[k] += dc[k];
        d_question[k] += dc[k];
      }
      if (t > 0) {
        const double inv = 1.0 / static_cast<double>(t);
        for (size_t s2 = 0; s2 < t; ++s2) {
          double* ge = grad.data() + l_.tok_embed + static_cast<size_t>(response[s2]) * d;
          for (size_t k = 0; k < d; ++k) ge[k] += inv * dc[k];
        }
      }
    }

    const double inv_q = 1.0 / static_cast<double>(question_.size());
    for (int tok : question_) {
      double* ge = grad.data() + l_.tok_embed + static_cast<size_t>(tok) * d;
      for (size_t k = 0; k < d; ++k) ge[k] += inv_q * d_question[k];
    }
    for (size_t j = 0; j < n; ++j) {
      const auto sym = static_cast<size_t>(image_.cells[j]);
      double* gs = grad.data() + l_.sym_embed + sym * d;
      double* gp = grad.data() + l_.pos_embed + j * d;
      for (size_t k = 0; k < d; ++k) {
        gs[k] += d_patches[j * d + k];
        gp[k] += d_patches[j * d + k];
      }
    }
  }

  // Per-token log-probabilities of `response`; caches are filled when requested.
  std::vector<double> score(const TokenSeq& response, std::vector<StepCache>* caches = nullptr) const {
    check_tokens(response, a_.vocab_out, "response");
    if (static_cast<int>(response.size()) > a_.max_answer_len) {
      throw DomainError("response longer than arch.max_answer_len");
    }
    std::vector<double> out(response.size());
    if (caches) caches->clear();
    for (size_t t = 0; t < response.size(); ++t) {
      StepCache s = step(std::span<const int>(response.data(), t));
      out[t] = s.logp[static_cast<size_t>(response[t])];
      if (caches) caches->push_back(std::move(s));
    }
    return out;
  }

  const Encoded& encoded() const { return enc_; }

 private:
  const PolicyParams& p_;
  ArchConfig a_;
  ParamLayout l_;
  const TokenSeq& question_;
  const GridImage& image_;
  Encoded enc_;
};

inline std::vector<double> logprob_sequence(const PolicyParams& params, const TokenSeq& question,
                                            const GridImage& image, const TokenSeq& response) {
  return PolicyForward(params, question, image).score(response);
}

// Full next-token distribution (log-probabilities) after `prefix`.
inline std::vector<double> next_token_logprobs(const PolicyParams& params, const TokenSeq& question,
                                               const GridImage& image, std::span<const int> prefix) {
  return PolicyForward(params, question, image).step(prefix).logp;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// temperature == 0 selects greedy decoding (argmax, lowest index on ties).
inline TokenSeq sample_response(const PolicyParams& params, const TokenSeq& question, const GridImage& image,
                                const RngStream& stream, double temperature) {
  if (!(temperature >= 0)) throw DomainError("sample_response: temperature must be >= 0");
  PolicyForward fwd(params, question, image);
  Rng rng(stream);
  TokenSeq out;
  std::vector<double> probs(static_cast<size_t>(params.arch.vocab_out));
  while (static_cast<int>(out.size()) < params.arch.max_answer_len) {
    const StepCache s = fwd.step(out);
    int tok = 0;
    if (temperature == 0.0) {
      tok = static_cast<int>(std::max_element(s.logp.begin(), s.logp.end()) - s.logp.begin());
    } else {
      double m = -INFINITY;
      for (double lp : s.logp) m = std::max(m, lp / temperature);
      double z = 0.0;
      for (size_t k = 0; k < probs.size(); ++k) {
        probs[k] = std::exp(s.logp[k] / temperature - m);
        z += probs[k];
      }
      const double u = rng.uniform() * z;
      double acc = 0.0;
      tok = static_cast<int>(probs.size()) - 1;
      for (size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) {
          tok = static_cast<int>(k);
          break;
        }
      }
    }
    out.push_back(tok);
    if (tok == vocab::kEnd) break;
  }
  return out;
}

// Self-attention among patch embeddings (one layer, one head), used as an
// attention-derived saliency source for semantic masking.
inline std::vector<std::vector<double>> patch_self_attention(const PolicyParams& params, const TokenSeq& question,
                                                             const GridImage& image) {
  PolicyForward fwd(params, question, image);
  const Encoded& e = fwd.encoded();
  const auto n = static_cast<size_t>(e.n);
  const auto d = static_cast<size_t>(params.arch.d);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<std::vector<double>> attn(n, std::vector<double>(n));
  for (size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t k = 0; k < d; ++k) acc += e.patches[i * d + k] * e.patches[j * d + k];
      attn[i][j] = acc * inv_sqrt_d;
      m = std::max(m, attn[i][j]);
    }
    double s = 0.0;
    for (double& a : attn[i]) s += (a = std::exp(a - m));
    for (double& a : attn[i]) a /= s;
  }
  return attn;
}

// ---------------------------------------------------------------------------
// Loss and gradient
// ---------------------------------------------------------------------------

struct GradientResult {
  std::vector<double> grad;
  LossBreakdown breakdown;
  std::vector<RolloutGroup> evaluated;  // groups with logp_new (and logp_mask when live) recomputed
};

namespace detail {

struct ResponseEval {
  std::vector<double> logp;
  std::vector<StepCache> caches;
};

inline void check_batch_finite(const LogProbTable& t, const char* what) {
  for (const auto& row : t) {
    for (double x : row) {
      if (!std::isfinite(x)) throw NumericError(std::string("non-finite log-probability in ") + what);
    }
  }
}

}  // namespace detail

// Exact gradient of the batch loss with respect to every parameter.
// logp_old / logp_ref are constants; logp_mask is a constant unless
// cfg.mask_branch_grad is set, in which case it is recomputed from `params`
// and differentiated through.
inline GradientResult loss_gradient(const PolicyParams& params, const std::vector<RolloutGroup>& groups,
                                    const std::vector<std::vector<double>>& advantages, const ObjectiveConfig& cfg) {
  if (groups.size() != advantages.size()) throw ShapeError("loss_gradient: advantages not aligned with groups");
  GradientResult out;
  out.evaluated = groups;
  std::vector<std::vector<std::vector<StepCache>>> caches_new(groups.size()), caches_mask(groups.size());
  for (size_t k = 0; k < groups.size(); ++k) {
    RolloutGroup& g = out.evaluated[k];
    g.validate();
    caches_new[k].resize(g.size());
    PolicyForward fwd(params, g.prompt.question, g.prompt.image);
    for (size_t i = 0; i < g.size(); ++i) g.logp_new[i] = fwd.score(g.responses[i], &caches_new[k][i]);
    detail::check_batch_finite(g.logp_new, "logp_new");
    if (cfg.mask_branch_grad) {
      if (g.masked_images.size() != g.size()) throw ShapeError("loss_gradient: group lacks masked images");
      caches_mask[k].resize(g.size());
      for (size_t i = 0; i < g.size(); ++i) {
        PolicyForward mfwd(params, g.prompt.question, g.masked_images[i]);
        g.logp_mask[i] = mfwd.score(g.responses[i], &caches_mask[k][i]);
      }
      detail::check_batch_finite(g.logp_mask, "logp_mask");
    }
  }
  const std::vector<LossResult> per_group = batch_loss_weights(out.evaluated, advantages, cfg, &out.breakdown);

  out.grad.assign(params.size(), 0.0);
  for (size_t k = 0; k < groups.size(); ++k) {
    const RolloutGroup& g = out.evaluated[k];
    PolicyForward fwd(params, g.prompt.question, g.prompt.image);
    for (size_t i = 0; i < g.size(); ++i) {
      fwd.backward(g.responses[i], caches_new[k][i], per_group[k].weights.d_logp_new[i], out.grad);
    }
    if (cfg.mask_branch_grad) {
      for (size_t i = 0; i < g.size(); ++i) {
        PolicyForward mfwd(params, g.prompt.question, g.masked_images[i]);
        mfwd.backward(g.responses[i], caches_mask[k][i], per_group[k].weights.d_logp_mask[i], out.grad);
      }
    }
  }
  for (size_t i = 0; i < out.grad.size(); ++i) {
    if (!std::isfinite(out.grad[i])) {
      throw NumericError("non-finite gradient at parameter index " + std::to_string(i));
    }
  }
  return out;
}

// Loss value alone, recomputing exactly what loss_gradient differentiates.
inline LossBreakdown loss_value(const PolicyParams& params, const std::vector<RolloutGroup>& groups,
                                const std::vector<std::vector<double>>& advantages, const ObjectiveConfig& cfg) {
  std::vector<RolloutGroup> ev = groups;
  for (RolloutGroup& g : ev) {
    for (size_t i = 0; i < g.size(); ++i) {
      g.logp_new[i] = logprob_sequence(params, g.prompt.question, g.prompt.image, g.responses[i]);
      if (cfg.mask_branch_grad) {
        g.logp_mask[i] = logprob_sequence(params, g.prompt.question, g.masked_images[i], g.responses[i]);
      }
    }
  }
  LossBreakdown b;
  batch_loss_weights(ev, advantages, cfg, &b);
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   PAPO-POLICY 1\n
//   key=value lines (arch config, then any extra header fields)\n
//   blocks=<name>:<count>,...\n
//   ---\n
//   raw little-endian float64 values for every block, in order
// ---------------------------------------------------------------------------

namespace ckpt {

inline void put_f64_le(std::ostream& os, double v) {
  uint64_t bits = std::bit_cast<uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline double get_f64_le(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw LoadError("checkpoint: truncated parameter data");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::map<std::string, std::string> arch_fields(const ArchConfig& a) {
  return {{"d", std::to_string(a.d)},
          {"h", std::to_string(a.h)},
          {"vocab_q", std::to_string(a.vocab_q)},
          {"vocab_out", std::to_string(a.vocab_out)},
          {"num_symbols", std::to_string(a.num_symbols)},
          {"n_max", std::to_string(a.n_max)},
          {"max_answer_len", std::to_string(a.max_answer_len)}};
}

inline ArchConfig arch_from_fields(const std::map<std::string, std::string>& f) {
  auto get = [&](const char* k) {
    auto it = f.find(k);
    if (it == f.end()) throw LoadError(std::string("checkpoint: missing header field ") + k);
    return std::stoi(it->second);
  };
  ArchConfig a;
  a.d = get("d");
  a.h = get("h");
  a.vocab_q = get("vocab_q");
  a.vocab_out = get("vocab_out");
  a.num_symbols = get("num_symbols");
  a.n_max = get("n_max");
  a.max_answer_len = get("max_answer_len");
  a.validate();
  return a;
}

struct Block {
  std::string name;
  std::vector<double> values;
};

struct File {
  std::string magic;
  std::map<std::string, std::string> header;
  std::vector<Block> blocks;

  const Block& block(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return b;
    }
    throw LoadError("checkpoint: missing block '" + name + "'");
  }
};

inline void write(const std::string& path, const File& f) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp + "' for writing");
    os << f.magic << "\n";
    for (const auto& [k, v] : f.header) os << k << "=" << v << "\n";
    os << "blocks=";
    for (size_t i = 0; i < f.blocks.size(); ++i) {
      os << (i ? "," : "") << f.blocks[i].name << ":" << f.blocks[i].values.size();
    }
    os << "\n---\n";
    for (const auto& b : f.blocks) {
      for (double v : b.values) put_f64_le(os, v);
    }
    if (!os.flush()) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

inline File read(const std::string& path, const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint '" + path + "'");
  File f;
  std::string line;
  if (!std::getline(is, line)) throw LoadError("checkpoint: empty file");
  f.magic = line;
  if (f.magic != expected_magic) throw LoadError("checkpoint: expected '" + expected_magic + "', found '" + line + "'");
  std::string blocks_spec;
  while (std::getline(is, line) && line != "---") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw LoadError("checkpoint: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "blocks") {
      blocks_spec = value;
    } else {
      f.header[key] = value;
    }
  }
  if (line != "---") throw LoadError("checkpoint: missing header terminator");
  std::stringstream ss(blocks_spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw LoadError("checkpoint: malformed block spec");
    Block b;
    b.name = item.substr(0, colon);
    b.values.resize(std::stoull(item.substr(colon + 1)));
    f.blocks.push_back(std::move(b));
  }
  for (auto& b : f.blocks) {
    for (double& v : b.values) v = get_f64_le(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw LoadError("checkpoint: trailing bytes after parameter data");
  return f;
}

}  // namespace ckpt

inline constexpr const char* kPolicyMagic = "PAPO-POLICY 1";

inline void save_policy(const std::string& path, const PolicyParams& p) {
  ckpt::File f;
  f.magic = kPolicyMagic;
  f.header = ckpt::arch_fields(p.arch);
  f.blocks.push_back({"params", p.values});
  ckpt::write(path, f);
}

inline PolicyParams load_policy(const std::string& path) {
  const ckpt::File f = ckpt::read(path, kPolicyMagic);
  PolicyParams p(ckpt::arch_from_fields(f.header));
  const auto& b = f.block("params");
  if (b.values.size() != p.size()) throw LoadError("checkpoint: parameter count does not match arch");
  p.values = b.values;
  return p;
}

}  // namespace papo
