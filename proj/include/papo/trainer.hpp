#pragma once

// Rollout collection, dynamic sampling, one-update-per-batch training steps,
// checkpointing and the run loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "papo/config.hpp"
#include "papo/domain.hpp"
#include "papo/environment.hpp"
#include "papo/errors.hpp"
#include "papo/masking.hpp"
#include "papo/monitor.hpp"
#include "papo/objectives.hpp"
#include "papo/policy.hpp"

namespace papo {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// handled by exactly one worker; callers write results into slot i.
template <typename F>
void parallel_for(size_t n, int threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const size_t workers = std::min(n, static_cast<size_t>(threads));
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutContext {
  const PolicyParams& params_old;
  const PolicyParams& params_ref;
  const MaskConfig& mask;
  double temperature = 1.0;
};

inline GridImage make_masked_image(const RolloutContext& ctx, const Prompt& prompt, const RngStream& stream) {
  if (ctx.mask.strategy == MaskStrategy::random) return random_mask(prompt.image, ctx.mask.ratio, stream).first;
  SaliencyMap sal;
  if (ctx.mask.saliency == SaliencySource::oracle) {
    sal = oracle_saliency(prompt);
  } else {
    const AttentionStack stack = {{patch_self_attention(ctx.params_old, prompt.question, prompt.image)}};
    const int layer = 0;
    sal = saliency_from_attention(stack, std::span<const int>(&layer, 1));
  }
  return semantic_mask(prompt.image, sal, ctx.mask.ratio).first;
}

// Samples G responses from the frozen old policy and fills every table.
// At collection time logp_new == logp_old.
inline RolloutGroup rollout_group(const RolloutContext& ctx, const Prompt& prompt, int group_size,
                                  const RngStream& stream) {
  if (group_size < 2) throw InvalidGroupError("rollout_group: group size must be >= 2");
  RolloutGroup g;
  g.prompt = prompt;
  const auto n = static_cast<size_t>(group_size);
  g.responses.resize(n);
  g.rewards.resize(n);
  g.masked_images.resize(n);
  g.logp_new.resize(n);
  g.logp_old.resize(n);
  g.logp_ref.resize(n);
  g.logp_mask.resize(n);

  const RngStream mask_stream = derive_stream(stream, "mask");
  const GridImage shared_mask = make_masked_image(ctx, prompt, mask_stream);
  PolicyForward old_fwd(ctx.params_old, prompt.question, prompt.image);
  PolicyForward ref_fwd(ctx.params_ref, prompt.question, prompt.image);
  for (size_t i = 0; i < n; ++i) {
    g.responses[i] =
        sample_response(ctx.params_old, prompt.question, prompt.image, derive_stream(stream, "sample", i),
                        ctx.temperature);
    g.rewards[i] = verify(prompt.answer, g.responses[i]);
    g.masked_images[i] = ctx.mask.granularity == MaskGranularity::prompt
                             ? shared_mask
                             : make_masked_image(ctx, prompt, derive_stream(mask_stream, "rollout", i));
    g.logp_old[i] = old_fwd.score(g.responses[i]);
    g.logp_new[i] = g.logp_old[i];
    g.logp_ref[i] = ref_fwd.score(g.responses[i]);
    g.logp_mask[i] = PolicyForward(ctx.params_old, prompt.question, g.masked_images[i]).score(g.responses[i]);
  }
  g.validate();
  return g;
}

struct DynamicSampleResult {
  RolloutGroup group;
  int retries = 0;  // generator calls beyond the first
};

inline bool mixed_correctness(const RolloutGroup& g) {
  const int c = g.num_correct();
  return c > 0 && c < static_cast<int>(g.size());
}

// make_group(attempt) must draw a fresh prompt and fresh streams per attempt.
// Retries until the group has mixed correctness; after max_retries retries the
// last group is returned flagged degenerate.
inline DynamicSampleResult dynamic_sample(const std::function<RolloutGroup(int)>& make_group, int max_retries) {
  if (max_retries < 1) throw DomainError("dynamic_sample: max_retries must be >= 1");
  DynamicSampleResult out;
  for (int attempt = 0;; ++attempt) {
    out.group = make_group(attempt);
    out.retries = attempt;
    if (mixed_correctness(out.group)) return out;
    if (attempt == max_retries) {
      out.group.degenerate = true;
      return out;
    }
  }
}

// ---------------------------------------------------------------------------
// State and optimizer
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
};

struct TrainState {
  PolicyParams params;
  PolicyParams ref;  // step-0 snapshot, never updated
  OptimizerState opt;
  long step = 0;     // completed steps
};

inline TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.params = init_params(cfg.arch, derive_stream(RngStream::root(cfg.seed), "init"), cfg.init_scale);
  s.ref = s.params;
  s.opt.m.assign(s.params.size(), 0.0);
  s.opt.v.assign(s.params.size(), 0.0);
  return s;
}

inline void apply_update(TrainState& state, std::vector<double> grad, const TrainConfig& cfg) {
  if (cfg.max_grad_norm > 0) {
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg.max_grad_norm) {
      const double scale = cfg.max_grad_norm / norm;
      for (double& g : grad) g *= scale;
    }
  }
  auto& p = state.params.values;
  if (cfg.weight_decay > 0) {
    for (size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * cfg.weight_decay * p[i];
  }
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * grad[i];
    return;
  }
  auto& o = state.opt;
  ++o.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(o.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(o.t));
  for (size_t i = 0; i < p.size(); ++i) {
    o.m[i] = b1 * o.m[i] + (1.0 - b1) * grad[i];
    o.v[i] = b2 * o.v[i] + (1.0 - b2) * grad[i] * grad[i];
    p[i] -= cfg.lr * (o.m[i] / c1) / (std::sqrt(o.v[i] / c2) + cfg.adam_eps);
  }
}

// ---------------------------------------------------------------------------
// One training step
// ---------------------------------------------------------------------------

struct StepResult {
  StepMetrics metrics;
  std::vector<RolloutGroup> groups;          // everything collected, degenerate included
  std::vector<size_t> loss_groups;           // indices of groups that entered the loss
  std::vector<std::vector<double>> advantages;  // aligned with loss_groups
  int total_retries = 0;
};

class PromptSource {
 public:
  PromptSource(const TaskSpec& spec, std::vector<Prompt> fixed = {}) : spec_(spec), fixed_(std::move(fixed)) {}

  Prompt draw(const RngStream& stream, uint64_t sequence_index) const {
    if (fixed_.empty()) return generate_task(spec_, stream);
    return fixed_[sequence_index % fixed_.size()];
  }

 private:
  TaskSpec spec_;
  std::vector<Prompt> fixed_;
};

inline StepResult train_step(TrainState& state, const TrainConfig& cfg, const PromptSource& prompts) {
  const auto t0 = std::chrono::steady_clock::now();
  const long k = state.step;
  const RngStream step_stream = derive_stream(RngStream::root(cfg.seed), "step", static_cast<uint64_t>(k));
  const RolloutContext ctx{state.params, state.ref, cfg.mask, cfg.temperature};
  const bool dynamic = cfg.dynamic_sampling_enabled();

  StepResult res;
  const auto np = static_cast<size_t>(cfg.prompts_per_step);
  res.groups.resize(np);
  std::vector<int> retries(np, 0);
  parallel_for(np, cfg.threads, [&](size_t p) {
    const RngStream prompt_stream = derive_stream(step_stream, "prompt", p);
    auto make = [&](int attempt) {
      const RngStream s = derive_stream(prompt_stream, "attempt", static_cast<uint64_t>(attempt));
      const uint64_t seq = (static_cast<uint64_t>(k) * np + p) * static_cast<uint64_t>(cfg.max_retries + 1) +
                           static_cast<uint64_t>(attempt);
      return rollout_group(ctx, prompts.draw(derive_stream(s, "task"), seq), cfg.group_size, s);
    };
    if (dynamic) {
      DynamicSampleResult r = dynamic_sample(make, cfg.max_retries);
      res.groups[p] = std::move(r.group);
      retries[p] = r.retries;
    } else {
      res.groups[p] = make(0);
    }
  });
  for (int r : retries) res.total_retries += r;

  for (size_t p = 0; p < np; ++p) {
    const RolloutGroup& g = res.groups[p];
    if (g.degenerate) continue;
    if (dynamic && !mixed_correctness(g)) {
      throw ConstraintError("train_step: non-degenerate group without mixed correctness");
    }
    res.loss_groups.push_back(p);
    res.advantages.push_back(normalize_advantages(g.rewards, cfg.objective.std_floor));
  }

  LossBreakdown breakdown;
  if (!res.loss_groups.empty()) {
    std::vector<RolloutGroup> batch;
    batch.reserve(res.loss_groups.size());
    for (size_t idx : res.loss_groups) batch.push_back(res.groups[idx]);
    GradientResult gr;
    try {
      gr = loss_gradient(state.params, batch, res.advantages, cfg.objective);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(k) + ": " + e.what());
    }
    breakdown = gr.breakdown;
    apply_update(state, std::move(gr.grad), cfg);
  }

  // Diagnostics over every collected group, degenerate ones included.
  StepMetrics& m = res.metrics;
  m.step = k;
  double reward_sum = 0, kl_prcp = 0, kl_ref = 0, lp = 0, lp_mask = 0, related = 0;
  size_t tokens = 0, responses = 0;
  for (const RolloutGroup& g : res.groups) {
    for (size_t i = 0; i < g.size(); ++i) {
      reward_sum += g.rewards[i];
      related += relatedness_proxy(g.responses[i], g.prompt);
      ++responses;
      for (size_t t = 0; t < g.responses[i].size(); ++t) {
        kl_prcp += perception_k3(g.logp_new[i][t] - g.logp_mask[i][t], cfg.objective.kl_prcp_clip);
        kl_ref += kl_k3_from_log(g.logp_ref[i][t] - g.logp_new[i][t]);
        lp += g.logp_new[i][t];
        lp_mask += g.logp_mask[i][t];
        ++tokens;
      }
    }
    m.degenerate_groups += g.degenerate ? 1 : 0;
  }
  const double nt = static_cast<double>(tokens);
  m.mean_reward = reward_sum / static_cast<double>(responses);
  m.kl_prcp_mean = kl_prcp / nt;
  m.kl_ref_mean = kl_ref / nt;
  m.entropy_pi = -lp / nt;
  m.entropy_pi_mask = -lp_mask / nt;
  m.clip_high_frac = breakdown.clip_high_fraction;
  m.loss = breakdown;
  m.relatedness_proxy = related / static_cast<double>(responses);
  if (cfg.record_wall_ms) {
    m.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  }
  m.validate();
  state.step = k + 1;
  return res;
}

// ---------------------------------------------------------------------------
// Training checkpoints: policy format plus reference params, optimizer
// moments and counters.
// ---------------------------------------------------------------------------

inline constexpr const char* kTrainMagic = "PAPO-TRAIN 1";

inline void save_train_state(const std::string& path, const TrainState& s, uint64_t seed) {
  ckpt::File f;
  f.magic = kTrainMagic;
  f.header = ckpt::arch_fields(s.params.arch);
  f.header["step"] = std::to_string(s.step);
  f.header["adam_t"] = std::to_string(s.opt.t);
  f.header["seed"] = std::to_string(seed);
  f.blocks.push_back({"params", s.params.values});
  f.blocks.push_back({"ref", s.ref.values});
  f.blocks.push_back({"adam_m", s.opt.m});
  f.blocks.push_back({"adam_v", s.opt.v});
  ckpt::write(path, f);
}

inline TrainState load_train_state(const std::string& path, uint64_t* seed = nullptr) {
  const ckpt::File f = ckpt::read(path, kTrainMagic);
  TrainState s;
  const ArchConfig arch = ckpt::arch_from_fields(f.header);
  s.params = PolicyParams(arch);
  s.ref = PolicyParams(arch);
  auto take = [&](const char* name, std::vector<double>& dst) {
    const auto& b = f.block(name);
    if (b.values.size() != s.params.size()) throw LoadError(std::string("checkpoint: block '") + name + "' has wrong size");
    dst = b.values;
  };
  take("params", s.params.values);
  take("ref", s.ref.values);
  take("adam_m", s.opt.m);
  take("adam_v", s.opt.v);
  s.step = std::stol(f.header.at("step"));
  s.opt.t = std::stol(f.header.at("adam_t"));
  if (seed) *seed = std::stoull(f.header.at("seed"));
  return s;
}

// Policy parameters from either checkpoint kind.
inline PolicyParams load_any_policy(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint '" + path + "'");
  std::string magic;
  std::getline(is, magic);
  if (magic == kTrainMagic) return load_train_state(path).params;
  return load_policy(path);
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

struct RunOptions {
  std::string out_dir;         // empty: keep everything in memory
  std::string resume_from;     // training checkpoint to continue from
  std::function<void(const StepResult&)> on_step;
};

struct RunResult {
  std::vector<StepMetrics> history;
  TrainState final_state;
  long last_durable_step = -1;
};

inline std::string checkpoint_path(const std::string& out_dir, long step) {
  char name[64];
  std::snprintf(name, sizeof name, "step_%06ld.ckpt", step);
  return (std::filesystem::path(out_dir) / "checkpoints" / name).string();
}

inline RunResult run(const TrainConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  RunResult out;
  std::vector<Prompt> fixed;
  if (!cfg.task_dump.empty()) fixed = read_task_dump(cfg.task_dump);
  const PromptSource prompts(cfg.env, std::move(fixed));

  TrainState state;
  if (!opts.resume_from.empty()) {
    uint64_t seed = 0;
    state = load_train_state(opts.resume_from, &seed);
    if (seed != cfg.seed) throw ValidationError("resume: checkpoint seed does not match trainer.seed");
    if (!(state.params.arch == cfg.arch)) throw LoadError("resume: checkpoint arch does not match config");
  } else {
    state = init_state(cfg);
  }

  const bool persist = !opts.out_dir.empty();
  MetricsWriter writer;
  if (persist) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(opts.out_dir) / "checkpoints");
    const std::string metrics_path = (fs::path(opts.out_dir) / "metrics.jsonl").string();
    const bool resuming = !opts.resume_from.empty();
    writer = MetricsWriter(metrics_path, resuming);
    if (!resuming) {
      writer.write_header(config_to_json(cfg));
      save_train_state(checkpoint_path(opts.out_dir, 0), state, cfg.seed);
    }
  }

  while (state.step < cfg.steps) {
    StepResult r;
    try {
      r = train_step(state, cfg, prompts);
      if (persist) {
        writer.write_step(r.metrics);
        const bool periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if (periodic || state.step == cfg.steps) save_train_state(checkpoint_path(opts.out_dir, state.step), state, cfg.seed);
      }
    } catch (const IoError& e) {
      throw IoError(std::string(e.what()) + " (last durable step: " + std::to_string(out.last_durable_step) + ")");
    }
    out.last_durable_step = r.metrics.step;
    out.history.push_back(r.metrics);
    if (opts.on_step) opts.on_step(r);
  }
  out.final_state = std::move(state);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalBucket {
  long prompts = 0;
  long samples = 0;
  double correct = 0;
  double accuracy() const { return samples ? correct / static_cast<double>(samples) : 0.0; }
};

struct EvalSummary {
  EvalBucket overall;
  EvalBucket low, medium, high;
  double mean_perception_ratio = 0.0;  // mean per-token pi(o|I)/pi(o|I_mask)
  double mean_kl_prcp = 0.0;           // mean per-token k3 of that ratio

  EvalBucket& bucket(Dependency d) { return d == Dependency::low ? low : d == Dependency::medium ? medium : high; }
};

// k samples per prompt at `temperature`; temperature 0 decodes greedily.
inline EvalSummary evaluate(const PolicyParams& params, const TaskSpec& spec, long episodes, int k, uint64_t seed,
                            double temperature = 1.0, const MaskConfig& mask = {}) {
  if (episodes < 0 || k < 1) throw DomainError("evaluate: episodes must be >= 0 and k >= 1");
  EvalSummary s;
  const RngStream root = derive_stream(RngStream::root(seed), "eval");
  double ratio_sum = 0, kl_sum = 0;
  long tokens = 0;
  const RolloutContext ctx{params, params, mask, temperature};
  for (long e = 0; e < episodes; ++e) {
    const RngStream es = derive_stream(root, "episode", static_cast<uint64_t>(e));
    const Prompt p = generate_task(spec, derive_stream(es, "task"));
    const GridImage masked = make_masked_image(ctx, p, derive_stream(es, "mask"));
    PolicyForward fwd(params, p.question, p.image);
    PolicyForward mfwd(params, p.question, masked);
    EvalBucket& b = s.bucket(p.dependency);
    ++b.prompts;
    ++s.overall.prompts;
    for (int j = 0; j < k; ++j) {
      const TokenSeq r = sample_response(params, p.question, p.image, derive_stream(es, "sample", static_cast<uint64_t>(j)),
                                         temperature);
      const double c = verify(p.answer, r);
      b.correct += c;
      ++b.samples;
      s.overall.correct += c;
      ++s.overall.samples;
      const auto lp = fwd.score(r);
      const auto lpm = mfwd.score(r);
      for (size_t t = 0; t < r.size(); ++t) {
        ratio_sum += std::exp(lp[t] - lpm[t]);
        kl_sum += kl_k3_from_log(lp[t] - lpm[t]);
        ++tokens;
      }
    }
  }
  if (tokens) {
    s.mean_perception_ratio = ratio_sum / static_cast<double>(tokens);
    s.mean_kl_prcp = kl_sum / static_cast<double>(tokens);
  }
  return s;
}

}  // namespace papo
