#include <gtest/gtest.h>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "papo/config.hpp"
#include "papo/trainer.hpp"

using namespace papo;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(Algorithm a = Algorithm::grpo) {
  TrainConfig c = preset_config(a);
  c.env.width = 4;
  c.env.height = 4;
  c.env.answer_range = 4;
  c.arch.n_max = 16;
  c.arch.d = 8;
  c.arch.h = 8;
  c.prompts_per_step = 4;
  c.group_size = 4;
  c.steps = 3;
  c.optimizer = OptimizerKind::adam;
  c.lr = 1e-2;
  c.seed = 11;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("papo_trainer_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

RolloutGroup scripted_group(std::vector<double> rewards) {
  RolloutGroup g;
  for (size_t i = 0; i < rewards.size(); ++i) {
    g.responses.push_back({1});
    g.logp_new.push_back({-1.0});
    g.logp_old.push_back({-1.0});
    g.logp_ref.push_back({-1.0});
    g.logp_mask.push_back({-1.0});
  }
  g.rewards = std::move(rewards);
  return g;
}

}  // namespace

TEST(ParallelFor, VisitsEveryIndexOnceAndRethrows) {
  for (int threads : {1, 3, 8}) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(hits.size(), threads, [&](size_t i) { ++hits[i]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  EXPECT_THROW(parallel_for(10, 4, [](size_t i) {
                 if (i == 7) throw NumericError("boom");
               }),
               NumericError);
}

TEST(Rollout, GroupTablesAreConsistent) {
  const TrainConfig c = small_config();
  const TrainState s = init_state(c);
  const RolloutContext ctx{s.params, s.ref, c.mask, 1.0};
  const Prompt p = generate_task(c.env, RngStream::root(3));
  const RolloutGroup g = rollout_group(ctx, p, 5, RngStream::root(4));
  ASSERT_EQ(g.size(), 5u);
  for (size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(g.logp_new[i], g.logp_old[i]);
    EXPECT_EQ(g.rewards[i], verify(p.answer, g.responses[i]));
    EXPECT_EQ(g.masked_images[i], g.masked_images[0]);  // prompt-level masking
    EXPECT_EQ(g.logp_mask[i], logprob_sequence(s.params, p.question, g.masked_images[i], g.responses[i]));
  }
  EXPECT_THROW(rollout_group(ctx, p, 1, RngStream::root(4)), InvalidGroupError);

  MaskConfig per_rollout = c.mask;
  per_rollout.granularity = MaskGranularity::rollout;
  const RolloutContext rctx{s.params, s.ref, per_rollout, 1.0};
  const RolloutGroup r = rollout_group(rctx, p, 5, RngStream::root(4));
  bool differs = false;
  for (size_t i = 1; i < r.size(); ++i) differs |= !(r.masked_images[i] == r.masked_images[0]);
  EXPECT_TRUE(differs);
}

TEST(DynamicSampling, RetriesUntilMixed) {
  int calls = 0;
  const auto r = dynamic_sample(
      [&](int attempt) {
        ++calls;
        return attempt < 3 ? scripted_group({1, 1, 1}) : scripted_group({1, 0, 1});
      },
      20);
  EXPECT_EQ(calls, 4);
  EXPECT_EQ(r.retries, 3);
  EXPECT_FALSE(r.group.degenerate);
  EXPECT_TRUE(mixed_correctness(r.group));
}

TEST(DynamicSampling, ExhaustionIsFlaggedDegenerate) {
  int calls = 0;
  const auto r = dynamic_sample(
      [&](int) {
        ++calls;
        return scripted_group({0, 0, 0, 0});
      },
      20);
  EXPECT_EQ(calls, 21);
  EXPECT_EQ(r.retries, 20);
  EXPECT_TRUE(r.group.degenerate);
  EXPECT_THROW(dynamic_sample([](int) { return scripted_group({0, 1}); }, 0), DomainError);
}

TEST(TrainStep, DapoLossUsesOnlyMixedGroups) {
  TrainConfig c = small_config(Algorithm::dapo);
  c.prompts_per_step = 8;
  c.max_retries = 2;
  TrainState s = init_state(c);
  const PromptSource src(c.env);
  const StepResult r = train_step(s, c, src);
  long degenerate = 0;
  for (size_t p = 0; p < r.groups.size(); ++p) {
    const bool in_loss = std::find(r.loss_groups.begin(), r.loss_groups.end(), p) != r.loss_groups.end();
    EXPECT_EQ(in_loss, !r.groups[p].degenerate);
    if (in_loss) EXPECT_TRUE(mixed_correctness(r.groups[p]));
    degenerate += r.groups[p].degenerate;
  }
  EXPECT_EQ(r.metrics.degenerate_groups, degenerate);
  EXPECT_EQ(r.advantages.size(), r.loss_groups.size());
  // A fresh uniform policy rarely answers, so some groups must have retried.
  EXPECT_GT(r.total_retries, 0);
}

TEST(TrainStep, ZeroLearningRateLeavesParamsUnchanged) {
  for (OptimizerKind opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
    TrainConfig c = small_config(Algorithm::papo_grpo);
    c.optimizer = opt;
    c.lr = 0;
    TrainState s = init_state(c);
    const auto before = s.params.values;
    train_step(s, c, PromptSource(c.env));
    train_step(s, c, PromptSource(c.env));
    EXPECT_TRUE(bit_equal(before, s.params.values));
    EXPECT_EQ(s.step, 2);
  }
}

TEST(TrainStep, OnPolicyStepsNeverClip) {
  TrainConfig c = small_config();
  c.steps = 4;
  for (const auto& m : run(c).history) EXPECT_EQ(m.clip_high_frac, 0.0);
}

TEST(TrainStep, ReferencePolicyStaysAtInitialization) {
  const TrainConfig c = small_config();
  const TrainState init = init_state(c);
  const RunResult r = run(c);
  EXPECT_TRUE(bit_equal(r.final_state.ref.values, init.params.values));
  EXPECT_FALSE(bit_equal(r.final_state.params.values, init.params.values));
}

TEST(TrainStep, MetricsAgreeWithCollectedGroups) {
  TrainConfig c = small_config(Algorithm::papo_grpo);
  TrainState s = init_state(c);
  const StepResult r = train_step(s, c, PromptSource(c.env));
  double reward = 0, n = 0, kl = 0, tokens = 0;
  for (const auto& g : r.groups) {
    for (size_t i = 0; i < g.size(); ++i) {
      reward += g.rewards[i];
      ++n;
      for (size_t t = 0; t < g.responses[i].size(); ++t) {
        const double x = std::exp(g.logp_new[i][t] - g.logp_mask[i][t]);
        kl += x - std::log(x) - 1;
        ++tokens;
      }
    }
  }
  EXPECT_NEAR(r.metrics.mean_reward, reward / n, 1e-15);
  EXPECT_NEAR(r.metrics.kl_prcp_mean, kl / tokens, 1e-12);
  EXPECT_EQ(r.metrics.wall_ms, 0);
}

TEST(Run, DeterministicAndIndependentOfThreads) {
  TrainConfig c = small_config(Algorithm::papo_dapo);
  const RunResult a = run(c);
  const RunResult b = run(c);
  c.threads = 3;
  const RunResult t = run(c);
  ASSERT_EQ(a.history.size(), 3u);
  for (size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(to_json(a.history[i]), to_json(b.history[i]));
    EXPECT_EQ(to_json(a.history[i]), to_json(t.history[i]));
  }
  EXPECT_TRUE(bit_equal(a.final_state.params.values, b.final_state.params.values));
  EXPECT_TRUE(bit_equal(a.final_state.params.values, t.final_state.params.values));
}

TEST(Run, ZeroStepsWritesOnlyTheInitialCheckpoint) {
  TrainConfig c = small_config();
  c.steps = 0;
  const fs::path dir = fresh_dir("zero");
  const RunResult r = run(c, {dir.string(), {}, {}});
  EXPECT_TRUE(r.history.empty());
  std::vector<fs::path> ckpts;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints")) ckpts.push_back(e.path());
  ASSERT_EQ(ckpts.size(), 1u);
  EXPECT_EQ(ckpts[0].filename(), "step_000000.ckpt");
  const MetricsFile mf = read_metrics((dir / "metrics.jsonl").string());
  EXPECT_TRUE(mf.steps.empty());
  EXPECT_FALSE(mf.header.is_null());
  fs::remove_all(dir);
}

TEST(Run, RepeatedRunsWriteIdenticalFiles) {
  TrainConfig c = small_config();
  c.checkpoint_every = 2;
  const fs::path a = fresh_dir("a"), b = fresh_dir("b");
  run(c, {a.string(), {}, {}});
  run(c, {b.string(), {}, {}});
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  for (const char* ck : {"step_000000.ckpt", "step_000002.ckpt", "step_000003.ckpt"}) {
    EXPECT_TRUE(fs::exists(a / "checkpoints" / ck)) << ck;
    EXPECT_EQ(slurp(a / "checkpoints" / ck), slurp(b / "checkpoints" / ck)) << ck;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, ResumeIsBitIdentical) {
  TrainConfig c = small_config(Algorithm::papo_grpo);
  c.steps = 6;
  c.checkpoint_every = 3;
  const fs::path full = fresh_dir("full"), part = fresh_dir("part");
  const RunResult whole = run(c, {full.string(), {}, {}});

  TrainConfig first = c;
  first.steps = 3;
  run(first, {part.string(), {}, {}});
  const RunResult rest = run(c, {part.string(), checkpoint_path(part.string(), 3), {}});
  ASSERT_EQ(rest.history.size(), 3u);
  EXPECT_TRUE(bit_equal(whole.final_state.params.values, rest.final_state.params.values));
  EXPECT_TRUE(bit_equal(whole.final_state.opt.m, rest.final_state.opt.m));
  EXPECT_TRUE(bit_equal(whole.final_state.opt.v, rest.final_state.opt.v));
  EXPECT_EQ(whole.final_state.opt.t, rest.final_state.opt.t);
  // The resumed run's header carries steps=3 from the first leg; step records match.
  const auto mw = read_metrics((full / "metrics.jsonl").string()).steps;
  const auto mp = read_metrics((part / "metrics.jsonl").string()).steps;
  ASSERT_EQ(mw.size(), mp.size());
  for (size_t i = 0; i < mw.size(); ++i) EXPECT_EQ(to_json(mw[i]), to_json(mp[i]));
  EXPECT_EQ(slurp(full / "checkpoints/step_000006.ckpt"), slurp(part / "checkpoints/step_000006.ckpt"));

  TrainConfig other = c;
  other.seed = 12;
  EXPECT_THROW(run(other, {fresh_dir("x").string(), checkpoint_path(part.string(), 3), {}}), ValidationError);
  fs::remove_all(full);
  fs::remove_all(part);
  fs::remove_all(fresh_dir("x"));
}

TEST(Run, TrainCheckpointRoundTrip) {
  TrainConfig c = small_config();
  const RunResult r = run(c);
  const auto path = (fs::temp_directory_path() / "papo_train_state.ckpt").string();
  save_train_state(path, r.final_state, c.seed);
  uint64_t seed = 0;
  const TrainState s = load_train_state(path, &seed);
  EXPECT_EQ(seed, c.seed);
  EXPECT_EQ(s.step, 3);
  EXPECT_TRUE(bit_equal(s.params.values, r.final_state.params.values));
  EXPECT_TRUE(bit_equal(s.ref.values, r.final_state.ref.values));
  EXPECT_TRUE(bit_equal(load_any_policy(path).values, r.final_state.params.values));
  EXPECT_THROW(load_policy(path), LoadError);
  fs::remove(path);
}

TEST(Run, FixedTaskDumpIsReplayed) {
  TrainConfig c = small_config();
  std::vector<Prompt> prompts = {generate_task(c.env, RngStream::root(1)), generate_task(c.env, RngStream::root(2))};
  const auto path = (fs::temp_directory_path() / "papo_dump.jsonl").string();
  write_task_dump(path, prompts);
  c.task_dump = path;
  c.steps = 1;
  std::vector<Prompt> seen;
  RunOptions opts;
  opts.on_step = [&](const StepResult& r) {
    for (const auto& g : r.groups) seen.push_back(g.prompt);
  };
  run(c, opts);
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_EQ(seen[0], prompts[0]);
  EXPECT_EQ(seen[1], prompts[1]);
  EXPECT_EQ(seen[2], prompts[0]);
  fs::remove(path);
}

TEST(Evaluate, GreedyIsIndependentOfSampleCount) {
  const TrainConfig c = small_config();
  const RunResult r = run(c);
  const auto one = evaluate(r.final_state.params, c.env, 20, 1, 5, 0.0);
  const auto eight = evaluate(r.final_state.params, c.env, 20, 8, 5, 0.0);
  EXPECT_DOUBLE_EQ(one.overall.accuracy(), eight.overall.accuracy());
  EXPECT_EQ(eight.overall.samples, 160);
  EXPECT_EQ(one.high.prompts, 20);
  EXPECT_THROW(evaluate(r.final_state.params, c.env, 1, 0, 5), DomainError);
}

TEST(Evaluate, UniformPolicyMatchesChanceRate) {
  TrainConfig c = small_config();
  c.env.answer_range = 2;
  PolicyParams p(c.arch);  // all zeros: uniform over the output tokens
  const auto s = evaluate(p, c.env, 400, 50, 1, 1.0);
  // Answers are one digit; a hit needs that digit, then END or stop at the
  // length limit is not reachable with one token, so P = (1/V) * (1/V).
  const double v = vocab::kNumOutputTokens;
  const double p_hit = 1.0 / (v * v);
  const double sd = std::sqrt(p_hit * (1 - p_hit) / 20000.0);
  EXPECT_NEAR(s.overall.accuracy(), p_hit, 4 * sd);
  EXPECT_NEAR(s.mean_perception_ratio, 1.0, 1e-12);
  EXPECT_NEAR(s.mean_kl_prcp, 0.0, 1e-12);
}
