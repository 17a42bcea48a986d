// papo_lab: train, eval, sweep and export for the toy perception-aware RL lab.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "papo/cli.hpp"

namespace {

std::string stem_or(const std::string& path, const std::string& fallback) {
  return path.empty() ? fallback : std::filesystem::path(path).stem().string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"papo_lab: toy perception-aware policy optimization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", papo::kVersion);

  std::string config_path, out, resume, checkpoint, axis, what = "metrics-csv";
  std::vector<std::string> overrides, values;
  std::optional<uint64_t> seed;
  long episodes = 200;
  int k = 8, jobs = 1, window = 20;
  double temperature = 1.0;

  auto add_config_flags = [&](CLI::App* c) {
    c->add_option("--config", config_path, "config file")->check(CLI::ExistingFile);
    c->add_option("--set", overrides, "override, section.key=value (repeatable)")->take_all();
    c->add_option("--seed", seed, "overrides trainer.seed");
  };

  auto* train = app.add_subcommand("train", "run training and write manifest, metrics and checkpoints");
  add_config_flags(train);
  train->add_option("--out", out, "run directory (default $PERCEPT_RL_OUT/<config>-seed<seed>)");
  train->add_option("--resume", resume, "training checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config_flags(eval);
  eval->add_option("--checkpoint", checkpoint, "policy or training checkpoint")->required();
  eval->add_option("--episodes", episodes, "number of prompts")->check(CLI::NonNegativeNumber);
  eval->add_option("--k", k, "samples per prompt")->check(CLI::PositiveNumber);
  eval->add_option("--temperature", temperature, "sampling temperature, 0 for greedy")->check(CLI::NonNegativeNumber);
  eval->add_option("--out", out, "also write the summary JSON here");

  auto* sweep = app.add_subcommand("sweep", "one run per value of a config key");
  add_config_flags(sweep);
  sweep->add_option("--axis", axis, "config key to vary")->required();
  sweep->add_option("--values", values, "values (comma separated or repeated)")->delimiter(',');
  sweep->add_option("--out", out, "sweep directory (default $PERCEPT_RL_OUT/sweep-<axis>)");
  sweep->add_option("--jobs", jobs, "points run concurrently")->check(CLI::PositiveNumber);

  auto* exp = app.add_subcommand("export", "export metrics of a run directory");
  std::string run_dir;
  exp->add_option("run_dir", run_dir, "run directory")->required();
  exp->add_option("--what", what, "metrics-csv or curves");
  exp->add_option("--window", window, "smoothing window for curves")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    auto resolve = [&] {
      auto all = overrides;
      if (seed) all.push_back("trainer.seed=" + std::to_string(*seed));
      return papo::resolve_config(config_path, all);
    };

    if (*train) {
      const papo::TrainConfig cfg = resolve();
      const std::filesystem::path dir =
          out.empty() ? papo::default_out_root() / (stem_or(config_path, "default") + "-seed" + std::to_string(cfg.seed))
                      : std::filesystem::path(out);
      const auto res = papo::cmd_train(cfg, dir, resume);
      std::cout << "trained " << res.history.size() << " steps into " << dir.string() << "\n";
      if (!res.history.empty()) std::cout << "final mean_reward " << res.history.back().mean_reward << "\n";
    } else if (*eval) {
      papo::EvalRequest req;
      req.checkpoint = checkpoint;
      req.cfg = resolve();
      req.episodes = episodes;
      req.k = k;
      req.seed = req.cfg.seed;
      req.temperature = temperature;
      const auto j = papo::cmd_eval(req);
      std::cout << j.dump(2) << "\n";
      if (!out.empty()) {
        std::ofstream os(out, std::ios::trunc);
        os << j.dump(2) << "\n";
        if (!os.flush()) throw papo::IoError("cannot write '" + out + "'");
      }
    } else if (*sweep) {
      const papo::TrainConfig cfg = resolve();
      const std::filesystem::path dir = out.empty() ? papo::default_out_root() / ("sweep-" + axis) : std::filesystem::path(out);
      const auto dirs = papo::cmd_sweep(cfg, axis, values, dir, jobs);
      std::cout << dirs.size() << " runs\n";
      for (const auto& d : dirs) std::cout << d.string() << "\n";
    } else if (*exp) {
      const auto path = papo::cmd_export(run_dir, papo::parse_export_kind(what), window);
      std::cout << path.string() << "\n";
    }
  } catch (const papo::Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
