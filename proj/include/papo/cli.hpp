#pragma once

// Verb implementations behind the papo_lab command line: train, eval, sweep,
// export. Kept out of the executable so tests can drive them directly.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "papo/config.hpp"
#include "papo/errors.hpp"
#include "papo/monitor.hpp"
#include "papo/trainer.hpp"

namespace papo {

inline constexpr const char* kVersion = "papo-lab 0.1.0";

namespace fs = std::filesystem;

// Output root when --out is absent.
inline fs::path default_out_root() {
  const char* env = std::getenv("PERCEPT_RL_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// ---------------------------------------------------------------------------
// CSV: header row, RFC-4180 quoting, doubles at 17 significant digits.
// ---------------------------------------------------------------------------

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_number(double v) { return config_detail::fmt_double(v); }

inline std::vector<std::vector<std::string>> parse_csv(std::istream& is) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  char c;
  while (is.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (is.peek() == '"') {
          field += '"';
          is.get();
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && is.peek() == '\n') is.get();
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw LoadError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "step",          "mean_reward",  "kl_prcp_mean",      "kl_ref_mean",      "entropy_pi",
      "entropy_pi_mask", "clip_high_frac", "loss_total",     "loss_surrogate",   "loss_kl_ref",
      "loss_kl_prcp",  "loss_ent_pi",  "loss_ent_mask",     "degenerate_groups", "wall_ms",
      "relatedness_proxy"};
  return cols;
}

inline std::vector<double> metrics_row(const StepMetrics& m) {
  return {static_cast<double>(m.step), m.mean_reward,  m.kl_prcp_mean,  m.kl_ref_mean,
          m.entropy_pi,                m.entropy_pi_mask, m.clip_high_frac, m.loss.total,
          m.loss.surrogate,            m.loss.kl_ref,  m.loss.kl_prcp,  m.loss.ent_pi,
          m.loss.ent_mask,             static_cast<double>(m.degenerate_groups), static_cast<double>(m.wall_ms),
          m.relatedness_proxy};
}

inline StepMetrics metrics_from_row(const std::vector<double>& r) {
  if (r.size() != metrics_columns().size()) throw LoadError("csv: wrong number of metric columns");
  StepMetrics m;
  m.step = static_cast<long>(r[0]);
  m.mean_reward = r[1];
  m.kl_prcp_mean = r[2];
  m.kl_ref_mean = r[3];
  m.entropy_pi = r[4];
  m.entropy_pi_mask = r[5];
  m.clip_high_frac = r[6];
  m.loss.total = r[7];
  m.loss.surrogate = r[8];
  m.loss.kl_ref = r[9];
  m.loss.kl_prcp = r[10];
  m.loss.ent_pi = r[11];
  m.loss.ent_mask = r[12];
  m.loss.clip_high_fraction = r[6];
  m.degenerate_groups = static_cast<long>(r[13]);
  m.wall_ms = static_cast<long>(r[14]);
  m.relatedness_proxy = r[15];
  return m;
}

inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << csv_field(header[i]);
  os << "\r\n";
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_number(r[i]);
    os << "\r\n";
  }
  if (!os.flush()) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<StepMetrics> read_metrics_csv(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open '" + path.string() + "'");
  const auto rows = parse_csv(is);
  if (rows.empty() || rows[0] != metrics_columns()) throw LoadError("csv: unexpected header in " + path.string());
  std::vector<StepMetrics> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    std::vector<double> r;
    for (const auto& f : rows[i]) r.push_back(config_detail::parse_double("csv", f));
    out.push_back(metrics_from_row(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline void write_manifest(const fs::path& out_dir, const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["seed"] = cfg.seed;
  j["config"] = config_to_json(cfg);
  j["artifacts"] = {{"config", "config.toml"}, {"metrics", "metrics.jsonl"}, {"checkpoints", "checkpoints"}};
  const fs::path tmp = out_dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest in '" + out_dir.string() + "'");
    os << j.dump(2) << "\n";
    if (!os.flush()) throw IoError("manifest write failed");
  }
  fs::rename(tmp, out_dir / "manifest.json");
  std::ofstream cs(out_dir / "config.toml", std::ios::trunc);
  cs << config_to_text(cfg);
  if (!cs.flush()) throw IoError("config snapshot write failed");
}

inline nlohmann::json read_manifest(const fs::path& run_dir) {
  std::ifstream is(run_dir / "manifest.json");
  if (!is) throw NotFoundError("no manifest in '" + run_dir.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

inline TrainConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

inline RunResult cmd_train(const TrainConfig& cfg, const fs::path& out_dir, const std::string& resume = {}) {
  fs::create_directories(out_dir);
  if (resume.empty()) write_manifest(out_dir, cfg);
  RunOptions opts;
  opts.out_dir = out_dir.string();
  opts.resume_from = resume;
  return run(cfg, opts);
}

inline nlohmann::ordered_json eval_to_json(const EvalSummary& s, long episodes, int k, uint64_t seed, double temperature) {
  auto bucket = [](const EvalBucket& b) {
    nlohmann::ordered_json j;
    j["prompts"] = b.prompts;
    j["samples"] = b.samples;
    j["accuracy"] = b.accuracy();
    return j;
  };
  nlohmann::ordered_json j;
  j["episodes"] = episodes;
  j["k"] = k;
  j["seed"] = seed;
  j["temperature"] = temperature;
  j["accuracy"] = s.overall.accuracy();
  j["by_dependency"] = {{"low", bucket(s.low)}, {"medium", bucket(s.medium)}, {"high", bucket(s.high)}};
  j["mean_perception_ratio"] = s.mean_perception_ratio;
  j["mean_kl_prcp"] = s.mean_kl_prcp;
  return j;
}

struct EvalRequest {
  std::string checkpoint;
  TrainConfig cfg;  // supplies env and mask settings
  long episodes = 200;
  int k = 8;
  uint64_t seed = 0;
  double temperature = 1.0;
};

inline nlohmann::ordered_json cmd_eval(const EvalRequest& req) {
  const PolicyParams params = load_any_policy(req.checkpoint);
  if (params.arch.max_answer_len < req.cfg.env.max_answer_len || params.arch.n_max < req.cfg.env.width * req.cfg.env.height) {
    throw LoadError("checkpoint architecture cannot serve the requested task");
  }
  const EvalSummary s = evaluate(params, req.cfg.env, req.episodes, req.k, req.seed, req.temperature, req.cfg.mask);
  return eval_to_json(s, req.episodes, req.k, req.seed, req.temperature);
}

// Directory name for one sweep point.
inline std::string sweep_point_name(const std::string& key, const std::string& value) {
  std::string out = key + "=" + value;
  for (char& c : out) {
    if (c == '/' || c == '\\' || c == ' ') c = '_';
  }
  return out;
}

// One run per value, each in its own subdirectory, all on the base seed.
// jobs > 1 runs points on that many worker threads.
inline std::vector<fs::path> cmd_sweep(const TrainConfig& base, const std::string& key,
                                       const std::vector<std::string>& values, const fs::path& out_dir, int jobs = 1) {
  if (!has_config_key(key)) throw SchemaError("unknown config key '" + key + "'");
  std::vector<TrainConfig> cfgs;
  std::vector<fs::path> dirs;
  for (const auto& v : values) {
    TrainConfig c = base;
    set_config_value(c, key, v);
    c.validate();
    cfgs.push_back(c);
    dirs.push_back(out_dir / sweep_point_name(key, v));
  }
  if (cfgs.empty()) return dirs;
  fs::create_directories(out_dir);
  parallel_for(cfgs.size(), jobs, [&](size_t i) { cmd_train(cfgs[i], dirs[i]); });
  return dirs;
}

enum class ExportKind { metrics_csv, curves };

inline ExportKind parse_export_kind(std::string_view s) {
  if (s == "metrics-csv") return ExportKind::metrics_csv;
  if (s == "curves") return ExportKind::curves;
  throw DomainError("unknown export kind '" + std::string(s) + "' (expected metrics-csv or curves)");
}

inline fs::path cmd_export(const fs::path& run_dir, ExportKind what, int window = 20) {
  read_manifest(run_dir);
  const fs::path metrics = run_dir / "metrics.jsonl";
  if (!fs::exists(metrics)) throw NotFoundError("no metrics in '" + run_dir.string() + "'");
  const MetricsFile mf = read_metrics(metrics.string());
  std::vector<std::vector<double>> rows;
  for (const auto& m : mf.steps) rows.push_back(metrics_row(m));
  if (what == ExportKind::metrics_csv) {
    const fs::path out = run_dir / "metrics.csv";
    write_csv(out, metrics_columns(), rows);
    return out;
  }
  // Smoothed copy of every column except the step index.
  const size_t ncol = metrics_columns().size();
  for (size_t c = 1; c < ncol; ++c) {
    std::vector<double> series;
    for (const auto& r : rows) series.push_back(r[c]);
    const auto smooth = running_average(series, window);
    for (size_t i = 0; i < rows.size(); ++i) rows[i][c] = smooth[i];
  }
  const fs::path out = run_dir / "curves.csv";
  write_csv(out, metrics_columns(), rows);
  return out;
}

}  // namespace papo
