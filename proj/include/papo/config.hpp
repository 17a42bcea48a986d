#pragma once

// Run configuration and its text format.
//
// Grammar (one construct per line, '#' starts a comment outside quotes):
//
//   [section]
//   key = value
//
// Values are bare tokens (numbers, true/false, identifiers) or double-quoted
// strings. The full key of an assignment is "section.key". Unknown keys are a
// SchemaError; the last assignment to a key wins. Overrides given as
// "section.key=value" are applied after the file, in order.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "papo/environment.hpp"
#include "papo/errors.hpp"
#include "papo/masking.hpp"
#include "papo/monitor.hpp"
#include "papo/objectives.hpp"
#include "papo/policy.hpp"

namespace papo {

enum class OptimizerKind { sgd, adam };
enum class MaskGranularity { prompt, rollout };
enum class DynamicSampling { auto_, on, off };

struct MaskConfig {
  MaskStrategy strategy = MaskStrategy::random;
  double ratio = 0.6;
  MaskGranularity granularity = MaskGranularity::prompt;
  SaliencySource saliency = SaliencySource::attention;
  int patch_size = 14;  // pixel patch size of the original method; unused on symbolic grids
};

struct TrainConfig {
  ObjectiveConfig objective = ObjectiveConfig::preset(Algorithm::grpo);
  MaskConfig mask;
  TaskSpec env;
  ArchConfig arch;
  CollapseRules monitor;

  int group_size = 5;
  int prompts_per_step = 32;
  long steps = 300;
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  double temperature = 1.0;
  double init_scale = 1.0;
  uint64_t seed = 0;
  DynamicSampling dynamic_sampling = DynamicSampling::auto_;
  int max_retries = 20;
  long checkpoint_every = 0;  // 0: initial and final checkpoints only
  int threads = 1;
  std::string task_dump;  // optional fixed prompt list, replayed cyclically
  bool record_wall_ms = false;

  bool dynamic_sampling_enabled() const {
    if (dynamic_sampling == DynamicSampling::auto_) return is_dapo_family(objective.algorithm);
    return dynamic_sampling == DynamicSampling::on;
  }

  void validate() const {
    objective.validate();
    env.validate();
    arch.validate();
    auto fail = [](const std::string& m) { throw ValidationError(m); };
    if (group_size < 2) fail("trainer.group_size must be >= 2");
    if (prompts_per_step < 1) fail("trainer.prompts_per_step must be >= 1");
    if (steps < 0) fail("trainer.steps must be >= 0");
    if (!(lr >= 0)) fail("trainer.lr must be >= 0");
    if (!(temperature > 0)) fail("trainer.temperature must be > 0");
    if (max_retries < 1) fail("trainer.max_retries must be >= 1");
    if (threads < 1) fail("trainer.threads must be >= 1");
    if (!(mask.ratio >= 0 && mask.ratio <= 1)) fail("mask.ratio must lie in [0,1]");
    if (dynamic_sampling_enabled() != is_dapo_family(objective.algorithm)) {
      fail("trainer.dynamic_sampling must be enabled exactly for dapo and papo_dapo");
    }
    if (env.width * env.height > arch.n_max) fail("arch.n_max is smaller than the grid");
    if (env.max_answer_len != arch.max_answer_len) fail("env.max_answer_len must equal arch.max_answer_len");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
      fail("trainer.adam_* out of range");
    }
    if (monitor.smoothing_window < 1 || monitor.slope_window < 2) fail("monitor windows out of range");
  }
};

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw DomainError("unknown optimizer '" + std::string(s) + "'");
}
inline std::string_view to_string(MaskGranularity g) { return g == MaskGranularity::prompt ? "prompt" : "rollout"; }
inline MaskGranularity parse_granularity(std::string_view s) {
  if (s == "prompt") return MaskGranularity::prompt;
  if (s == "rollout") return MaskGranularity::rollout;
  throw DomainError("unknown mask granularity '" + std::string(s) + "'");
}
inline std::string_view to_string(DynamicSampling d) {
  switch (d) {
    case DynamicSampling::auto_: return "auto";
    case DynamicSampling::on: return "on";
    case DynamicSampling::off: return "off";
  }
  return "?";
}
inline DynamicSampling parse_dynamic_sampling(std::string_view s) {
  if (s == "auto") return DynamicSampling::auto_;
  if (s == "on" || s == "true") return DynamicSampling::on;
  if (s == "off" || s == "false") return DynamicSampling::off;
  throw DomainError("unknown dynamic_sampling value '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

namespace config_detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw SchemaError("'" + key + "': expected a number, got '" + s + "'");
  return v;
}

template <typename I>
I parse_int(const std::string& key, const std::string& s) {
  I v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw SchemaError("'" + key + "': expected an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw SchemaError("'" + key + "': expected true or false, got '" + s + "'");
}

template <typename F>
auto parse_enum(const std::string& key, const std::string& s, F f) {
  try {
    return f(s);
  } catch (const DomainError& e) {
    throw SchemaError("'" + key + "': " + e.what());
  }
}

enum class Kind { number, integer, boolean, text };

struct Entry {
  std::string key;
  Kind kind;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::vector<Entry>& schema() {
  using K = Kind;
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
#define PAPO_NUM(KEY, EXPR)                                                                     \
  e.push_back({KEY, K::number, [](const TrainConfig& c) { return fmt_double(c.EXPR); },         \
               [](TrainConfig& c, const std::string& s) { c.EXPR = parse_double(KEY, s); }})
#define PAPO_INT(KEY, EXPR)                                                                          \
  e.push_back({KEY, K::integer, [](const TrainConfig& c) { return std::to_string(c.EXPR); },         \
               [](TrainConfig& c, const std::string& s) { c.EXPR = parse_int<decltype(c.EXPR)>(KEY, s); }})
#define PAPO_BOOL(KEY, EXPR)                                                                          \
  e.push_back({KEY, K::boolean, [](const TrainConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, \
               [](TrainConfig& c, const std::string& s) { c.EXPR = parse_bool(KEY, s); }})
#define PAPO_ENUM(KEY, EXPR, PARSE)                                                                   \
  e.push_back({KEY, K::text, [](const TrainConfig& c) { return std::string(to_string(c.EXPR)); },    \
               [](TrainConfig& c, const std::string& s) { c.EXPR = parse_enum(KEY, s, PARSE); }})

    PAPO_ENUM("objective.algorithm", objective.algorithm, parse_algorithm);
    PAPO_NUM("objective.gamma", objective.gamma);
    PAPO_NUM("objective.beta", objective.beta);
    PAPO_NUM("objective.eta1", objective.eta1);
    PAPO_NUM("objective.eta2", objective.eta2);
    PAPO_NUM("objective.eps_l", objective.eps_l);
    PAPO_NUM("objective.eps_h", objective.eps_h);
    PAPO_NUM("objective.std_floor", objective.std_floor);
    PAPO_NUM("objective.kl_prcp_clip", objective.kl_prcp_clip);
    PAPO_BOOL("objective.mask_branch_grad", objective.mask_branch_grad);
    PAPO_ENUM("objective.entropy_sign", objective.entropy_sign, parse_entropy_sign);

    PAPO_ENUM("mask.strategy", mask.strategy, parse_mask_strategy);
    PAPO_NUM("mask.ratio", mask.ratio);
    PAPO_ENUM("mask.granularity", mask.granularity, parse_granularity);
    PAPO_ENUM("mask.saliency", mask.saliency, parse_saliency_source);
    PAPO_INT("mask.patch_size", mask.patch_size);

    PAPO_ENUM("env.task", env.task, parse_task_kind);
    PAPO_INT("env.width", env.width);
    PAPO_INT("env.height", env.height);
    PAPO_INT("env.num_colors", env.num_colors);
    e.push_back({"env.dependency", K::text,
                 [](const TrainConfig& c) {
                   return c.env.dependency ? std::string(to_string(*c.env.dependency)) : std::string("mixed");
                 },
                 [](TrainConfig& c, const std::string& s) {
                   if (s == "mixed") {
                     c.env.dependency.reset();
                   } else {
                     c.env.dependency = parse_enum("env.dependency", s, parse_dependency);
                   }
                 }});
    PAPO_INT("env.answer_range", env.answer_range);
    e.push_back({"env.max_answer_len", K::integer,
                 [](const TrainConfig& c) { return std::to_string(c.env.max_answer_len); },
                 [](TrainConfig& c, const std::string& s) {
                   c.env.max_answer_len = c.arch.max_answer_len = parse_int<int>("env.max_answer_len", s);
                 }});

    PAPO_INT("arch.d", arch.d);
    PAPO_INT("arch.h", arch.h);
    PAPO_INT("arch.n_max", arch.n_max);

    PAPO_INT("trainer.group_size", group_size);
    PAPO_INT("trainer.prompts_per_step", prompts_per_step);
    PAPO_INT("trainer.steps", steps);
    PAPO_NUM("trainer.lr", lr);
    PAPO_ENUM("trainer.optimizer", optimizer, parse_optimizer);
    PAPO_NUM("trainer.adam_beta1", adam_beta1);
    PAPO_NUM("trainer.adam_beta2", adam_beta2);
    PAPO_NUM("trainer.adam_eps", adam_eps);
    PAPO_NUM("trainer.weight_decay", weight_decay);
    PAPO_NUM("trainer.max_grad_norm", max_grad_norm);
    PAPO_NUM("trainer.temperature", temperature);
    PAPO_NUM("trainer.init_scale", init_scale);
    PAPO_INT("trainer.seed", seed);
    PAPO_ENUM("trainer.dynamic_sampling", dynamic_sampling, parse_dynamic_sampling);
    PAPO_INT("trainer.max_retries", max_retries);
    PAPO_INT("trainer.checkpoint_every", checkpoint_every);
    PAPO_INT("trainer.threads", threads);
    e.push_back({"trainer.task_dump", K::text, [](const TrainConfig& c) { return c.task_dump; },
                 [](TrainConfig& c, const std::string& s) { c.task_dump = s; }});
    PAPO_BOOL("trainer.record_wall_ms", record_wall_ms);

    PAPO_INT("monitor.smoothing_window", monitor.smoothing_window);
    PAPO_NUM("monitor.prcp_fraction", monitor.prcp_fraction);
    PAPO_NUM("monitor.reward_fraction", monitor.reward_fraction);
    PAPO_INT("monitor.slope_window", monitor.slope_window);
    PAPO_NUM("monitor.entropy_slope", monitor.entropy_slope);
#undef PAPO_NUM
#undef PAPO_INT
#undef PAPO_BOOL
#undef PAPO_ENUM
    return e;
  }();
  return entries;
}

}  // namespace config_detail

inline bool has_config_key(std::string_view key) {
  for (const auto& e : config_detail::schema()) {
    if (e.key == key) return true;
  }
  return false;
}

inline void set_config_value(TrainConfig& cfg, std::string_view key, const std::string& value) {
  for (const auto& e : config_detail::schema()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw SchemaError("unknown config key '" + std::string(key) + "'");
}

inline std::string get_config_value(const TrainConfig& cfg, std::string_view key) {
  for (const auto& e : config_detail::schema()) {
    if (e.key == key) return e.get(cfg);
  }
  throw SchemaError("unknown config key '" + std::string(key) + "'");
}

// "section.key=value"
inline void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw SchemaError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
  };
  set_config_value(cfg, trim(assignment.substr(0, eq)), std::string(trim(assignment.substr(eq + 1))));
}

inline TrainConfig parse_config(std::string_view text, const std::string& origin = "<config>") {
  TrainConfig cfg;
  std::string section;
  size_t lineno = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };

    // Strip comments outside quotes.
    bool in_quote = false;
    size_t cut = line.size();
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_quote = !in_quote;
      if (line[i] == '#' && !in_quote) {
        cut = i;
        break;
      }
    }
    line = line.substr(0, cut);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front()))) line.remove_prefix(1);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw SchemaError(where() + "unterminated section header");
      section = std::string(line.substr(1, line.size() - 2));
      if (section.empty()) throw SchemaError(where() + "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw SchemaError(where() + "expected key = value");
    std::string_view key = line.substr(0, eq), value = line.substr(eq + 1);
    while (!key.empty() && std::isspace(static_cast<unsigned char>(key.back()))) key.remove_suffix(1);
    while (!value.empty() && std::isspace(static_cast<unsigned char>(value.front()))) value.remove_prefix(1);
    if (key.empty()) throw SchemaError(where() + "missing key");
    std::string v(value);
    if (!v.empty() && v.front() == '"') {
      if (v.size() < 2 || v.back() != '"') throw SchemaError(where() + "unterminated string");
      v = v.substr(1, v.size() - 2);
    }
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    try {
      set_config_value(cfg, full, v);
    } catch (const SchemaError& e) {
      throw SchemaError(where() + e.what());
    }
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("config file '" + path + "' not found");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

// Resolved snapshot in the same text format; parse_config(to_text(c)) == c.
inline std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : config_detail::schema()) {
    const auto dot = e.key.find('.');
    const std::string sec = e.key.substr(0, dot), key = e.key.substr(dot + 1);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    std::string v = e.get(cfg);
    if (e.kind == config_detail::Kind::text && (v.empty() || v.find_first_of(" #\"") != std::string::npos)) {
      v = "\"" + v + "\"";
    }
    out += key + " = " + v + "\n";
  }
  return out;
}

inline nlohmann::ordered_json config_to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& e : config_detail::schema()) {
    const auto dot = e.key.find('.');
    const std::string sec = e.key.substr(0, dot), key = e.key.substr(dot + 1);
    const std::string v = e.get(cfg);
    using config_detail::Kind;
    switch (e.kind) {
      case Kind::number: j[sec][key] = config_detail::parse_double(e.key, v); break;
      case Kind::integer: j[sec][key] = nlohmann::ordered_json::parse(v); break;
      case Kind::boolean: j[sec][key] = v == "true"; break;
      case Kind::text: j[sec][key] = v; break;
    }
  }
  return j;
}

// Per-algorithm starting points.
inline TrainConfig preset_config(Algorithm a) {
  TrainConfig c;
  c.objective = ObjectiveConfig::preset(a);
  return c;
}

}  // namespace papo
