#pragma once

// Per-step diagnostics, their persistence, and collapse detection.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "papo/domain.hpp"
#include "papo/errors.hpp"
#include "papo/objectives.hpp"

namespace papo {

struct StepMetrics {
  long step = 0;
  double mean_reward = 0.0;
  double kl_prcp_mean = 0.0;  // per-token k3 of the perception ratio, capped as in the objective
  double kl_ref_mean = 0.0;
  double entropy_pi = 0.0;       // -mean logp per token under the original image
  double entropy_pi_mask = 0.0;  // -mean logp per token under the masked image
  double clip_high_frac = 0.0;
  LossBreakdown loss;
  long degenerate_groups = 0;
  long wall_ms = 0;
  double relatedness_proxy = 0.0;

  void validate() const {
    for (double v : {mean_reward, kl_prcp_mean, kl_ref_mean, entropy_pi, entropy_pi_mask, clip_high_frac,
                     loss.total, loss.surrogate, loss.kl_ref, loss.kl_prcp, loss.ent_pi, loss.ent_mask,
                     relatedness_proxy}) {
      if (!std::isfinite(v)) throw NumericError("StepMetrics: non-finite field at step " + std::to_string(step));
    }
    if (clip_high_frac < 0 || clip_high_frac > 1) throw DomainError("StepMetrics: clip_high_frac outside [0,1]");
  }
};

inline nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mean_reward"] = m.mean_reward;
  j["kl_prcp_mean"] = m.kl_prcp_mean;
  j["kl_ref_mean"] = m.kl_ref_mean;
  j["entropy_pi"] = m.entropy_pi;
  j["entropy_pi_mask"] = m.entropy_pi_mask;
  j["clip_high_frac"] = m.clip_high_frac;
  j["loss"] = {{"total", m.loss.total},       {"surrogate", m.loss.surrogate}, {"kl_ref", m.loss.kl_ref},
               {"kl_prcp", m.loss.kl_prcp},   {"ent_pi", m.loss.ent_pi},       {"ent_mask", m.loss.ent_mask},
               {"clip_high_fraction", m.loss.clip_high_fraction}};
  j["degenerate_groups"] = m.degenerate_groups;
  j["wall_ms"] = m.wall_ms;
  j["relatedness_proxy"] = m.relatedness_proxy;
  return j;
}

inline StepMetrics step_metrics_from_json(const nlohmann::json& j) {
  StepMetrics m;
  m.step = j.at("step").get<long>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.kl_prcp_mean = j.at("kl_prcp_mean").get<double>();
  m.kl_ref_mean = j.at("kl_ref_mean").get<double>();
  m.entropy_pi = j.at("entropy_pi").get<double>();
  m.entropy_pi_mask = j.at("entropy_pi_mask").get<double>();
  m.clip_high_frac = j.at("clip_high_frac").get<double>();
  const auto& l = j.at("loss");
  m.loss.total = l.at("total").get<double>();
  m.loss.surrogate = l.at("surrogate").get<double>();
  m.loss.kl_ref = l.at("kl_ref").get<double>();
  m.loss.kl_prcp = l.at("kl_prcp").get<double>();
  m.loss.ent_pi = l.at("ent_pi").get<double>();
  m.loss.ent_mask = l.at("ent_mask").get<double>();
  m.loss.clip_high_fraction = l.at("clip_high_fraction").get<double>();
  m.degenerate_groups = j.at("degenerate_groups").get<long>();
  m.wall_ms = j.at("wall_ms").get<long>();
  m.relatedness_proxy = j.at("relatedness_proxy").get<double>();
  return m;
}

// ---------------------------------------------------------------------------
// Metrics file: first line {"type":"header","config":...}, then one
// {"type":"step",...} record per step. Each append is flushed and synced.
// ---------------------------------------------------------------------------

class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(const std::string& path, bool append) : path_(path) {
    file_ = std::fopen(path.c_str(), append ? "ab" : "wb");
    if (!file_) throw IoError("cannot open metrics file '" + path + "'");
  }
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;
  MetricsWriter(MetricsWriter&& o) noexcept : path_(std::move(o.path_)), file_(o.file_) { o.file_ = nullptr; }
  MetricsWriter& operator=(MetricsWriter&& o) noexcept {
    if (this != &o) {
      close();
      path_ = std::move(o.path_);
      file_ = o.file_;
      o.file_ = nullptr;
    }
    return *this;
  }
  ~MetricsWriter() { close(); }

  void write_header(const nlohmann::ordered_json& config) {
    nlohmann::ordered_json j;
    j["type"] = "header";
    j["config"] = config;
    write_line(j.dump());
  }

  void write_step(const StepMetrics& m) {
    nlohmann::ordered_json j;
    j["type"] = "step";
    const auto fields = to_json(m);  // keep alive across the loop
    for (const auto& [k, v] : fields.items()) j[k] = v;
    write_line(j.dump());
  }

 private:
  void write_line(const std::string& s) {
    if (!file_) throw IoError("metrics writer is closed");
    if (std::fwrite(s.data(), 1, s.size(), file_) != s.size() || std::fputc('\n', file_) == EOF ||
        std::fflush(file_) != 0 || ::fsync(::fileno(file_)) != 0) {
      throw IoError("failed to append to metrics file '" + path_ + "'");
    }
  }
  void close() {
    if (file_) std::fclose(file_);
    file_ = nullptr;
  }

  std::string path_;
  std::FILE* file_ = nullptr;
};

struct MetricsFile {
  nlohmann::json header;
  std::vector<StepMetrics> steps;
};

inline MetricsFile read_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("metrics file '" + path + "' not found");
  MetricsFile out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "header") {
        out.header = j.at("config");
      } else if (type == "step") {
        out.steps.push_back(step_metrics_from_json(j));
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Smoothing and collapse detection
// ---------------------------------------------------------------------------

// Trailing mean over min(window, i+1) points.
inline std::vector<double> running_average(std::span<const double> series, int window) {
  if (window < 1) throw DomainError("running_average: window must be >= 1");
  std::vector<double> out(series.size());
  const auto w = static_cast<size_t>(window);
  for (size_t i = 0; i < series.size(); ++i) {
    const size_t lo = i + 1 >= w ? i + 1 - w : 0;
    double s = 0.0;
    for (size_t k = lo; k <= i; ++k) s += series[k];
    out[i] = s / static_cast<double>(i + 1 - lo);
  }
  return out;
}

// Ordinary least-squares slope of y against its index.
inline double least_squares_slope(std::span<const double> y) {
  const size_t n = y.size();
  if (n < 2) return 0.0;
  const double mx = (static_cast<double>(n) - 1.0) / 2.0;
  double my = 0.0;
  for (double v : y) my += v;
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxy += dx * (y[i] - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

struct CollapseRules {
  int smoothing_window = 20;
  double prcp_fraction = 0.25;   // tau_p
  double reward_fraction = 0.6;  // tau_r
  int slope_window = 30;         // W
  double entropy_slope = 1e-4;   // tau_e, per step
};

struct CollapseEvidence {
  bool prcp_drop = false;
  bool reward_drop = false;
  bool clip_high_rise = false;
  bool entropy_pi_rise = false;
  bool entropy_mask_rise = false;
};

struct CollapseSignal {
  bool fired = false;
  long at_step = -1;
  CollapseEvidence evidence;
  double kl_prcp_at = 0.0;    // smoothed value at firing (or last step)
  double kl_prcp_peak = 0.0;  // running peak up to that step
};

namespace detail {

inline CollapseEvidence evidence_at(size_t t, const std::vector<double>& kl, const std::vector<double>& reward,
                                    const std::vector<double>& clip, const std::vector<double>& ent,
                                    const std::vector<double>& ent_mask, double kl_peak, double reward_peak,
                                    const CollapseRules& rules) {
  CollapseEvidence e;
  e.prcp_drop = kl_peak > 0 && kl[t] < rules.prcp_fraction * kl_peak;
  e.reward_drop = reward_peak > 0 && reward[t] < rules.reward_fraction * reward_peak;
  const auto w = static_cast<size_t>(rules.slope_window);
  if (t + 1 >= w) {
    auto tail = [&](const std::vector<double>& s) { return std::span<const double>(s.data() + t + 1 - w, w); };
    e.entropy_pi_rise = least_squares_slope(tail(ent)) > rules.entropy_slope;
    e.entropy_mask_rise = least_squares_slope(tail(ent_mask)) > rules.entropy_slope;
    e.clip_high_rise = least_squares_slope(tail(clip)) > 0.0;
  }
  return e;
}

}  // namespace detail

inline CollapseSignal detect_collapse(std::span<const StepMetrics> history, const CollapseRules& rules = {}) {
  CollapseSignal out;
  if (history.empty()) return out;
  auto series = [&](auto field) {
    std::vector<double> s;
    s.reserve(history.size());
    for (const auto& m : history) s.push_back(field(m));
    return running_average(s, rules.smoothing_window);
  };
  const auto kl = series([](const StepMetrics& m) { return m.kl_prcp_mean; });
  const auto reward = series([](const StepMetrics& m) { return m.mean_reward; });
  const auto clip = series([](const StepMetrics& m) { return m.clip_high_frac; });
  const auto ent = series([](const StepMetrics& m) { return m.entropy_pi; });
  const auto ent_mask = series([](const StepMetrics& m) { return m.entropy_pi_mask; });

  double kl_peak = -INFINITY, reward_peak = -INFINITY;
  for (size_t t = 0; t < history.size(); ++t) {
    kl_peak = std::max(kl_peak, kl[t]);
    reward_peak = std::max(reward_peak, reward[t]);
    const CollapseEvidence e = detail::evidence_at(t, kl, reward, clip, ent, ent_mask, kl_peak, reward_peak, rules);
    out.evidence = e;
    out.kl_prcp_at = kl[t];
    out.kl_prcp_peak = kl_peak;
    if (e.prcp_drop && e.reward_drop && (e.entropy_pi_rise || e.entropy_mask_rise)) {
      out.fired = true;
      out.at_step = history[t].step;
      return out;
    }
  }
  return out;
}

// Fraction of non-END response tokens drawn from the digits or the answer's
// own tokens. A response with no such tokens scores 0.
inline double relatedness_proxy(const TokenSeq& response, const Prompt& prompt) {
  size_t considered = 0, related = 0;
  for (int tok : response) {
    if (tok == vocab::kEnd) continue;
    ++considered;
    const bool in_answer = std::find(prompt.answer.begin(), prompt.answer.end(), tok) != prompt.answer.end();
    if (vocab::is_digit(tok) || in_answer) ++related;
  }
  return considered == 0 ? 0.0 : static_cast<double>(related) / static_cast<double>(considered);
}

}  // namespace papo
