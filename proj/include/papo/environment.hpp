#pragma once

// Synthetic counting tasks over colored grids, with the amount of
// answer-determining information placed in the text controlled by the
// dependency level, plus the exact-match verifier.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "papo/domain.hpp"
#include "papo/errors.hpp"

namespace papo {

struct TaskSpec {
  TaskKind task = TaskKind::count_color;
  int width = 8;
  int height = 8;
  int num_colors = 3;  // colors 1..num_colors
  // Concrete level, or nullopt for a uniform mix of the three levels.
  std::optional<Dependency> dependency = Dependency::high;
  int answer_range = 9;  // max count of any color
  int max_answer_len = 3;

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError(m); };
    if (width <= 0 || height <= 0) fail("env.width/height must be positive");
    if (num_colors < 2 || num_colors > vocab::kMaxColors) {
      fail("env.num_colors must lie in [2, " + std::to_string(vocab::kMaxColors) + "]");
    }
    if (answer_range < 1) fail("env.answer_range must be >= 1");
    if (num_colors * answer_range > width * height) fail("env: grid too small for num_colors * answer_range cells");
    if (static_cast<int>(digits_of(answer_range).size()) > max_answer_len) {
      fail("env.answer_range is not expressible within max_answer_len digits");
    }
  }
};

namespace detail {

inline void place_colors(GridImage& img, const std::vector<int>& counts, Rng& rng) {
  std::vector<int> cells(img.cells.size());
  for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  // Partial Fisher-Yates: the first sum(counts) positions are a uniform sample.
  int total = 0;
  for (int c : counts) total += c;
  for (int i = 0; i < total; ++i) {
    const auto j = static_cast<size_t>(i) + rng.below(cells.size() - static_cast<size_t>(i));
    std::swap(cells[static_cast<size_t>(i)], cells[j]);
  }
  int pos = 0;
  for (size_t color = 0; color < counts.size(); ++color) {
    for (int k = 0; k < counts[color]; ++k) {
      img.cells[static_cast<size_t>(cells[static_cast<size_t>(pos++)])] = vocab::patch_symbol(static_cast<int>(color) + 1);
    }
  }
}

inline void append(TokenSeq& q, const TokenSeq& more) { q.insert(q.end(), more.begin(), more.end()); }

}  // namespace detail

inline Prompt generate_task(const TaskSpec& spec, const RngStream& stream) {
  spec.validate();
  Rng rng(stream);
  const Dependency dep = spec.dependency ? *spec.dependency : static_cast<Dependency>(rng.below(3));
  const auto nc = static_cast<uint64_t>(spec.num_colors);
  const auto range = static_cast<uint64_t>(spec.answer_range) + 1;

  Prompt p;
  p.dependency = dep;
  p.image = GridImage(spec.width, spec.height);
  std::vector<int> counts(static_cast<size_t>(spec.num_colors));
  TaskMeta meta;
  meta.kind = spec.task;

  using namespace vocab;
  if (spec.task == TaskKind::count_color) {
    for (int& c : counts) c = static_cast<int>(rng.below(range));
    const int target = 1 + static_cast<int>(rng.below(nc));
    const int answer = counts[static_cast<size_t>(target - 1)];
    p.answer = digits_of(answer);
    meta.target_symbols = {patch_symbol(target)};
    const TokenSeq ask = {kHow, kMany, color_word(target), kCells};
    if (dep == Dependency::low) {
      p.question = {kThere, kAre};
      detail::append(p.question, p.answer);
      detail::append(p.question, {color_word(target), kCells});
    } else if (dep == Dependency::medium) {
      // Cue: the count of some other color.
      int other = 1 + static_cast<int>(rng.below(nc - 1));
      if (other >= target) ++other;
      p.question = {kThere, kAre};
      detail::append(p.question, digits_of(counts[static_cast<size_t>(other - 1)]));
      detail::append(p.question, {color_word(other), kCells});
    }
    detail::append(p.question, ask);
  } else {
    const int a = 1 + static_cast<int>(rng.below(nc));
    int b = 1 + static_cast<int>(rng.below(nc - 1));
    if (b >= a) ++b;
    for (int& c : counts) c = static_cast<int>(rng.below(range));
    // Distinct counts for the two compared colors.
    const int ca = static_cast<int>(rng.below(range));
    int cb = static_cast<int>(rng.below(range - 1));
    if (cb >= ca) ++cb;
    counts[static_cast<size_t>(a - 1)] = ca;
    counts[static_cast<size_t>(b - 1)] = cb;
    p.answer = {ca > cb ? kFirst : kSecond};
    meta.target_symbols = {patch_symbol(a), patch_symbol(b)};
    if (dep == Dependency::low) {
      p.question = {p.answer[0], kIs, kMore};
    } else if (dep == Dependency::medium) {
      p.question = {kThere, kAre};
      detail::append(p.question, digits_of(ca));
      detail::append(p.question, {color_word(a), kCells});
    }
    detail::append(p.question, {kWhich, kIs, kMore, color_word(a), kOr, color_word(b)});
  }
  detail::place_colors(p.image, counts, rng);
  p.meta = std::move(meta);
  return p;
}

// 1.0 on exact token match once a trailing END is stripped from the response.
inline double verify(const TokenSeq& answer, const TokenSeq& response) {
  TokenSeq r = response;
  if (!r.empty() && r.back() == vocab::kEnd) r.pop_back();
  return r == answer ? 1.0 : 0.0;
}

// Exact accuracy of the best text-only predictor under the generator's
// distribution, by enumerating what the question text reveals.
inline double blind_oracle_accuracy(const TaskSpec& spec) {
  spec.validate();
  const double range = spec.answer_range + 1;
  auto level = [&](Dependency d) {
    if (d == Dependency::low) return 1.0;
    if (spec.task == TaskKind::count_color) {
      // The target count is uniform on [0, answer_range] and independent of
      // any other color's count.
      return 1.0 / range;
    }
    if (d == Dependency::high) return 0.5;
    // Medium: the first color's count ca is revealed; cb is uniform over the
    // remaining range - 1 values. Best guess: "first" iff ca > cb more often.
    double acc = 0.0;
    for (int ca = 0; ca <= spec.answer_range; ++ca) {
      const double first = ca;                         // cb < ca
      const double second = spec.answer_range - ca;   // cb > ca
      acc += std::max(first, second) / (range - 1);
    }
    return acc / range;
  };
  if (spec.dependency) return level(*spec.dependency);
  return (level(Dependency::low) + level(Dependency::medium) + level(Dependency::high)) / 3.0;
}

// ---------------------------------------------------------------------------
// Task dump: one JSON object per line.
// ---------------------------------------------------------------------------

inline nlohmann::json prompt_to_json(const Prompt& p) {
  nlohmann::json j;
  j["question"] = p.question;
  j["width"] = p.image.width;
  j["height"] = p.image.height;
  j["grid"] = p.image.cells;
  j["answer"] = p.answer;
  j["dependency"] = std::string(to_string(p.dependency));
  if (p.meta) {
    j["task"] = std::string(to_string(p.meta->kind));
    j["targets"] = p.meta->target_symbols;
  }
  return j;
}

inline Prompt prompt_from_json(const nlohmann::json& j) {
  try {
    Prompt p;
    p.question = j.at("question").get<TokenSeq>();
    p.image.width = j.at("width").get<int>();
    p.image.height = j.at("height").get<int>();
    p.image.cells = j.at("grid").get<std::vector<int>>();
    p.image.validate();
    p.answer = j.at("answer").get<TokenSeq>();
    p.dependency = parse_dependency(j.at("dependency").get<std::string>());
    if (j.contains("task")) {
      p.meta = TaskMeta{parse_task_kind(j.at("task").get<std::string>()), j.at("targets").get<std::vector<int>>()};
    }
    check_tokens(p.question, vocab::kNumTokens, "question");
    check_tokens(p.answer, vocab::kNumTokens, "answer");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("task record: ") + e.what());
  }
}

inline void write_task_dump(const std::string& path, const std::vector<Prompt>& prompts) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& p : prompts) os << prompt_to_json(p).dump() << "\n";
  if (!os.flush()) throw IoError("write failed for '" + path + "'");
}

inline std::vector<Prompt> read_task_dump(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open task dump '" + path + "'");
  std::vector<Prompt> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(prompt_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace papo
