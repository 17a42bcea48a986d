#pragma once

// Value types shared by every module, and the counter-based random stream.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "papo/errors.hpp"

namespace papo {

// ---------------------------------------------------------------------------
// Vocabulary
//
// One index space. Text tokens (digits, END, words) occupy [0, kNumTokens);
// the answer tokens (digits, END, first, second) come first so a policy's
// output vocabulary can be the prefix [0, kNumOutputTokens).
// patch symbols occupy [kNumTokens, kNumTokens + kNumPatchSymbols). Policies
// and grids address patch symbols by their local index (0 = empty, 1..C =
// colors, last = MASKED); patch_token() maps them into the shared space.
// ---------------------------------------------------------------------------
namespace vocab {

inline constexpr int kNumDigits = 10;
inline constexpr int kEnd = 10;

enum Word : int {
  kFirst = 11,
  kSecond,
  kHow,
  kMany,
  kCells,
  kAre,
  kThere,
  kWhich,
  kIs,
  kMore,
  kOr,
  kRed,
  kGreen,
  kBlue,
  kYellow,
  kPurple,
  kOrange,
  kNumTokensSentinel
};

inline constexpr int kNumTokens = kNumTokensSentinel;
inline constexpr int kNumOutputTokens = kSecond + 1;
inline constexpr int kMaxColors = 6;

// Patch symbols, local indices.
inline constexpr int kEmpty = 0;
inline constexpr int kMasked = kMaxColors + 1;
inline constexpr int kNumPatchSymbols = kMaxColors + 2;

inline constexpr int color_word(int color) { return kRed + color - 1; }
inline constexpr int patch_symbol(int color) { return color; }
inline constexpr int patch_token(int symbol) { return kNumTokens + symbol; }
inline constexpr bool is_digit(int token) { return token >= 0 && token < kNumDigits; }

inline std::string_view token_name(int token) {
  static constexpr std::array<std::string_view, kNumTokens> names = {
      "0",     "1",      "2",   "3",    "4",     "5",   "6",     "7",  "8",    "9",
      "<end>", "first",  "second", "how", "many", "cells", "are", "there", "which", "is",
      "more",  "or",     "red", "green", "blue", "yellow", "purple", "orange"};
  if (token < 0 || token >= kNumTokens) return "<invalid>";
  return names[static_cast<size_t>(token)];
}

}  // namespace vocab

// ---------------------------------------------------------------------------

using TokenSeq = std::vector<int>;

inline void check_tokens(const TokenSeq& seq, int vocab_size, const char* what) {
  if (seq.empty()) throw ShapeError(std::string(what) + ": token sequence is empty");
  for (int t : seq) {
    if (t < 0 || t >= vocab_size) {
      throw DomainError(std::string(what) + ": token " + std::to_string(t) +
                        " outside vocabulary of size " + std::to_string(vocab_size));
    }
  }
}

// Appends the decimal digits of n as digit tokens.
inline TokenSeq digits_of(int n) {
  if (n < 0) throw DomainError("digits_of: negative value");
  std::string s = std::to_string(n);
  TokenSeq out;
  out.reserve(s.size());
  for (char c : s) out.push_back(c - '0');
  return out;
}

struct GridImage {
  int width = 0;
  int height = 0;
  std::vector<int> cells;  // row-major patch symbols

  GridImage() = default;
  GridImage(int w, int h, int fill = vocab::kEmpty)
      : width(w), height(h), cells(static_cast<size_t>(w) * static_cast<size_t>(h), fill) {
    if (w <= 0 || h <= 0) throw DomainError("GridImage: nonpositive dimensions");
  }

  int size() const { return width * height; }
  int at(int x, int y) const { return cells[static_cast<size_t>(y * width + x)]; }
  void validate() const {
    if (static_cast<int>(cells.size()) != width * height) {
      throw ShapeError("GridImage: cell count does not match width*height");
    }
    for (int c : cells) {
      if (c < 0 || c >= vocab::kNumPatchSymbols) throw DomainError("GridImage: invalid patch symbol");
    }
  }
  friend bool operator==(const GridImage&, const GridImage&) = default;
};

enum class Dependency { low, medium, high };
enum class TaskKind { count_color, compare_counts };

inline std::string_view to_string(Dependency d) {
  switch (d) {
    case Dependency::low: return "low";
    case Dependency::medium: return "medium";
    case Dependency::high: return "high";
  }
  return "?";
}

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::count_color ? "count_color" : "compare_counts";
}

inline Dependency parse_dependency(std::string_view s) {
  if (s == "low") return Dependency::low;
  if (s == "medium") return Dependency::medium;
  if (s == "high") return Dependency::high;
  throw DomainError("unknown dependency level '" + std::string(s) + "'");
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "count_color") return TaskKind::count_color;
  if (s == "compare_counts") return TaskKind::compare_counts;
  throw DomainError("unknown task '" + std::string(s) + "'");
}

// Generator-side facts about a prompt: which patch symbols the answer hinges on.
struct TaskMeta {
  TaskKind kind = TaskKind::count_color;
  std::vector<int> target_symbols;
  friend bool operator==(const TaskMeta&, const TaskMeta&) = default;
};

struct Prompt {
  TokenSeq question;
  GridImage image;
  TokenSeq answer;
  Dependency dependency = Dependency::high;
  std::optional<TaskMeta> meta;
  friend bool operator==(const Prompt&, const Prompt&) = default;
};

// True iff `needle` occurs as a contiguous run inside `hay`.
inline bool contains_subsequence(const TokenSeq& hay, const TokenSeq& needle) {
  if (needle.empty()) return true;
  if (needle.size() > hay.size()) return false;
  for (size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool match = true;
    for (size_t j = 0; j < needle.size() && match; ++j) match = hay[i + j] == needle[j];
    if (match) return true;
  }
  return false;
}

using LogProbTable = std::vector<std::vector<double>>;

// One prompt's G sampled responses with everything the objectives consume.
struct RolloutGroup {
  Prompt prompt;
  std::vector<GridImage> masked_images;  // one per response; equal under per-prompt masking
  std::vector<TokenSeq> responses;
  std::vector<double> rewards;
  LogProbTable logp_new;
  LogProbTable logp_old;
  LogProbTable logp_ref;
  LogProbTable logp_mask;
  bool degenerate = false;  // dynamic sampling ran out of retries

  size_t size() const { return responses.size(); }

  size_t token_count() const {
    size_t n = 0;
    for (const auto& r : responses) n += r.size();
    return n;
  }

  int num_correct() const {
    int n = 0;
    for (double r : rewards) n += r > 0.5 ? 1 : 0;
    return n;
  }

  void validate() const {
    const size_t g = responses.size();
    if (rewards.size() != g) throw ShapeError("RolloutGroup: rewards not aligned with responses");
    auto check = [&](const LogProbTable& t, const char* name) {
      if (t.size() != g) throw ShapeError(std::string("RolloutGroup: ") + name + " has wrong response count");
      for (size_t i = 0; i < g; ++i) {
        if (t[i].size() != responses[i].size()) {
          throw ShapeError(std::string("RolloutGroup: ") + name + " not aligned with response " +
                           std::to_string(i));
        }
      }
    };
    check(logp_new, "logp_new");
    check(logp_old, "logp_old");
    check(logp_ref, "logp_ref");
    check(logp_mask, "logp_mask");
    if (!masked_images.empty() && masked_images.size() != g) {
      throw ShapeError("RolloutGroup: masked_images not aligned with responses");
    }
    for (const auto& r : responses) {
      if (r.empty()) throw ShapeError("RolloutGroup: empty response");
    }
    for (double r : rewards) {
      if (r != 0.0 && r != 1.0) throw DomainError("RolloutGroup: reward outside {0,1}");
    }
  }
};

// ---------------------------------------------------------------------------
// Random streams
//
// A stream is a 64-bit key plus the path that produced it. Draws come from a
// counter hashed with the key (SplitMix64 finalizer), so a stream can be
// replayed from its key alone and children never share state with parents.
// ---------------------------------------------------------------------------

inline constexpr uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct RngStream {
  uint64_t seed = 0;
  uint64_t key = 0;
  std::string path;

  static RngStream root(uint64_t seed, std::string_view label = "root") {
    return RngStream{seed, mix64(mix64(seed ^ 0x5eed5eed5eed5eedULL) ^ fnv1a(label)), std::string(label)};
  }
  friend bool operator==(const RngStream&, const RngStream&) = default;
};

inline RngStream derive_stream(const RngStream& parent, std::string_view label) {
  if (label.empty()) throw DomainError("derive_stream: empty label");
  return RngStream{parent.seed, mix64(parent.key ^ mix64(fnv1a(label) + 0x9e3779b97f4a7c15ULL)),
                   parent.path + "/" + std::string(label)};
}

inline RngStream derive_stream(const RngStream& parent, std::string_view label, uint64_t index) {
  return derive_stream(parent, std::string(label) + std::to_string(index));
}

// Draw engine over a stream. Satisfies UniformRandomBitGenerator, but the
// helpers below are used instead of <random> distributions so that draws are
// identical across standard library implementations.
class Rng {
 public:
  using result_type = uint64_t;
  explicit Rng(const RngStream& s) : key_(s.key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() { return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw DomainError("Rng::below: empty range");
    const uint64_t limit = max() - max() % n;
    uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    // Box-Muller; one of the pair is discarded to keep the engine stateless
    // apart from the counter.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace papo
