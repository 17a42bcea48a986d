#pragma once

// Corrupted-image construction: random patch masking and saliency-driven
// top-k masking.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "papo/domain.hpp"
#include "papo/errors.hpp"

namespace papo {

enum class MaskStrategy { random, semantic };
enum class SaliencySource { attention, oracle };

inline std::string_view to_string(MaskStrategy s) { return s == MaskStrategy::random ? "random" : "semantic"; }
inline MaskStrategy parse_mask_strategy(std::string_view s) {
  if (s == "random") return MaskStrategy::random;
  if (s == "semantic") return MaskStrategy::semantic;
  throw DomainError("unknown mask strategy '" + std::string(s) + "'");
}

inline std::string_view to_string(SaliencySource s) { return s == SaliencySource::attention ? "attention" : "oracle"; }
inline SaliencySource parse_saliency_source(std::string_view s) {
  if (s == "attention") return SaliencySource::attention;
  if (s == "oracle") return SaliencySource::oracle;
  throw DomainError("unknown saliency source '" + std::string(s) + "'");
}

struct PatchMask {
  int width = 0;
  int height = 0;
  std::vector<bool> masked;
  MaskStrategy strategy = MaskStrategy::random;
  double ratio = 0.0;

  int count() const { return static_cast<int>(std::count(masked.begin(), masked.end(), true)); }
};

struct SaliencyMap {
  std::vector<double> scores;
  SaliencySource provenance = SaliencySource::attention;
};

inline GridImage apply_mask(const GridImage& image, const PatchMask& mask) {
  GridImage out = image;
  for (size_t j = 0; j < out.cells.size(); ++j) {
    if (mask.masked[j]) out.cells[j] = vocab::kMasked;
  }
  return out;
}

// Each patch is masked independently when its uniform draw falls below p.
inline std::pair<GridImage, PatchMask> random_mask(const GridImage& image, double p, const RngStream& stream) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("random_mask: p must lie in [0,1]");
  image.validate();
  Rng rng(stream);
  PatchMask m{image.width, image.height, std::vector<bool>(image.cells.size(), false), MaskStrategy::random, p};
  for (size_t j = 0; j < m.masked.size(); ++j) m.masked[j] = rng.uniform() < p;
  return {apply_mask(image, m), std::move(m)};
}

// attention[l][h] is an N x N row-stochastic matrix (row = query patch).
// Per layer: average heads, then score patch i by the attention it receives
// (column sum). Final score: mean over the selected layers.
using AttentionMatrix = std::vector<std::vector<double>>;
using AttentionStack = std::vector<std::vector<AttentionMatrix>>;  // [layer][head]

inline SaliencyMap saliency_from_attention(const AttentionStack& attention, std::span<const int> layers) {
  if (layers.empty()) throw ValidationError("saliency_from_attention: no layers selected");
  size_t n = 0;
  for (int l : layers) {
    if (l < 0 || static_cast<size_t>(l) >= attention.size()) {
      throw ValidationError("saliency_from_attention: layer index " + std::to_string(l) + " out of range");
    }
    const auto& heads = attention[static_cast<size_t>(l)];
    if (heads.empty()) throw ValidationError("saliency_from_attention: layer has no heads");
    for (const auto& a : heads) {
      if (n == 0) n = a.size();
      if (a.size() != n || n == 0) throw ValidationError("saliency_from_attention: inconsistent patch count");
      for (const auto& row : a) {
        if (row.size() != n) throw ValidationError("saliency_from_attention: attention matrix is not square");
        double s = 0.0;
        for (double x : row) {
          if (!std::isfinite(x) || x < 0) throw ValidationError("saliency_from_attention: invalid attention weight");
          s += x;
        }
        if (std::abs(s - 1.0) > 1e-6) throw ValidationError("saliency_from_attention: row is not stochastic");
      }
    }
  }

  SaliencyMap out;
  out.provenance = SaliencySource::attention;
  out.scores.assign(n, 0.0);
  for (int l : layers) {
    const auto& heads = attention[static_cast<size_t>(l)];
    const double inv_h = 1.0 / static_cast<double>(heads.size());
    std::vector<double> layer_scores(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (const auto& a : heads) mean += a[j][i];
        layer_scores[i] += mean * inv_h;
      }
    }
    for (size_t i = 0; i < n; ++i) out.scores[i] += layer_scores[i];
  }
  const double inv_l = 1.0 / static_cast<double>(layers.size());
  for (double& s : out.scores) s *= inv_l;
  return out;
}

// Masks exactly floor(p*N) patches with the highest saliency; ties go to the
// lower patch index.
inline std::pair<GridImage, PatchMask> semantic_mask(const GridImage& image, const SaliencyMap& sal, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("semantic_mask: p must lie in [0,1]");
  image.validate();
  const size_t n = image.cells.size();
  if (sal.scores.size() != n) throw ShapeError("semantic_mask: saliency map does not cover the image");
  const auto k = static_cast<size_t>(std::floor(p * static_cast<double>(n)));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return sal.scores[a] > sal.scores[b]; });
  PatchMask m{image.width, image.height, std::vector<bool>(n, false), MaskStrategy::semantic, p};
  for (size_t r = 0; r < std::min(k, n); ++r) m.masked[order[r]] = true;
  return {apply_mask(image, m), std::move(m)};
}

// Stand-in saliency from generator metadata: 1 on task-relevant patches.
inline SaliencyMap oracle_saliency(const Prompt& prompt) {
  if (!prompt.meta) throw UnsupportedError("oracle_saliency: prompt carries no task metadata");
  SaliencyMap out;
  out.provenance = SaliencySource::oracle;
  out.scores.assign(prompt.image.cells.size(), 0.0);
  const auto& targets = prompt.meta->target_symbols;
  for (size_t j = 0; j < out.scores.size(); ++j) {
    if (std::find(targets.begin(), targets.end(), prompt.image.cells[j]) != targets.end()) out.scores[j] = 1.0;
  }
  return out;
}

}  // namespace papo
