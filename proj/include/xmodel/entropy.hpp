#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmodel/types.hpp"

namespace xmodel {

/// One candidate continuation at a position, as echoed by a scorer.
struct Candidate {
  std::string text;
  double logprob = 0.0;
};

/// Shannon entropy in nats of a probability vector. Zero entries contribute 0.
inline double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Entropy of the top-k candidates plus one pseudo-token carrying whatever
/// mass the top-k list leaves unaccounted for. With k+1 <= V this never
/// exceeds ln(k+1) <= ln V.
inline double topk_residual_entropy(std::span<const double> topk_logprobs) {
  std::vector<double> probs;
  probs.reserve(topk_logprobs.size() + 1);
  double mass = 0.0;
  for (double lp : topk_logprobs) {
    const double p = std::exp(lp);
    probs.push_back(p);
    mass += p;
  }
  probs.push_back(std::max(0.0, 1.0 - mass));
  return shannon_entropy(probs);
}

/// Clamp a computed entropy into [0, ln V] when V is known; float noise on
/// uniform distributions can otherwise land one ulp outside the bound.
inline double clamp_entropy(double h, std::optional<std::size_t> vocab_size) {
  h = std::max(0.0, h);
  if (vocab_size && *vocab_size > 0) h = std::min(h, std::log(static_cast<double>(*vocab_size)));
  return h;
}

/// Position entropy under a given support from a candidate list. For `exact`
/// the list must be the full distribution; for `top_k` only the k most likely
/// entries are used.
inline std::optional<double> position_entropy(std::span<const Candidate> candidates, EntropySupport support,
                                              std::optional<std::size_t> vocab_size) {
  switch (support.kind) {
    case EntropySupport::Kind::none:
      return std::nullopt;
    case EntropySupport::Kind::exact: {
      std::vector<double> probs;
      probs.reserve(candidates.size());
      for (const auto& c : candidates) probs.push_back(std::exp(c.logprob));
      return clamp_entropy(shannon_entropy(probs), vocab_size);
    }
    case EntropySupport::Kind::top_k: {
      std::vector<double> lps;
      lps.reserve(candidates.size());
      for (const auto& c : candidates) lps.push_back(c.logprob);
      std::sort(lps.begin(), lps.end(), std::greater<>());
      if (lps.size() > static_cast<std::size_t>(support.k)) lps.resize(support.k);
      return clamp_entropy(topk_residual_entropy(lps), vocab_size);
    }
  }
  return std::nullopt;
}

}  // namespace xmodel
