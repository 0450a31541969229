#pragma once

// Value types shared by backends, signals and the run store.
//
// Character offsets are byte offsets into the UTF-8 encoded concatenation
// prompt + answer. Log-probabilities and entropies are in nats.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "xmodel/error.hpp"

namespace xmodel {

struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  std::size_t size() const { return end - start; }
  bool overlaps(std::size_t lo, std::size_t hi) const { return start < hi && lo < end; }
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct EntropySupport {
  enum class Kind { exact, top_k, none };

  Kind kind = Kind::exact;
  int k = 0;  // meaningful only for top_k

  static EntropySupport exact() { return {Kind::exact, 0}; }
  static EntropySupport none() { return {Kind::none, 0}; }
  static EntropySupport top_k(int k) {
    if (k < 1) throw Error(ErrorKind::configuration, "top_k entropy support requires k >= 1");
    return {Kind::top_k, k};
  }

  bool available() const { return kind != Kind::none; }
  friend bool operator==(const EntropySupport&, const EntropySupport&) = default;
};

std::string to_string(const EntropySupport& support);

struct DecodeParams {
  int max_new_tokens = 1;
  std::vector<std::string> stop_sequences;
  // Greedy decoding only; kept as a field so it lands in cache keys.
  double temperature = 0.0;

  void validate() const {
    if (max_new_tokens < 1) throw Error(ErrorKind::configuration, "max_new_tokens must be >= 1");
    if (temperature != 0.0) throw Error(ErrorKind::configuration, "only greedy decoding (temperature 0) is supported");
  }
  friend bool operator==(const DecodeParams&, const DecodeParams&) = default;
};

struct TokenScore {
  std::string token_text;
  double logprob = 0.0;             // ln p(realized token), <= 0
  std::optional<double> entropy;    // absent when the backend cannot provide it
  CharSpan char_span;
  friend bool operator==(const TokenScore&, const TokenScore&) = default;
};

enum class FinishReason { stop, length };

inline const char* to_string(FinishReason reason) {
  return reason == FinishReason::stop ? "stop" : "length";
}

struct GeneratedAnswer {
  std::string text;
  FinishReason finish_reason = FinishReason::stop;
  std::optional<std::vector<TokenScore>> generator_token_scores;
  friend bool operator==(const GeneratedAnswer&, const GeneratedAnswer&) = default;
};

struct ScoredSequence {
  std::string prompt_text;
  std::string answer_text;
  std::string scorer_id;
  std::vector<TokenScore> token_scores;  // answer region only, in position order
  std::size_t answer_token_count = 0;
  EntropySupport entropy_support;
  friend bool operator==(const ScoredSequence&, const ScoredSequence&) = default;

  std::size_t answer_begin() const { return prompt_text.size(); }
  std::size_t answer_end() const { return prompt_text.size() + answer_text.size(); }
};

struct BackendCapabilities {
  bool can_generate = false;
  bool can_score = false;
  EntropySupport entropy_support = EntropySupport::none();
  std::optional<std::size_t> vocab_size;
  friend bool operator==(const BackendCapabilities&, const BackendCapabilities&) = default;
};

inline std::string to_string(const EntropySupport& support) {
  switch (support.kind) {
    case EntropySupport::Kind::exact: return "exact";
    case EntropySupport::Kind::none: return "none";
    case EntropySupport::Kind::top_k: return "top_k(" + std::to_string(support.k) + ")";
  }
  return "none";
}

}  // namespace xmodel
