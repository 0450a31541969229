#pragma once

// A model is reachable through two capabilities: greedy generation and
// prefill scoring. Verifiers only ever score.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <thread>

#include "xmodel/entropy.hpp"
#include "xmodel/error.hpp"
#include "xmodel/types.hpp"

namespace xmodel {

inline constexpr std::string_view kPTrueTemplateVersion = "ptrue-v1";

/// Verification prompt used for P(True). The Yes/No continuation is read at
/// the position right after the trailing "Answer:".
inline std::string ptrue_prompt(std::string_view prompt, std::string_view answer) {
  std::string out;
  out.reserve(prompt.size() + answer.size() + 80);
  out.append(prompt);
  out.append("\nProposed answer: ");
  out.append(answer);
  out.append("\nIs the proposed answer correct? Yes or No.\nAnswer:");
  return out;
}

inline std::string normalize_token_text(std::string_view text) {
  std::size_t b = 0, e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  std::string out(text.substr(b, e - b));
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

/// p_yes / (p_yes + p_no) over the candidates at the answer position. Case and
/// whitespace variants of each word are summed.
inline double ptrue_from_candidates(std::span<const Candidate> candidates) {
  double yes = 0.0, no = 0.0;
  bool seen_yes = false, seen_no = false;
  for (const auto& c : candidates) {
    const auto norm = normalize_token_text(c.text);
    if (norm == "yes") {
      yes += std::exp(c.logprob);
      seen_yes = true;
    } else if (norm == "no") {
      no += std::exp(c.logprob);
      seen_no = true;
    }
  }
  if (!seen_yes && !seen_no) {
    throw Error(ErrorKind::capability, "neither a Yes nor a No token is present at the verification position");
  }
  if (yes + no <= 0.0) return 0.5;
  return yes / (yes + no);
}

class Backend {
 public:
  virtual ~Backend() = default;

  virtual const std::string& id() const = 0;
  virtual BackendCapabilities capabilities() const = 0;
  virtual GeneratedAnswer generate(const std::string& prompt, const DecodeParams& params) = 0;
  virtual ScoredSequence score_sequence(const std::string& prompt, const std::string& answer) = 0;
  virtual double judge_ptrue(const std::string& prompt, const std::string& answer) = 0;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_delay{200};
  double multiplier = 2.0;
  // Injectable for tests.
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

/// Runs `fn`, retrying transport errors with exponential backoff. Any other
/// error propagates immediately.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto delay = policy.initial_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const Error& e) {
      if (!e.retryable() || attempt >= policy.max_attempts) throw;
    }
    policy.sleep(delay);
    delay = std::chrono::milliseconds(static_cast<long long>(delay.count() * policy.multiplier));
  }
}

inline void require_generator(const Backend& backend) {
  if (!backend.capabilities().can_generate) {
    throw Error(ErrorKind::configuration, "backend '" + backend.id() + "' does not support generation");
  }
}

inline void require_scorer(const Backend& backend) {
  if (!backend.capabilities().can_score) {
    throw Error(ErrorKind::configuration, "backend '" + backend.id() + "' does not support prefill scoring");
  }
}

/// Clip a scorer token's span to the answer region. A token straddling the
/// prompt/answer boundary counts as an answer token.
inline CharSpan clip_to_answer(CharSpan span, std::size_t answer_begin, std::size_t answer_end) {
  return {std::max(span.start, answer_begin), std::min(span.end, answer_end)};
}

}  // namespace xmodel
