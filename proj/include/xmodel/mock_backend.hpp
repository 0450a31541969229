#pragma once

// Deterministic scripted backend. A script supplies the greedy answer for a
// prompt and the next-token distribution at any position; the mock handles
// tokenization, span bookkeeping and keeps an ordered call log.

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xmodel/backend.hpp"

namespace xmodel::mock {

struct TokenPiece {
  std::string text;
  CharSpan span;
};

/// Toy tokenizer: a token is an optional run of leading whitespace followed by
/// either a maximal alphanumeric run or a single other character. Trailing
/// whitespace becomes its own token. Tokens partition the input.
inline std::vector<TokenPiece> tokenize(std::string_view text, std::size_t offset = 0) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::vector<TokenPiece> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    while (i < text.size() && is_space(text[i])) ++i;
    if (i < text.size()) {
      if (is_word(text[i])) {
        while (i < text.size() && is_word(text[i])) ++i;
      } else {
        ++i;
      }
    }
    out.push_back({std::string(text.substr(start, i - start)), {offset + start, offset + i}});
  }
  return out;
}

struct WeightedToken {
  std::string text;
  double prob = 0.0;
};

/// Next-token distribution given the text so far. `realized` names the token
/// that actually follows (absent when scoring an open continuation, e.g. the
/// P(True) position); scripts may use it to place mass on that token.
using DistributionFn =
    std::function<std::vector<WeightedToken>(std::string_view prefix, std::optional<std::string_view> realized)>;

struct Script {
  std::string id = "mock";
  std::map<std::string, std::string, std::less<>> answers;
  std::function<std::string(std::string_view prompt)> answer_fn;  // used when `answers` has no entry
  DistributionFn distribution;
  std::optional<std::size_t> vocab_size;
  EntropySupport entropy_support = EntropySupport::exact();
  bool can_generate = true;
  bool can_score = true;
  bool echo_generator_scores = true;
};

struct Call {
  enum class Kind { generate, score, ptrue };
  Kind kind;
  std::string prompt;
  std::string answer;
};

/// A fully resolved prefill position.
struct Position {
  TokenPiece token;
  double realized_logprob = 0.0;
  std::vector<Candidate> candidates;  // full distribution, descending by logprob
};

inline std::string filler_token(std::size_t i) { return "<f" + std::to_string(i) + ">"; }

/// Uniform over a vocabulary of size V (the realized token is one member).
inline DistributionFn uniform(std::size_t vocab) {
  return [vocab](std::string_view, std::optional<std::string_view> realized) {
    std::vector<WeightedToken> out;
    const double p = 1.0 / static_cast<double>(vocab);
    std::size_t fillers = vocab;
    if (realized) {
      out.push_back({std::string(*realized), p});
      --fillers;
    }
    for (std::size_t i = 0; i < fillers; ++i) out.push_back({filler_token(i), p});
    return out;
  };
}

/// Realized token gets probability `p`; the remainder is spread evenly over
/// V - 1 filler tokens.
inline DistributionFn realized_with(double p, std::size_t vocab) {
  return [p, vocab](std::string_view, std::optional<std::string_view> realized) {
    std::vector<WeightedToken> out;
    const double rest = vocab > 1 ? (1.0 - p) / static_cast<double>(vocab - 1) : 0.0;
    out.push_back({realized ? std::string(*realized) : filler_token(vocab), p});
    for (std::size_t i = 0; i + 1 < vocab; ++i) out.push_back({filler_token(i), rest});
    return out;
  };
}

inline DistributionFn one_hot() { return realized_with(1.0, 1); }

class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(Script script) : script_(std::move(script)) {
    if (!script_.distribution) throw Error(ErrorKind::configuration, "mock script needs a distribution");
  }

  const std::string& id() const override { return script_.id; }

  BackendCapabilities capabilities() const override {
    return {script_.can_generate, script_.can_score,
            script_.can_score ? script_.entropy_support : EntropySupport::none(), script_.vocab_size};
  }

  GeneratedAnswer generate(const std::string& prompt, const DecodeParams& params) override {
    params.validate();
    log({Call::Kind::generate, prompt, {}});
    if (!script_.can_generate) throw Error(ErrorKind::configuration, "mock '" + id() + "' cannot generate");

    const std::string scripted = scripted_answer(prompt);
    const auto pieces = tokenize(scripted, prompt.size());

    GeneratedAnswer out;
    std::vector<TokenScore> scores;
    std::string text;
    out.finish_reason = FinishReason::stop;
    bool hit_stop = false;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (static_cast<int>(i) == params.max_new_tokens) {
        out.finish_reason = FinishReason::length;
        break;
      }
      text += pieces[i].text;
      for (const auto& stop : params.stop_sequences) {
        if (stop.empty()) continue;
        if (auto at = text.find(stop); at != std::string::npos) {
          text.resize(at);
          hit_stop = true;
          break;
        }
      }
      if (hit_stop) break;
      const std::string prefix = prompt + scripted.substr(0, pieces[i].span.start - prompt.size());
      scores.push_back(score_piece(prefix, pieces[i]));
    }
    if (!hit_stop && out.finish_reason == FinishReason::stop &&
        static_cast<int>(pieces.size()) >= params.max_new_tokens) {
      out.finish_reason = FinishReason::length;
    }
    out.text = std::move(text);
    if (script_.echo_generator_scores) out.generator_token_scores = std::move(scores);
    return out;
  }

  ScoredSequence score_sequence(const std::string& prompt, const std::string& answer) override {
    log({Call::Kind::score, prompt, answer});
    if (!script_.can_score) throw Error(ErrorKind::capability, "mock '" + id() + "' cannot score");
    if (answer.empty()) throw Error(ErrorKind::degenerate_input, "answer is empty");

    const std::string full = prompt + answer;
    ScoredSequence out;
    out.prompt_text = prompt;
    out.answer_text = answer;
    out.scorer_id = id();
    out.entropy_support = capabilities().entropy_support;
    for (const auto& piece : tokenize(full)) {
      if (!piece.span.overlaps(out.answer_begin(), out.answer_end())) continue;
      TokenScore ts = score_piece(full.substr(0, piece.span.start), piece);
      ts.char_span = clip_to_answer(piece.span, out.answer_begin(), out.answer_end());
      out.token_scores.push_back(std::move(ts));
    }
    if (out.token_scores.empty()) throw Error(ErrorKind::degenerate_input, "answer tokenizes to zero tokens");
    out.answer_token_count = out.token_scores.size();
    return out;
  }

  double judge_ptrue(const std::string& prompt, const std::string& answer) override {
    log({Call::Kind::ptrue, prompt, answer});
    if (!script_.can_score) throw Error(ErrorKind::capability, "mock '" + id() + "' cannot score");
    return ptrue_from_candidates(next_token_candidates(ptrue_prompt(prompt, answer)));
  }

  /// Scores every token of `text`. The first position is scored too (against
  /// an empty prefix), which real servers usually leave null.
  std::vector<Position> prefill(std::string_view text) const {
    std::vector<Position> out;
    for (auto& piece : tokenize(text)) {
      auto cands = candidates(text.substr(0, piece.span.start), piece.text);
      out.push_back({piece, realized_logprob(cands, piece.text), std::move(cands)});
    }
    return out;
  }

  /// Distribution over the continuation of `prefix`, descending.
  std::vector<Candidate> next_token_candidates(std::string_view prefix) const {
    return candidates(prefix, std::nullopt);
  }

  std::string scripted_answer(std::string_view prompt) const {
    if (auto it = script_.answers.find(prompt); it != script_.answers.end()) return it->second;
    if (script_.answer_fn) return script_.answer_fn(prompt);
    throw Error(ErrorKind::configuration, "mock '" + script_.id + "' has no scripted answer for prompt");
  }

  std::vector<Call> calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

  std::size_t call_count() const {
    std::lock_guard lock(mu_);
    return calls_.size();
  }

  std::size_t call_count(Call::Kind kind) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(calls_.begin(), calls_.end(), [kind](const Call& c) { return c.kind == kind; }));
  }

  void clear_calls() {
    std::lock_guard lock(mu_);
    calls_.clear();
  }

 private:
  void log(Call call) {
    std::lock_guard lock(mu_);
    calls_.push_back(std::move(call));
  }

  std::vector<Candidate> candidates(std::string_view prefix, std::optional<std::string_view> realized) const {
    auto weighted = script_.distribution(prefix, realized);
    double total = 0.0;
    for (const auto& w : weighted) total += w.prob;
    if (!(total > 0.0)) throw Error(ErrorKind::configuration, "mock distribution has no mass");
    std::vector<Candidate> out;
    out.reserve(weighted.size());
    for (auto& w : weighted) {
      if (w.prob > 0.0) out.push_back({std::move(w.text), std::log(w.prob / total)});
    }
    std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.logprob > b.logprob; });
    return out;
  }

  static double realized_logprob(const std::vector<Candidate>& cands, std::string_view token) {
    for (const auto& c : cands) {
      if (c.text == token) return c.logprob;
    }
    throw Error(ErrorKind::configuration, "mock distribution gives no mass to realized token '" + std::string(token) + "'");
  }

  TokenScore score_piece(std::string_view prefix, const TokenPiece& piece) const {
    const auto cands = candidates(prefix, piece.text);
    TokenScore ts;
    ts.token_text = piece.text;
    ts.logprob = std::min(0.0, realized_logprob(cands, piece.text));
    ts.entropy = position_entropy(cands, capabilities().entropy_support, script_.vocab_size);
    ts.char_span = piece.span;
    return ts;
  }

  Script script_;
  mutable std::mutex mu_;
  std::vector<Call> calls_;
};

}  // namespace xmodel::mock
