#pragma once

// Per-instance disagreement signals. Perplexity-style signals are kept in log
// space: log_cmp is the verifier's mean negative log-likelihood over answer
// tokens, so CMP = exp(log_cmp). Rankings are identical either way.

#include <cctype>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/types.hpp"

namespace xmodel {

struct AnswerSpan {
  enum class Mode { full, final_answer };

  Mode mode = Mode::full;
  std::string marker = "ANSWER:";

  static AnswerSpan full() { return {}; }
  static AnswerSpan final_answer(std::string marker = "ANSWER:") {
    if (marker.empty()) throw Error(ErrorKind::configuration, "final_answer span needs a marker");
    return {Mode::final_answer, std::move(marker)};
  }
};

/// Mean negative log-likelihood of the realized tokens.
inline double cmp(std::span<const TokenScore> tokens) {
  if (tokens.empty()) throw Error(ErrorKind::degenerate_input, "no answer tokens to score");
  double sum = 0.0;
  for (const auto& t : tokens) sum += t.logprob;
  // -0.0 would print oddly and compare equal anyway.
  const double mean_nll = -sum / static_cast<double>(tokens.size());
  return mean_nll == 0.0 ? 0.0 : mean_nll;
}

inline double cmp(const ScoredSequence& scored) { return cmp(scored.token_scores); }

/// Mean per-position entropy in nats.
inline double mean_entropy(std::span<const TokenScore> tokens) {
  if (tokens.empty()) throw Error(ErrorKind::degenerate_input, "no answer tokens to score");
  double sum = 0.0;
  for (const auto& t : tokens) {
    if (!t.entropy) throw Error(ErrorKind::capability, "token entropy not available");
    sum += *t.entropy;
  }
  return sum / static_cast<double>(tokens.size());
}

inline double cme(const ScoredSequence& scored) {
  if (!scored.entropy_support.available()) {
    throw Error(ErrorKind::capability, "scorer '" + scored.scorer_id + "' reports no entropy support");
  }
  return mean_entropy(scored.token_scores);
}

inline const std::vector<TokenScore>& generator_scores(const GeneratedAnswer& generated) {
  if (!generated.generator_token_scores) {
    throw Error(ErrorKind::capability, "generator did not echo logprobs for its answer");
  }
  return *generated.generator_token_scores;
}

inline double g_ppl(const GeneratedAnswer& generated) { return cmp(generator_scores(generated)); }

inline double g_ent(const GeneratedAnswer& generated) { return mean_entropy(generator_scores(generated)); }

/// Byte range of the numeric final answer inside `answer`: the maximal
/// sign/digit/comma/decimal run after the last occurrence of `marker`
/// (whitespace and '$' between the marker and the number are skipped).
inline CharSpan final_answer_region(std::string_view answer, std::string_view marker) {
  const auto at = answer.rfind(marker);
  if (at == std::string_view::npos) {
    throw Error(ErrorKind::marker_not_found, "marker '" + std::string(marker) + "' not found in answer");
  }
  auto digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
  std::size_t i = at + marker.size();
  while (i < answer.size() && (std::isspace(static_cast<unsigned char>(answer[i])) || answer[i] == '$')) ++i;
  const std::size_t start = i;
  if (i < answer.size() && (answer[i] == '-' || answer[i] == '+')) ++i;
  bool seen_digit = false, seen_point = false;
  while (i < answer.size()) {
    const char c = answer[i];
    if (digit(c)) {
      seen_digit = true;
    } else if (c == ',' && seen_digit && i + 1 < answer.size() && digit(answer[i + 1])) {
    } else if (c == '.' && !seen_point && i + 1 < answer.size() && digit(answer[i + 1])) {
      seen_point = true;
    } else {
      break;
    }
    ++i;
  }
  if (!seen_digit) {
    throw Error(ErrorKind::marker_not_found, "no number follows the last '" + std::string(marker) + "' marker");
  }
  return {start, i};
}

/// CMP restricted to tokens overlapping the final numeric answer.
inline double cmp_final(const ScoredSequence& scored, const AnswerSpan& span) {
  if (span.mode != AnswerSpan::Mode::final_answer) return cmp(scored);
  const auto region = final_answer_region(scored.answer_text, span.marker);
  const auto lo = scored.answer_begin() + region.start;
  const auto hi = scored.answer_begin() + region.end;
  std::vector<TokenScore> kept;
  for (const auto& t : scored.token_scores) {
    if (t.char_span.overlaps(lo, hi)) kept.push_back(t);
  }
  return cmp(kept);
}

struct SignalRecord {
  std::string instance_id;
  std::optional<double> log_cmp;
  std::optional<double> cme;
  std::optional<double> log_gppl;
  std::optional<double> g_ent;
  std::optional<double> log_cmp_final;
  std::optional<double> p_true;
  std::optional<bool> generator_correct;
  std::optional<bool> verifier_correct;
  friend bool operator==(const SignalRecord&, const SignalRecord&) = default;
};

enum class Signal { cmp, cme, g_ppl, g_ent, cmp_final, p_true };

inline constexpr Signal kAllSignals[] = {Signal::g_ent, Signal::g_ppl, Signal::cmp,
                                         Signal::cme,   Signal::cmp_final, Signal::p_true};

inline std::string_view to_string(Signal s) {
  switch (s) {
    case Signal::cmp: return "cmp";
    case Signal::cme: return "cme";
    case Signal::g_ppl: return "g_ppl";
    case Signal::g_ent: return "g_ent";
    case Signal::cmp_final: return "cmp_final";
    case Signal::p_true: return "p_true";
  }
  return "?";
}

inline Signal parse_signal(std::string_view name) {
  for (auto s : kAllSignals) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::configuration, "unknown signal '" + std::string(name) + "'");
}

inline std::optional<double> stored_value(const SignalRecord& r, Signal s) {
  switch (s) {
    case Signal::cmp: return r.log_cmp;
    case Signal::cme: return r.cme;
    case Signal::g_ppl: return r.log_gppl;
    case Signal::g_ent: return r.g_ent;
    case Signal::cmp_final: return r.log_cmp_final;
    case Signal::p_true: return r.p_true;
  }
  return std::nullopt;
}

/// Value oriented so that higher means "more likely wrong". P(True) is a
/// confidence, so it is flipped.
inline std::optional<double> suspicion(const SignalRecord& r, Signal s) {
  auto v = stored_value(r, s);
  if (v && s == Signal::p_true) return 1.0 - *v;
  return v;
}

/// Bundles every signal computable from the inputs. Missing capabilities
/// leave the corresponding fields empty.
inline SignalRecord signal_vector(std::string instance_id, const GeneratedAnswer& generated,
                                  const ScoredSequence& verifier_scored, const AnswerSpan& span,
                                  std::optional<double> ptrue = std::nullopt) {
  SignalRecord r;
  r.instance_id = std::move(instance_id);
  r.log_cmp = cmp(verifier_scored);
  if (verifier_scored.entropy_support.available()) r.cme = cme(verifier_scored);
  if (generated.generator_token_scores && !generated.generator_token_scores->empty()) {
    r.log_gppl = g_ppl(generated);
    bool all_entropy = true;
    for (const auto& t : *generated.generator_token_scores) all_entropy = all_entropy && t.entropy.has_value();
    if (all_entropy) r.g_ent = g_ent(generated);
  }
  if (span.mode == AnswerSpan::Mode::final_answer) r.log_cmp_final = cmp_final(verifier_scored, span);
  if (ptrue) {
    if (*ptrue < 0.0 || *ptrue > 1.0) throw Error(ErrorKind::degenerate_input, "P(True) outside [0, 1]");
    r.p_true = ptrue;
  }
  return r;
}

inline void to_json(nlohmann::json& j, const SignalRecord& r) {
  j = nlohmann::json{{"id", r.instance_id}};
  auto put = [&j](const char* key, const auto& v) {
    if (v) j[key] = *v;
  };
  put("log_cmp", r.log_cmp);
  put("cme", r.cme);
  put("log_gppl", r.log_gppl);
  put("g_ent", r.g_ent);
  put("log_cmp_final", r.log_cmp_final);
  put("p_true", r.p_true);
  put("generator_correct", r.generator_correct);
  put("verifier_correct", r.verifier_correct);
}

inline void from_json(const nlohmann::json& j, SignalRecord& r) {
  r.instance_id = j.at("id").get<std::string>();
  auto get = [&j](const char* key, auto& out) {
    if (j.contains(key) && !j[key].is_null()) out = j[key].get<typename std::decay_t<decltype(out)>::value_type>();
  };
  get("log_cmp", r.log_cmp);
  get("cme", r.cme);
  get("log_gppl", r.log_gppl);
  get("g_ent", r.g_ent);
  get("log_cmp_final", r.log_cmp_final);
  get("p_true", r.p_true);
  get("generator_correct", r.generator_correct);
  get("verifier_correct", r.verifier_correct);
}

}  // namespace xmodel
