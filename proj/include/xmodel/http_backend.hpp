#pragma once

// Completions-style HTTP backend. Scoring uses prompt echo:
//   POST {prompt: prompt+answer, max_tokens: 0|1, echo: true, logprobs: k}
// and reads choices[0].logprobs.{tokens, token_logprobs, top_logprobs,
// text_offset}. Generation is the same endpoint without echo.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <cstdlib>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "xmodel/backend.hpp"

namespace xmodel {

struct HttpBackendConfig {
  std::string id;
  std::string base_url;  // origin plus optional path prefix, e.g. http://127.0.0.1:8000
  std::string completions_path = "/v1/completions";
  std::string model;        // forwarded as "model" when set
  std::string api_key_env;  // name of the env var holding a bearer token
  int logprobs_k = 0;       // top-k alternatives requested per position
  std::optional<std::size_t> vocab_size;
  bool echo = true;  // server can echo prompt logprobs
  int score_max_tokens = 0;
  bool can_generate = true;
  std::vector<std::string> roles;
  int timeout_seconds = 120;
  int max_attempts = 3;

  void validate() const {
    if (id.empty()) throw Error(ErrorKind::configuration, "backend config needs an id");
    if (base_url.empty()) throw Error(ErrorKind::configuration, "backend '" + id + "' needs a base_url");
    if (logprobs_k < 0) throw Error(ErrorKind::configuration, "logprobs_k must be >= 0");
    if (score_max_tokens != 0 && score_max_tokens != 1) {
      throw Error(ErrorKind::configuration, "score_max_tokens must be 0 or 1");
    }
    if (max_attempts < 1) throw Error(ErrorKind::configuration, "max_attempts must be >= 1");
  }
};

inline void from_json(const nlohmann::json& j, HttpBackendConfig& c) {
  try {
    c.id = j.at("id").get<std::string>();
    c.base_url = j.at("base_url").get<std::string>();
    c.completions_path = j.value("completions_path", c.completions_path);
    c.model = j.value("model", std::string{});
    c.api_key_env = j.value("api_key_env", std::string{});
    c.logprobs_k = j.value("logprobs_k", 0);
    if (j.contains("vocab_size") && !j["vocab_size"].is_null()) c.vocab_size = j["vocab_size"].get<std::size_t>();
    c.echo = j.value("echo", true);
    c.score_max_tokens = j.value("score_max_tokens", 0);
    c.can_generate = j.value("can_generate", true);
    c.roles = j.value("roles", std::vector<std::string>{});
    c.timeout_seconds = j.value("timeout_seconds", 120);
    c.max_attempts = j.value("max_attempts", 3);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::configuration, std::string("bad backend config: ") + e.what());
  }
  c.validate();
}

inline void to_json(nlohmann::json& j, const HttpBackendConfig& c) {
  j = nlohmann::json{{"id", c.id},
                     {"base_url", c.base_url},
                     {"completions_path", c.completions_path},
                     {"model", c.model},
                     {"api_key_env", c.api_key_env},
                     {"logprobs_k", c.logprobs_k},
                     {"echo", c.echo},
                     {"score_max_tokens", c.score_max_tokens},
                     {"can_generate", c.can_generate},
                     {"roles", c.roles},
                     {"timeout_seconds", c.timeout_seconds},
                     {"max_attempts", c.max_attempts}};
  j["vocab_size"] = c.vocab_size ? nlohmann::json(*c.vocab_size) : nlohmann::json(nullptr);
}

namespace detail {

/// Byte offset of the `cp`-th code point in `s`.
inline std::size_t utf8_byte_offset(std::string_view s, std::size_t cp) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) {
      if (seen == cp) return i;
      ++seen;
    }
  }
  return s.size();
}

struct EchoedToken {
  std::string text;
  std::optional<double> logprob;
  std::vector<Candidate> top;
  CharSpan span;
};

/// Decodes a completions `logprobs` block. Offsets are rebuilt from the
/// token texts when they concatenate back to `text`; otherwise the server's
/// text_offset (code points) is converted to bytes.
inline std::vector<EchoedToken> parse_logprobs(const nlohmann::json& lp, std::string_view text, std::size_t base) {
  const auto& tokens = lp.at("tokens");
  const auto& token_lps = lp.at("token_logprobs");
  const nlohmann::json top = lp.value("top_logprobs", nlohmann::json::array());
  const nlohmann::json offsets = lp.value("text_offset", nlohmann::json::array());
  if (!tokens.is_array() || !token_lps.is_array() || token_lps.size() != tokens.size()) {
    throw Error(ErrorKind::protocol, "logprobs.tokens / token_logprobs malformed");
  }

  std::vector<EchoedToken> out(tokens.size());
  std::string joined;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out[i].text = tokens[i].get<std::string>();
    joined += out[i].text;
    if (!token_lps[i].is_null()) out[i].logprob = token_lps[i].get<double>();
    if (top.is_array() && i < top.size() && top[i].is_object()) {
      for (const auto& [tok, v] : top[i].items()) {
        if (!v.is_null()) out[i].top.push_back({tok, v.get<double>()});
      }
    }
  }

  const bool cumulative = joined.size() >= text.size() ? joined.compare(0, text.size(), text) == 0
                                                       : text.compare(0, joined.size(), joined) == 0;
  std::size_t pos = base;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (cumulative || !offsets.is_array() || offsets.size() != out.size()) {
      out[i].span = {pos, pos + out[i].text.size()};
      pos += out[i].text.size();
    } else {
      // text_offset counts code points from the server's frame origin; the
      // first token is anchored at the start of `text`.
      const auto cp = offsets[i].get<std::size_t>() - offsets[0].get<std::size_t>();
      const auto start = base + utf8_byte_offset(text, cp);
      out[i].span = {start, start + out[i].text.size()};
    }
  }
  return out;
}

inline std::vector<Candidate> with_realized(std::vector<Candidate> top, const std::string& text, double logprob) {
  for (const auto& c : top) {
    if (c.text == text) return top;
  }
  top.push_back({text, logprob});
  return top;
}

}  // namespace detail

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto scheme = config_.base_url.find("://");
    const auto path_at = config_.base_url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    origin_ = config_.base_url.substr(0, path_at);
    std::string prefix = path_at == std::string::npos ? "" : config_.base_url.substr(path_at);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    path_ = prefix + config_.completions_path;
    retry_.max_attempts = config_.max_attempts;
  }

  const std::string& id() const override { return config_.id; }
  const HttpBackendConfig& config() const { return config_; }

  BackendCapabilities capabilities() const override {
    BackendCapabilities caps;
    caps.can_generate = config_.can_generate;
    caps.can_score = config_.echo;
    caps.entropy_support = config_.logprobs_k > 0 ? EntropySupport::top_k(config_.logprobs_k) : EntropySupport::none();
    caps.vocab_size = config_.vocab_size;
    return caps;
  }

  void set_retry_policy(RetryPolicy policy) { retry_ = std::move(policy); }

  GeneratedAnswer generate(const std::string& prompt, const DecodeParams& params) override {
    params.validate();
    require_generator(*this);
    nlohmann::json body{{"prompt", prompt}, {"max_tokens", params.max_new_tokens}, {"temperature", 0.0}};
    if (!params.stop_sequences.empty()) body["stop"] = params.stop_sequences;
    if (config_.logprobs_k > 0) body["logprobs"] = config_.logprobs_k;
    const auto choice = first_choice(post(body));

    GeneratedAnswer out;
    out.text = choice.at("text").get<std::string>();
    out.finish_reason = choice.value("finish_reason", std::string("stop")) == "length" ? FinishReason::length
                                                                                      : FinishReason::stop;
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
      std::vector<TokenScore> scores;
      const auto caps = capabilities();
      for (auto& tok : detail::parse_logprobs(choice["logprobs"], out.text, prompt.size())) {
        if (tok.span.start >= prompt.size() + out.text.size() || !tok.logprob) continue;
        TokenScore ts;
        ts.token_text = tok.text;
        ts.logprob = std::min(0.0, *tok.logprob);
        ts.entropy = position_entropy(detail::with_realized(std::move(tok.top), tok.text, ts.logprob),
                                      caps.entropy_support, caps.vocab_size);
        ts.char_span = tok.span;
        scores.push_back(std::move(ts));
      }
      out.generator_token_scores = std::move(scores);
    }
    return out;
  }

  ScoredSequence score_sequence(const std::string& prompt, const std::string& answer) override {
    require_scorer(*this);
    if (answer.empty()) throw Error(ErrorKind::degenerate_input, "answer is empty");
    const std::string full = prompt + answer;
    nlohmann::json body{{"prompt", full},
                        {"max_tokens", config_.score_max_tokens},
                        {"echo", true},
                        {"logprobs", config_.logprobs_k},
                        {"temperature", 0.0}};
    const auto choice = first_choice(post(body));
    if (!choice.contains("logprobs") || !choice["logprobs"].is_object()) {
      throw Error(ErrorKind::protocol, "scoring response has no logprobs");
    }

    const auto caps = capabilities();
    ScoredSequence out;
    out.prompt_text = prompt;
    out.answer_text = answer;
    out.scorer_id = id();
    out.entropy_support = caps.entropy_support;
    for (auto& tok : detail::parse_logprobs(choice["logprobs"], full, 0)) {
      if (tok.span.start >= full.size()) break;  // generated continuation, if any
      if (!tok.span.overlaps(out.answer_begin(), out.answer_end())) continue;
      if (!tok.logprob) throw Error(ErrorKind::protocol, "answer token without a logprob");
      TokenScore ts;
      ts.token_text = tok.text;
      ts.logprob = std::min(0.0, *tok.logprob);
      ts.entropy = position_entropy(detail::with_realized(std::move(tok.top), tok.text, ts.logprob),
                                    caps.entropy_support, caps.vocab_size);
      ts.char_span = clip_to_answer(tok.span, out.answer_begin(), out.answer_end());
      out.token_scores.push_back(std::move(ts));
    }
    if (out.token_scores.empty()) throw Error(ErrorKind::degenerate_input, "answer tokenizes to zero tokens");
    out.answer_token_count = out.token_scores.size();
    return out;
  }

  double judge_ptrue(const std::string& prompt, const std::string& answer) override {
    require_scorer(*this);
    if (config_.logprobs_k < 1) {
      throw Error(ErrorKind::capability, "P(True) needs top-k logprobs (logprobs_k >= 1)");
    }
    nlohmann::json body{{"prompt", ptrue_prompt(prompt, answer)},
                        {"max_tokens", 1},
                        {"logprobs", config_.logprobs_k},
                        {"temperature", 0.0}};
    const auto choice = first_choice(post(body));
    if (!choice.contains("logprobs") || !choice["logprobs"].is_object()) {
      throw Error(ErrorKind::protocol, "P(True) response has no logprobs");
    }
    const auto& lp = choice["logprobs"];
    std::vector<Candidate> cands;
    if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array() && !lp["top_logprobs"].empty() &&
        lp["top_logprobs"][0].is_object()) {
      for (const auto& [tok, v] : lp["top_logprobs"][0].items()) {
        if (!v.is_null()) cands.push_back({tok, v.get<double>()});
      }
    }
    if (lp.contains("tokens") && !lp["tokens"].empty() && !lp["token_logprobs"][0].is_null()) {
      cands = detail::with_realized(std::move(cands), lp["tokens"][0].get<std::string>(),
                                    lp["token_logprobs"][0].get<double>());
    }
    return ptrue_from_candidates(cands);
  }

 private:
  static nlohmann::json first_choice(const nlohmann::json& response) {
    if (!response.contains("choices") || !response["choices"].is_array() || response["choices"].empty()) {
      throw Error(ErrorKind::protocol, "response has no choices");
    }
    return response["choices"][0];
  }

  nlohmann::json post(nlohmann::json body) const {
    if (!config_.model.empty()) body["model"] = config_.model;
    const std::string payload = body.dump();
    return with_retry(retry_, [&] {
      httplib::Client client(origin_);
      client.set_connection_timeout(config_.timeout_seconds, 0);
      client.set_read_timeout(config_.timeout_seconds, 0);
      httplib::Headers headers;
      if (!config_.api_key_env.empty()) {
        if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key) {
          headers.emplace("Authorization", std::string("Bearer ") + key);
        }
      }
      auto res = client.Post(path_, headers, payload, "application/json");
      if (!res) {
        throw Error(ErrorKind::transport, "POST " + origin_ + path_ + " failed: " + httplib::to_string(res.error()));
      }
      if (res->status == 429 || res->status >= 500) {
        throw Error(ErrorKind::transport, "server returned HTTP " + std::to_string(res->status));
      }
      if (res->status != 200) {
        throw Error(ErrorKind::protocol, "server returned HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::protocol, std::string("unparseable response: ") + e.what());
      }
    });
  }

  HttpBackendConfig config_;
  std::string origin_;
  std::string path_;
  RetryPolicy retry_;
};

}  // namespace xmodel
