#pragma once

// In-process completions server backed by a ScriptedBackend. Speaks the
// subset of the completions wire format that HttpBackend uses: echo scoring,
// greedy generation with per-token logprobs, and one-token continuations
// with top-k maps. Can be told to fail the next N requests with a status.

#include <httplib.h>

#include <atomic>
#include <cmath>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "xmodel/mock_backend.hpp"

namespace testsupport {

class FakeCompletionsServer {
 public:
  explicit FakeCompletionsServer(xmodel::mock::ScriptedBackend& model) : model_(model) {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeCompletionsServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  void fail_next(int count, int status) {
    fail_status_ = status;
    fail_remaining_ = count;
  }

  std::size_t requests() const { return requests_.load(); }
  nlohmann::json last_body() const {
    std::lock_guard lock(mu_);
    return last_body_;
  }

 private:
  static nlohmann::json top_map(const std::vector<xmodel::Candidate>& cands, int k) {
    nlohmann::json m = nlohmann::json::object();
    for (int i = 0; i < k && i < static_cast<int>(cands.size()); ++i) m[cands[i].text] = cands[i].logprob;
    return m;
  }

  void handle(const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    if (fail_remaining_ > 0) {
      --fail_remaining_;
      res.status = fail_status_;
      res.set_content("{\"error\":\"injected\"}", "application/json");
      return;
    }
    const auto body = nlohmann::json::parse(req.body);
    {
      std::lock_guard lock(mu_);
      last_body_ = body;
    }
    const std::string prompt = body.at("prompt").get<std::string>();
    const int k = body.value("logprobs", 0);
    const int max_tokens = body.value("max_tokens", 16);
    nlohmann::json choice;

    if (body.value("echo", false)) {
      nlohmann::json tokens = nlohmann::json::array(), lps = nlohmann::json::array(), tops = nlohmann::json::array(),
                     offsets = nlohmann::json::array();
      bool first = true;
      for (const auto& pos : model_.prefill(prompt)) {
        tokens.push_back(pos.token.text);
        // Servers leave the first position unscored.
        lps.push_back(first ? nlohmann::json(nullptr) : nlohmann::json(pos.realized_logprob));
        tops.push_back(first ? nlohmann::json(nullptr) : top_map(pos.candidates, k));
        offsets.push_back(pos.token.span.start);
        first = false;
      }
      choice = {{"text", prompt},
                {"finish_reason", "length"},
                {"logprobs", {{"tokens", tokens}, {"token_logprobs", lps}, {"top_logprobs", tops}, {"text_offset", offsets}}}};
    } else {
      std::string answer;
      bool scripted = true;
      try {
        answer = model_.scripted_answer(prompt);
      } catch (const xmodel::Error&) {
        scripted = false;
      }
      if (scripted) {
        xmodel::DecodeParams params{max_tokens, body.value("stop", std::vector<std::string>{}), 0.0};
        const auto g = model_.generate(prompt, params);
        nlohmann::json tokens = nlohmann::json::array(), lps = nlohmann::json::array(), tops = nlohmann::json::array(),
                       offsets = nlohmann::json::array();
        std::string so_far = prompt;
        for (const auto& t : g.generator_token_scores.value_or(std::vector<xmodel::TokenScore>{})) {
          tokens.push_back(t.token_text);
          lps.push_back(t.logprob);
          tops.push_back(top_map(model_.next_token_candidates(so_far), k));
          offsets.push_back(t.char_span.start);
          so_far += t.token_text;
        }
        choice = {{"text", g.text}, {"finish_reason", xmodel::to_string(g.finish_reason)}};
        if (k > 0) {
          choice["logprobs"] = {{"tokens", tokens}, {"token_logprobs", lps}, {"top_logprobs", tops}, {"text_offset", offsets}};
        }
      } else {
        // Open continuation (e.g. the P(True) position): emit the argmax token.
        const auto cands = model_.next_token_candidates(prompt);
        choice = {{"text", cands.front().text},
                  {"finish_reason", "length"},
                  {"logprobs",
                   {{"tokens", {cands.front().text}},
                    {"token_logprobs", {cands.front().logprob}},
                    {"top_logprobs", {top_map(cands, k)}},
                    {"text_offset", {prompt.size()}}}}};
      }
    }
    res.set_content(nlohmann::json{{"choices", {choice}}}.dump(), "application/json");
  }

  xmodel::mock::ScriptedBackend& model_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> fail_remaining_{0};
  std::atomic<int> fail_status_{503};
  std::atomic<std::size_t> requests_{0};
  mutable std::mutex mu_;
  nlohmann::json last_body_;
};

}  // namespace testsupport
