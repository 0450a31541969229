#pragma once

// Synthetic multiple-choice worlds: a dataset file plus scripted generator
// and verifier models whose behaviour is fully specified per instance.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "xmodel/backend.hpp"
#include "xmodel/mock_backend.hpp"

namespace scenario {

namespace fs = std::filesystem;
using xmodel::mock::Script;
using xmodel::mock::ScriptedBackend;
using xmodel::mock::WeightedToken;

struct McWorld {
  fs::path dataset;
  std::map<std::string, char, std::less<>> gold_by_prompt;
  std::map<std::string, char, std::less<>> weak_by_prompt;  // generator's letter
  std::size_t weak_correct = 0;
  std::size_t n = 0;
};

inline fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("xmodel-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// n questions; the generator answers correctly on exactly round(accuracy*n)
/// of them (chosen by seed), otherwise picks the next letter.
inline McWorld make_mc_world(const fs::path& dir, std::size_t n, double accuracy, std::uint64_t seed) {
  McWorld w;
  w.n = n;
  w.dataset = dir / "mc.jsonl";
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_correct = static_cast<std::size_t>(std::llround(accuracy * static_cast<double>(n)));
  std::vector<bool> correct(n, false);
  for (std::size_t i = 0; i < n_correct; ++i) correct[order[i]] = true;

  std::ofstream out(w.dataset);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "mc-%04zu", i);
    const char gold = static_cast<char>('A' + rng() % 4);
    const char weak = correct[i] ? gold : static_cast<char>('A' + (gold - 'A' + 1) % 4);
    const std::string prompt = "Question " + std::to_string(i) + ": pick one of A, B, C, D.\nAnswer:";
    w.gold_by_prompt[prompt] = gold;
    w.weak_by_prompt[prompt] = weak;
    w.weak_correct += correct[i];
    out << nlohmann::json{{"id", id}, {"task_type", "multiple_choice"}, {"prompt", prompt}, {"gold", std::string(1, gold)}}.dump()
        << "\n";
  }
  return w;
}

/// Generator that is one-hot (entropy 0) on every answer it emits.
inline Script confident_generator(const McWorld& w, std::string id = "weak") {
  Script s;
  s.id = std::move(id);
  for (const auto& [prompt, letter] : w.weak_by_prompt) s.answers[prompt] = std::string(" ") + letter;
  s.distribution = xmodel::mock::one_hot();
  s.vocab_size = 8;
  return s;
}

/// Verifier that knows the gold letter: p >= 0.9 on it, p <= 0.01 on any
/// other realized answer. Its own greedy answers are always correct.
inline Script knowing_verifier(const McWorld& w, std::string id = "strong", std::uint64_t seed = 1) {
  Script s;
  s.id = std::move(id);
  for (const auto& [prompt, letter] : w.gold_by_prompt) s.answers[prompt] = std::string(" ") + letter;
  auto gold = std::make_shared<std::map<std::string, char, std::less<>>>(w.gold_by_prompt);
  // P(Yes) at the judge position: 0.9 for the gold letter, 0.05 otherwise.
  auto judge = std::make_shared<std::map<std::string, double, std::less<>>>();
  for (const auto& [prompt, letter] : w.gold_by_prompt) {
    for (char c : std::string("ABCD")) (*judge)[xmodel::ptrue_prompt(prompt, std::string(" ") + c)] = c == letter ? 0.9 : 0.05;
  }
  s.distribution = [gold, judge, seed](std::string_view prefix, std::optional<std::string_view> realized) {
    std::vector<WeightedToken> out;
    const auto it = gold->find(prefix);
    const std::string tok = realized ? std::string(*realized) : "<eos>";
    if (it == gold->end()) {
      if (const auto j = judge->find(prefix); j != judge->end() && !realized) {
        out.push_back({" Yes", j->second});
        out.push_back({" No", 1.0 - j->second});
        return out;
      }
      out.push_back({tok, 1.0});
      return out;
    }
    // Jitter in [0, 0.09] keeps scores distinct without leaving the bands.
    const auto h = std::hash<std::string_view>{}(prefix) ^ seed;
    const double jitter = static_cast<double>(h % 1000) / 1000.0 * 0.09;
    const std::string right = std::string(" ") + it->second;
    const double p = tok == right ? 0.9 + jitter : 0.01 - jitter / 10.0;
    out.push_back({tok, p});
    if (tok != right) out.push_back({right, 0.9});
    out.push_back({"<rest>", std::max(0.0, 1.0 - p - (tok != right ? 0.9 : 0.0))});
    return out;
  };
  s.vocab_size = 8;
  return s;
}

}  // namespace scenario
