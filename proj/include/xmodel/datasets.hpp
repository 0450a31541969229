#pragma once

// Evaluation instances, task presets, answer extraction and judging.
//
// Dataset files are JSON Lines, one instance per line:
//   {"id": "mmlu-0001", "task_type": "multiple_choice", "prompt": "...", "gold": "B"}
//   {"id": "tqa-17", "task_type": "open_qa", "prompt": "...", "gold": ["Beatles", "The Beatles"]}
//   {"id": "gsm-3", "task_type": "numeric_cot", "prompt": "...", "gold": "1234"}
// numeric gold may also be a JSON number; open_qa gold may be a single string.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/error.hpp"
#include "xmodel/signals.hpp"
#include "xmodel/types.hpp"

namespace xmodel::data {

enum class TaskType { multiple_choice, open_qa, numeric_cot };

inline std::string_view to_string(TaskType t) {
  switch (t) {
    case TaskType::multiple_choice: return "multiple_choice";
    case TaskType::open_qa: return "open_qa";
    case TaskType::numeric_cot: return "numeric_cot";
  }
  return "?";
}

inline TaskType parse_task_type(std::string_view s) {
  if (s == "multiple_choice") return TaskType::multiple_choice;
  if (s == "open_qa") return TaskType::open_qa;
  if (s == "numeric_cot") return TaskType::numeric_cot;
  throw Error(ErrorKind::data, "unknown task_type '" + std::string(s) + "'");
}

/// Exact decimal kept as a canonical string: optional '-', integer digits
/// without leading zeros, and a fractional part without trailing zeros.
class Decimal {
 public:
  static std::optional<Decimal> parse(std::string_view text) {
    std::string s;
    for (char c : text) {
      if (c != ',') s += c;
    }
    std::size_t i = 0;
    bool negative = false;
    if (i < s.size() && (s[i] == '-' || s[i] == '+')) negative = s[i++] == '-';
    std::string whole, frac;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) whole += s[i++];
    if (i < s.size() && s[i] == '.') {
      ++i;
      while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) frac += s[i++];
    }
    if (i != s.size() || (whole.empty() && frac.empty())) return std::nullopt;
    whole.erase(0, std::min(whole.find_first_not_of('0'), whole.size()));
    while (!frac.empty() && frac.back() == '0') frac.pop_back();
    if (whole.empty()) whole = "0";
    Decimal d;
    d.canonical_ = (negative && (whole != "0" || !frac.empty()) ? "-" : "") + whole + (frac.empty() ? "" : "." + frac);
    return d;
  }

  const std::string& str() const { return canonical_; }
  friend bool operator==(const Decimal&, const Decimal&) = default;

 private:
  std::string canonical_;
};

struct GoldAnswer {
  std::variant<char, std::vector<std::string>, Decimal> value;  // letter | aliases | number

  TaskType kind() const {
    switch (value.index()) {
      case 0: return TaskType::multiple_choice;
      case 1: return TaskType::open_qa;
      default: return TaskType::numeric_cot;
    }
  }
};

struct Instance {
  std::string instance_id;
  TaskType task_type = TaskType::multiple_choice;
  std::string prompt;
  GoldAnswer gold;
};

struct TaskPreset {
  std::string name;
  TaskType task_type;
  DecodeParams decode;
  AnswerSpan answer_span;
};

/// Built-in presets. Prompts are taken verbatim from the dataset file; the
/// presets only fix decoding limits and the answer span.
inline TaskPreset preset(std::string_view name) {
  if (name == "mmlu") return {"mmlu", TaskType::multiple_choice, {5, {"\n"}, 0.0}, AnswerSpan::full()};
  if (name == "triviaqa") return {"triviaqa", TaskType::open_qa, {8, {"\n"}, 0.0}, AnswerSpan::full()};
  if (name == "gsm8k") return {"gsm8k", TaskType::numeric_cot, {256, {}, 0.0}, AnswerSpan::final_answer("ANSWER:")};
  throw Error(ErrorKind::configuration, "unknown preset '" + std::string(name) + "' (mmlu, triviaqa, gsm8k)");
}

struct LoadDiagnostic {
  std::size_t line = 0;
  std::string message;
};

struct LoadOptions {
  std::optional<std::size_t> limit;
  std::uint64_t seed = 0;
  bool strict = true;  // malformed lines are fatal; otherwise skipped and reported
};

struct LoadedDataset {
  std::vector<Instance> instances;  // ordered by instance_id
  std::vector<LoadDiagnostic> skipped;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Platform-independent sampling key for an instance under a seed.
inline std::uint64_t sample_key(std::string_view id, std::uint64_t seed) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return splitmix64(h ^ splitmix64(seed));
}

inline GoldAnswer parse_gold(const nlohmann::json& g, TaskType type) {
  switch (type) {
    case TaskType::multiple_choice: {
      const auto s = g.get<std::string>();
      if (s.size() != 1 || std::string_view("ABCD").find(static_cast<char>(std::toupper(s[0]))) == std::string_view::npos) {
        throw Error(ErrorKind::data, "multiple_choice gold must be one of A-D");
      }
      return {static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])))};
    }
    case TaskType::open_qa: {
      std::vector<std::string> aliases;
      if (g.is_string()) aliases.push_back(g.get<std::string>());
      else aliases = g.get<std::vector<std::string>>();
      if (aliases.empty()) throw Error(ErrorKind::data, "open_qa gold needs at least one alias");
      return {aliases};
    }
    case TaskType::numeric_cot: {
      const auto text = g.is_string() ? g.get<std::string>() : g.dump();
      auto d = Decimal::parse(text);
      if (!d) throw Error(ErrorKind::data, "numeric gold '" + text + "' is not a decimal");
      return {*d};
    }
  }
  throw Error(ErrorKind::data, "unreachable");
}

}  // namespace detail

inline Instance parse_instance(const nlohmann::json& j) {
  Instance inst;
  try {
    inst.instance_id = j.at("id").get<std::string>();
    inst.prompt = j.at("prompt").get<std::string>();
    inst.task_type = parse_task_type(j.at("task_type").get<std::string>());
    inst.gold = detail::parse_gold(j.at("gold"), inst.task_type);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, e.what());
  }
  if (inst.instance_id.empty()) throw Error(ErrorKind::data, "empty id");
  if (inst.prompt.empty()) throw Error(ErrorKind::data, "empty prompt");
  return inst;
}

inline nlohmann::json to_json(const Instance& inst) {
  nlohmann::json j{{"id", inst.instance_id}, {"task_type", to_string(inst.task_type)}, {"prompt", inst.prompt}};
  std::visit(
      [&j](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, char>) j["gold"] = std::string(1, v);
        else if constexpr (std::is_same_v<T, Decimal>) j["gold"] = v.str();
        else j["gold"] = v;
      },
      inst.gold.value);
  return j;
}

/// Reads a dataset and keeps a deterministic subsample of min(limit, n)
/// instances for the given seed, returned in instance_id order.
inline LoadedDataset load_dataset(const std::string& path, const LoadOptions& options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot open dataset '" + path + "'");
  LoadedDataset out;
  std::set<std::string, std::less<>> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      auto inst = parse_instance(nlohmann::json::parse(line));
      if (!seen.insert(inst.instance_id).second) {
        throw Error(ErrorKind::data, "duplicate id '" + inst.instance_id + "'");
      }
      out.instances.push_back(std::move(inst));
    } catch (const std::exception& e) {
      const std::string msg = path + ":" + std::to_string(lineno) + ": " + e.what();
      if (options.strict) throw Error(ErrorKind::data, msg);
      out.skipped.push_back({lineno, e.what()});
    }
  }
  auto& v = out.instances;
  if (options.limit && *options.limit < v.size()) {
    std::stable_sort(v.begin(), v.end(), [&](const Instance& a, const Instance& b) {
      const auto ka = detail::sample_key(a.instance_id, options.seed);
      const auto kb = detail::sample_key(b.instance_id, options.seed);
      return ka != kb ? ka < kb : a.instance_id < b.instance_id;
    });
    v.resize(*options.limit);
  }
  std::sort(v.begin(), v.end(), [](const Instance& a, const Instance& b) { return a.instance_id < b.instance_id; });
  return out;
}

/// Lowercase, drop ASCII punctuation, collapse whitespace, then drop any
/// leading articles (a / an / the). Idempotent.
inline std::string normalize_text(std::string_view s) {
  std::string cleaned;
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    cleaned += std::isspace(c) ? ' ' : static_cast<char>(std::tolower(c));
  }
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && cleaned[i] == ' ') ++i;
    std::size_t j = i;
    while (j < cleaned.size() && cleaned[j] != ' ') ++j;
    if (j > i) words.emplace_back(cleaned.substr(i, j - i));
    i = j;
  }
  std::size_t first = 0;
  while (first < words.size() && (words[first] == "a" || words[first] == "an" || words[first] == "the")) ++first;
  std::string out;
  for (std::size_t k = first; k < words.size(); ++k) {
    if (!out.empty()) out += ' ';
    out += words[k];
  }
  return out;
}

struct Extraction {
  std::optional<std::string> value;  // empty on extraction failure
  bool fallback = false;             // numeric answer found without the ANSWER: marker

  bool failed() const { return !value.has_value(); }
};

namespace detail {

/// Every numeric literal in `text` as (begin, end) byte offsets.
inline std::vector<std::pair<std::size_t, std::size_t>> numeric_literals(std::string_view text) {
  auto digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!digit(text[i])) {
      ++i;
      continue;
    }
    std::size_t start = i;
    if (start > 0 && text[start - 1] == '-') --start;
    bool point = false;
    while (i < text.size()) {
      if (digit(text[i])) {
        ++i;
      } else if (text[i] == ',' && i + 1 < text.size() && digit(text[i + 1]) && !point) {
        ++i;
      } else if (text[i] == '.' && !point && i + 1 < text.size() && digit(text[i + 1])) {
        point = true;
        ++i;
      } else {
        break;
      }
    }
    out.emplace_back(start, i);
  }
  return out;
}

}  // namespace detail

inline constexpr std::string_view kAnswerMarker = "ANSWER:";

/// Pulls the gradeable answer out of a raw generation.
///   multiple_choice: first standalone A-D letter (case-insensitive)
///   open_qa: first line, normalized
///   numeric_cot: last number after the last ANSWER: marker, else the last
///                number anywhere (flagged as fallback); commas stripped
inline Extraction extract_answer(std::string_view raw, TaskType type) {
  switch (type) {
    case TaskType::multiple_choice: {
      auto word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
      for (std::size_t i = 0; i < raw.size(); ++i) {
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(raw[i])));
        if (up < 'A' || up > 'D') continue;
        if (i > 0 && word(raw[i - 1])) continue;
        if (i + 1 < raw.size() && word(raw[i + 1])) continue;
        return {std::string(1, up), false};
      }
      return {};
    }
    case TaskType::open_qa: {
      auto line = raw;
      const auto first = line.find_first_not_of(" \t\r\n");
      if (first == std::string_view::npos) return {};
      line = line.substr(first);
      line = line.substr(0, line.find('\n'));
      auto norm = normalize_text(line);
      if (norm.empty()) return {};
      return {std::move(norm), false};
    }
    case TaskType::numeric_cot: {
      bool fallback = true;
      std::string_view region = raw;
      if (const auto at = raw.rfind(kAnswerMarker); at != std::string_view::npos) {
        region = raw.substr(at + kAnswerMarker.size());
        fallback = false;
      }
      auto literals = detail::numeric_literals(region);
      if (literals.empty() && !fallback) {
        region = raw;
        fallback = true;
        literals = detail::numeric_literals(region);
      }
      if (literals.empty()) return {};
      const auto [b, e] = literals.back();
      auto d = Decimal::parse(region.substr(b, e - b));
      if (!d) return {};
      return {d->str(), fallback};
    }
  }
  return {};
}

/// Exact-match judging; extraction failures are incorrect.
inline bool judge(const Extraction& extracted, const GoldAnswer& gold) {
  if (extracted.failed()) return false;
  const auto& value = *extracted.value;
  return std::visit(
      [&](const auto& g) -> bool {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, char>) {
          return value.size() == 1 && value[0] == g;
        } else if constexpr (std::is_same_v<T, Decimal>) {
          const auto d = Decimal::parse(value);
          return d && *d == g;
        } else {
          const auto norm = normalize_text(value);
          return std::any_of(g.begin(), g.end(), [&](const std::string& alias) { return normalize_text(alias) == norm; });
        }
      },
      gold.value);
}

}  // namespace xmodel::data
