#pragma once

// Content-addressed cache of backend results plus append-only run manifests.
//
// Layout under the store root:
//   cache/<backend>/<kind>/<key>.entry   one entry per request
//   cache/<backend>/<kind>/<key>.corrupt quarantined entries
//   runs/<run_id>.json                   manifests
//
// Entry file format (version 1):
//   byte 0        : 0x01
//   bytes 1..N-66 : UTF-8 JSON payload
//   byte N-65     : '\n'
//   bytes N-64..  : lowercase hex SHA-256 of bytes [0, N-65)
//
// Digests are SHA-256 over a canonical, field-ordered serialization in which
// each field is written as its decimal byte length, ':' and the raw bytes.

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/backend.hpp"
#include "xmodel/error.hpp"
#include "xmodel/types.hpp"

namespace xmodel::store {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::configuration, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

/// Length-prefixed concatenation; unambiguous for arbitrary field contents.
class Canonical {
 public:
  Canonical& field(std::string_view v) {
    buf_ += std::to_string(v.size());
    buf_ += ':';
    buf_ += v;
    return *this;
  }
  Canonical& field(long long v) { return field(std::to_string(v)); }
  std::string digest() const { return sha256_hex(buf_); }

 private:
  std::string buf_;
};

inline std::string params_digest(const DecodeParams& p) {
  Canonical c;
  c.field("decode-v1").field(p.max_new_tokens).field(static_cast<long long>(p.stop_sequences.size()));
  for (const auto& s : p.stop_sequences) c.field(s);
  std::ostringstream t;
  t << std::setprecision(17) << p.temperature;
  return c.field(t.str()).digest();
}

enum class EntryKind { generate, score, ptrue };

inline const char* to_string(EntryKind k) {
  switch (k) {
    case EntryKind::generate: return "generate";
    case EntryKind::score: return "score";
    case EntryKind::ptrue: return "ptrue";
  }
  return "?";
}

struct CacheKey {
  std::string backend_id;
  EntryKind kind = EntryKind::generate;
  std::string prompt_hash;
  std::optional<std::string> answer_hash;
  std::string params_hash;

  static CacheKey for_generate(std::string backend_id, std::string_view prompt, const DecodeParams& params) {
    return {std::move(backend_id), EntryKind::generate, sha256_hex(prompt), std::nullopt, params_digest(params)};
  }
  static CacheKey for_score(std::string backend_id, std::string_view prompt, std::string_view answer) {
    return {std::move(backend_id), EntryKind::score, sha256_hex(prompt), sha256_hex(answer),
            Canonical().field("score-v1").digest()};
  }
  static CacheKey for_ptrue(std::string backend_id, std::string_view prompt, std::string_view answer) {
    return {std::move(backend_id), EntryKind::ptrue, sha256_hex(prompt), sha256_hex(answer),
            Canonical().field(kPTrueTemplateVersion).digest()};
  }

  std::string digest() const {
    if (kind != EntryKind::generate && !answer_hash) {
      throw Error(ErrorKind::configuration, "score/ptrue cache keys need an answer hash");
    }
    return Canonical()
        .field("key-v1")
        .field(backend_id)
        .field(to_string(kind))
        .field(prompt_hash)
        .field(answer_hash.value_or(""))
        .field(params_hash)
        .digest();
  }
};

// ---- payload serialization ------------------------------------------------

inline nlohmann::json to_json(const TokenScore& t) {
  nlohmann::json j{{"t", t.token_text}, {"lp", t.logprob}, {"s", {t.char_span.start, t.char_span.end}}};
  if (t.entropy) j["h"] = *t.entropy;
  return j;
}

inline TokenScore token_from_json(const nlohmann::json& j) {
  TokenScore t;
  t.token_text = j.at("t").get<std::string>();
  t.logprob = j.at("lp").get<double>();
  if (j.contains("h")) t.entropy = j["h"].get<double>();
  t.char_span = {j.at("s")[0].get<std::size_t>(), j.at("s")[1].get<std::size_t>()};
  return t;
}

inline nlohmann::json entropy_support_json(const EntropySupport& s) {
  return {{"kind", s.kind == EntropySupport::Kind::exact ? "exact" : s.kind == EntropySupport::Kind::top_k ? "top_k" : "none"},
          {"k", s.k}};
}

inline EntropySupport entropy_support_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "exact") return EntropySupport::exact();
  if (kind == "top_k") return EntropySupport::top_k(j.at("k").get<int>());
  return EntropySupport::none();
}

inline nlohmann::json to_json(const GeneratedAnswer& g) {
  nlohmann::json j{{"text", g.text}, {"finish_reason", to_string(g.finish_reason)}};
  if (g.generator_token_scores) {
    auto arr = nlohmann::json::array();
    for (const auto& t : *g.generator_token_scores) arr.push_back(to_json(t));
    j["generator_token_scores"] = std::move(arr);
  }
  return j;
}

inline GeneratedAnswer generated_from_json(const nlohmann::json& j) {
  GeneratedAnswer g;
  g.text = j.at("text").get<std::string>();
  g.finish_reason = j.at("finish_reason").get<std::string>() == "length" ? FinishReason::length : FinishReason::stop;
  if (j.contains("generator_token_scores")) {
    std::vector<TokenScore> scores;
    for (const auto& t : j["generator_token_scores"]) scores.push_back(token_from_json(t));
    g.generator_token_scores = std::move(scores);
  }
  return g;
}

inline nlohmann::json to_json(const ScoredSequence& s) {
  auto arr = nlohmann::json::array();
  for (const auto& t : s.token_scores) arr.push_back(to_json(t));
  return {{"prompt", s.prompt_text},
          {"answer", s.answer_text},
          {"scorer_id", s.scorer_id},
          {"tokens", std::move(arr)},
          {"T", s.answer_token_count},
          {"entropy_support", entropy_support_json(s.entropy_support)}};
}

inline ScoredSequence scored_from_json(const nlohmann::json& j) {
  ScoredSequence s;
  s.prompt_text = j.at("prompt").get<std::string>();
  s.answer_text = j.at("answer").get<std::string>();
  s.scorer_id = j.at("scorer_id").get<std::string>();
  for (const auto& t : j.at("tokens")) s.token_scores.push_back(token_from_json(t));
  s.answer_token_count = j.at("T").get<std::size_t>();
  s.entropy_support = entropy_support_from_json(j.at("entropy_support"));
  return s;
}

using Value = std::variant<GeneratedAnswer, ScoredSequence, double>;

struct RunManifest {
  std::string run_id;
  std::string dataset_digest;
  std::string backend_configs_digest;
  std::string preset;
  std::uint64_t seed = 0;
  std::string created_at;  // ISO-8601 UTC
  std::vector<std::string> signals;
  std::string tool_version;
  std::string out_dir;
  std::vector<std::string> pairs;  // "<generator>__<verifier>"
  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"run_id", m.run_id},   {"dataset_digest", m.dataset_digest}, {"backend_configs_digest", m.backend_configs_digest},
          {"preset", m.preset},   {"seed", m.seed},                     {"created_at", m.created_at},
          {"signals", m.signals}, {"tool_version", m.tool_version},     {"out_dir", m.out_dir},
          {"pairs", m.pairs}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.dataset_digest = j.value("dataset_digest", "");
  m.backend_configs_digest = j.value("backend_configs_digest", "");
  m.preset = j.value("preset", "");
  m.seed = j.value("seed", std::uint64_t{0});
  m.created_at = j.value("created_at", "");
  m.signals = j.value("signals", std::vector<std::string>{});
  m.tool_version = j.value("tool_version", "");
  m.out_dir = j.value("out_dir", "");
  m.pairs = j.value("pairs", std::vector<std::string>{});
  return m;
}

class RunStore {
 public:
  static constexpr unsigned char kVersion = 0x01;

  explicit RunStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "cache");
    fs::create_directories(root_ / "runs");
  }

  const fs::path& root() const { return root_; }

  fs::path entry_path(const CacheKey& key) const {
    return root_ / "cache" / sanitize(key.backend_id) / to_string(key.kind) / (key.digest() + ".entry");
  }

  void put(const CacheKey& key, const Value& value) {
    const auto path = entry_path(key);
    fs::create_directories(path.parent_path());
    std::string body(1, static_cast<char>(kVersion));
    body += std::visit([](const auto& v) { return payload(v).dump(); }, value);
    body += '\n';
    body += sha256_hex(std::string_view(body).substr(0, body.size() - 1));
    atomic_write(path, body);
  }

  /// nullopt on a miss. A checksum mismatch quarantines the entry and throws.
  std::optional<Value> get(const CacheKey& key) const {
    const auto path = entry_path(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    auto corrupt = [&](const std::string& why) -> Error {
      std::error_code ec;
      fs::rename(path, fs::path(path).replace_extension(".corrupt"), ec);
      return Error(ErrorKind::corrupt_entry, path.string() + ": " + why);
    };
    if (bytes.size() < 66 || bytes[bytes.size() - 65] != '\n') throw corrupt("truncated entry");
    const std::string_view covered = std::string_view(bytes).substr(0, bytes.size() - 65);
    if (sha256_hex(covered) != std::string_view(bytes).substr(bytes.size() - 64)) throw corrupt("checksum mismatch");
    if (static_cast<unsigned char>(bytes[0]) != kVersion) throw corrupt("unknown entry version");
    try {
      const auto j = nlohmann::json::parse(covered.substr(1));
      switch (key.kind) {
        case EntryKind::generate: return generated_from_json(j.at("generated"));
        case EntryKind::score: return scored_from_json(j.at("scored"));
        case EntryKind::ptrue: return j.at("p_true").get<double>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw corrupt(e.what());
    }
    return std::nullopt;
  }

  void write_manifest(const RunManifest& manifest) {
    if (manifest.run_id.empty() || manifest.run_id.find_first_of("/\\") != std::string::npos) {
      throw Error(ErrorKind::configuration, "invalid run_id '" + manifest.run_id + "'");
    }
    const auto path = root_ / "runs" / (manifest.run_id + ".json");
    std::lock_guard lock(manifest_mu_);
    // "x" makes creation exclusive, so an existing run_id is never overwritten.
    std::FILE* f = std::fopen(path.c_str(), "wx");
    if (!f) {
      if (fs::exists(path)) throw Error(ErrorKind::duplicate_run, "run '" + manifest.run_id + "' already exists");
      throw Error(ErrorKind::configuration, "cannot write manifest " + path.string());
    }
    const auto text = to_json(manifest).dump(2) + "\n";
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }

  std::optional<RunManifest> find_run(const std::string& run_id) const {
    std::ifstream in(root_ / "runs" / (run_id + ".json"));
    if (!in) return std::nullopt;
    return manifest_from_json(nlohmann::json::parse(in));
  }

  /// All manifests ordered by created_at (run_id breaks ties).
  std::vector<RunManifest> list_runs() const {
    std::vector<RunManifest> out;
    for (const auto& e : fs::directory_iterator(root_ / "runs")) {
      if (e.path().extension() != ".json") continue;
      std::ifstream in(e.path());
      out.push_back(manifest_from_json(nlohmann::json::parse(in)));
    }
    std::sort(out.begin(), out.end(), [](const RunManifest& a, const RunManifest& b) {
      return a.created_at != b.created_at ? a.created_at < b.created_at : a.run_id < b.run_id;
    });
    return out;
  }

 private:
  static nlohmann::json payload(const GeneratedAnswer& g) { return {{"generated", to_json(g)}}; }
  static nlohmann::json payload(const ScoredSequence& s) { return {{"scored", to_json(s)}}; }
  static nlohmann::json payload(double p) { return {{"p_true", p}}; }

  static std::string sanitize(std::string_view id) {
    std::string out;
    for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    return out.empty() ? "_" : out;
  }

  static void atomic_write(const fs::path& path, const std::string& bytes) {
    static std::atomic<unsigned long long> counter{0};
    std::ostringstream tmp_name;
    tmp_name << path.filename().string() << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id()) << "."
             << counter++;
    const auto tmp = path.parent_path() / tmp_name.str();
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error(ErrorKind::configuration, "cannot write " + tmp.string());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw Error(ErrorKind::configuration, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
  }

  fs::path root_;
  std::mutex manifest_mu_;
};

/// Serves generate/score/P(True) from the store when possible and only calls
/// through to the wrapped backend on a miss. Capabilities pass through.
class CachedBackend final : public Backend {
 public:
  // No retries by default: remote backends already retry transport errors.
  CachedBackend(Backend& inner, RunStore& store, RetryPolicy retry = RetryPolicy{.max_attempts = 1})
      : inner_(inner), store_(store), retry_(std::move(retry)) {}

  const std::string& id() const override { return inner_.id(); }
  BackendCapabilities capabilities() const override { return inner_.capabilities(); }

  GeneratedAnswer generate(const std::string& prompt, const DecodeParams& params) override {
    const auto key = CacheKey::for_generate(id(), prompt, params);
    if (auto hit = store_.get(key)) return std::get<GeneratedAnswer>(*hit);
    auto value = with_retry(retry_, [&] { return inner_.generate(prompt, params); });
    store_.put(key, value);
    ++misses_;
    return value;
  }

  ScoredSequence score_sequence(const std::string& prompt, const std::string& answer) override {
    const auto key = CacheKey::for_score(id(), prompt, answer);
    if (auto hit = store_.get(key)) return std::get<ScoredSequence>(*hit);
    auto value = with_retry(retry_, [&] { return inner_.score_sequence(prompt, answer); });
    store_.put(key, value);
    ++misses_;
    return value;
  }

  double judge_ptrue(const std::string& prompt, const std::string& answer) override {
    const auto key = CacheKey::for_ptrue(id(), prompt, answer);
    if (auto hit = store_.get(key)) return std::get<double>(*hit);
    const double value = with_retry(retry_, [&] { return inner_.judge_ptrue(prompt, answer); });
    store_.put(key, value);
    ++misses_;
    return value;
  }

  std::size_t misses() const { return misses_.load(); }

 private:
  Backend& inner_;
  RunStore& store_;
  RetryPolicy retry_;
  std::atomic<std::size_t> misses_{0};
};

}  // namespace xmodel::store
