#pragma once

// Reproducible runs: generate -> signals -> eval -> route / report.
//
// Output layout under RunConfig::out_dir:
//   answers/<backend>.jsonl               one graded answer per instance
//   answers/<backend>.diagnostics.json    extraction tallies, backend errors
//   signals/<gen>__<ver>.jsonl            one SignalRecord per instance
//   signals/<gen>__<ver>.meta.json        which signals are present, errors
//   eval/<gen>__<ver>.json                per-pair report
//   eval/summary.json                     means across pairs
//   route/<gen>__<ver>__<signal>.jsonl    decisions (+ .summary.json)
//
// Only generate and signals talk to backends; everything downstream reads
// files.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ctime>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/backend.hpp"
#include "xmodel/datasets.hpp"
#include "xmodel/metrics.hpp"
#include "xmodel/routing.hpp"
#include "xmodel/runstore.hpp"
#include "xmodel/signals.hpp"

namespace xmodel::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolVersion = "xmodel 0.1.0";

inline const std::vector<Signal>& default_signals() {
  static const std::vector<Signal> s{Signal::g_ent, Signal::g_ppl, Signal::cmp, Signal::cme};
  return s;
}

struct RunConfig {
  std::string dataset_path;
  std::string preset = "mmlu";
  std::string generator;
  std::vector<std::string> verifiers;
  std::vector<Signal> signals;  // empty: default set (+ cmp_final for final-answer presets)
  std::optional<std::size_t> limit;
  std::uint64_t seed = 0;
  fs::path out_dir = "xmodel-out";
  std::optional<double> gap_floor = 0.05;
  int parallel = 1;
  bool strict = true;
  std::string run_id;  // eval manifest id; generated when empty

  void validate() const {
    if (dataset_path.empty()) throw Error(ErrorKind::configuration, "no dataset given");
    if (generator.empty()) throw Error(ErrorKind::configuration, "no generator backend given");
    if (parallel < 1) throw Error(ErrorKind::configuration, "parallel must be >= 1");
    if (gap_floor && *gap_floor < 0.0) throw Error(ErrorKind::configuration, "gap floor must be >= 0");
    data::preset(preset);
  }

  std::vector<Signal> effective_signals() const {
    if (!signals.empty()) return signals;
    auto out = default_signals();
    if (data::preset(preset).answer_span.mode == AnswerSpan::Mode::final_answer) out.push_back(Signal::cmp_final);
    return out;
  }
};

struct BackendHandle {
  Backend* backend = nullptr;
  std::string descriptor;  // canonical config text, hashed into manifests
};

using BackendMap = std::map<std::string, BackendHandle, std::less<>>;

struct AnswerRow {
  std::string id;
  std::string text;
  FinishReason finish_reason = FinishReason::stop;
  std::optional<std::string> extracted;
  bool extraction_failed = false;
  bool fallback = false;
  bool correct = false;
};

struct StepReport {
  std::size_t processed = 0;
  std::size_t failed = 0;
  std::vector<std::string> errors;
  std::vector<fs::path> outputs;
  bool ok() const { return failed == 0; }
};

/// Backend id made safe for use as a file name.
inline std::string file_stem(std::string_view backend_id) {
  std::string out;
  for (char c : backend_id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

inline std::string pair_name(std::string_view generator, std::string_view verifier) {
  return file_stem(generator) + "__" + file_stem(verifier);
}

/// Runs fn(i) for i in [0, n) on up to `parallel` threads. fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, int parallel, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(parallel, 1)), std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  if (workers == 1) {
    work();
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
}

/// JSON number, or null for NaN / infinities.
inline json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json num(const std::optional<double>& x) { return x ? num(*x) : json(nullptr); }

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::configuration, "cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<json> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::data, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline json to_json(const AnswerRow& r) {
  return {{"id", r.id},
          {"text", r.text},
          {"finish_reason", to_string(r.finish_reason)},
          {"extracted", r.extracted ? json(*r.extracted) : json(nullptr)},
          {"extraction_failed", r.extraction_failed},
          {"fallback", r.fallback},
          {"correct", r.correct}};
}

inline AnswerRow answer_from_json(const json& j) {
  AnswerRow r;
  r.id = j.at("id").get<std::string>();
  r.text = j.at("text").get<std::string>();
  r.finish_reason = j.at("finish_reason").get<std::string>() == "length" ? FinishReason::length : FinishReason::stop;
  if (!j.at("extracted").is_null()) r.extracted = j["extracted"].get<std::string>();
  r.extraction_failed = j.at("extraction_failed").get<bool>();
  r.fallback = j.value("fallback", false);
  r.correct = j.at("correct").get<bool>();
  return r;
}

inline std::map<std::string, AnswerRow, std::less<>> read_answers(const fs::path& path) {
  std::map<std::string, AnswerRow, std::less<>> out;
  for (const auto& j : read_jsonl(path)) {
    auto row = answer_from_json(j);
    out.emplace(row.id, std::move(row));
  }
  return out;
}

inline std::vector<SignalRecord> read_signals(const fs::path& path) {
  std::vector<SignalRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(j.get<SignalRecord>());
  return out;
}

// ---- evaluation report ------------------------------------------------------

/// Full per-signal metric block for one (generator, verifier) pair. Records
/// lacking the signal are left out of that signal's metrics; `n` says how
/// many took part.
inline json signal_report(std::span<const SignalRecord> all, Signal signal, std::optional<double> gap_floor) {
  std::vector<SignalRecord> records;
  for (const auto& r : all) {
    if (stored_value(r, signal) && r.generator_correct) records.push_back(r);
  }
  json out{{"n", records.size()}};
  if (records.empty()) {
    out["error"] = "signal absent on every instance";
    return out;
  }
  const auto items = metrics::labeled_scores(records, signal);

  try {
    out["auroc"] = num(metrics::auroc(items));
  } catch (const Error& e) {
    out["auroc"] = nullptr;
    out["auroc_error"] = e.what();
  }

  const bool routable = std::all_of(items.begin(), items.end(), [](const auto& it) { return it.strong_correct.has_value(); });
  if (routable && items.size() >= 2) {
    try {
      const auto curve = metrics::pgr_curve(items, gap_floor);
      out["apgr_raw"] = num(curve.apgr_raw);
      out["apgr_normalized"] = num(curve.apgr_normalized);
      out["apgr_oracle"] = num(curve.apgr_oracle);
      out["excluded"] = curve.excluded;
      out["exclusion_reason"] = curve.exclusion_reason;
      auto pts = json::array();
      for (const auto& p : curve.points) pts.push_back({num(p.c), num(p.a_c), num(p.pgr)});
      out["routing_curve"] = std::move(pts);
    } catch (const Error& e) {
      out["apgr_raw"] = nullptr;
      out["apgr_normalized"] = nullptr;
      out["routing_error"] = e.what();
    }
  } else {
    out["apgr_raw"] = nullptr;
    out["apgr_normalized"] = nullptr;
    out["routing_error"] = "strong-model labels unavailable";
  }

  const auto coverage = metrics::coverage_accuracy(items);
  out["coverage_auc"] = num(coverage.auc);
  auto cov = json::array();
  for (const auto& p : coverage.points) cov.push_back({num(p.coverage), num(p.accuracy)});
  out["coverage_curve"] = std::move(cov);

  if (items.size() >= 5) {
    const auto q = metrics::quintile_spread(items);
    out["quintile_accuracy"] = q.accuracy;
    out["quintile_sizes"] = q.sizes;
    out["quintile_spread"] = num(q.spread);
  } else {
    out["quintile_error"] = "fewer than 5 instances";
  }

  try {
    const auto cm = metrics::case_means(records, signal);
    auto cell = [](const metrics::CaseCell& c) { return json{{"mean", num(c.mean)}, {"n", c.n}, {"empty", c.empty()}}; };
    out["case_means"] = {{"both_correct", cell(cm.both_correct)},
                         {"gen_only_wrong", cell(cm.gen_only_wrong)},
                         {"ver_only_wrong", cell(cm.ver_only_wrong)},
                         {"both_wrong", cell(cm.both_wrong)}};
  } catch (const Error& e) {
    out["case_means_error"] = e.what();
  }
  return out;
}

/// Deterministic evaluation report for one pair (no timestamps, no run ids).
inline json build_eval_report(std::string_view generator, std::string_view verifier, std::span<const SignalRecord> records,
                              std::span<const Signal> signals, std::optional<double> gap_floor) {
  std::size_t labelled = 0, weak_ok = 0, strong_labelled = 0, strong_ok = 0;
  for (const auto& r : records) {
    if (r.generator_correct) {
      ++labelled;
      weak_ok += *r.generator_correct ? 1 : 0;
    }
    if (r.verifier_correct) {
      ++strong_labelled;
      strong_ok += *r.verifier_correct ? 1 : 0;
    }
  }
  json report{{"generator", generator}, {"verifier", verifier}, {"n", records.size()}};
  const double a_w = labelled ? static_cast<double>(weak_ok) / static_cast<double>(labelled) : metrics::kNaN;
  const double a_s = strong_labelled ? static_cast<double>(strong_ok) / static_cast<double>(strong_labelled) : metrics::kNaN;
  report["weak_accuracy"] = num(a_w);
  report["strong_accuracy"] = num(a_s);
  report["gap"] = num(a_s - a_w);
  report["gap_floor"] = gap_floor ? json(*gap_floor) : json(nullptr);

  auto warnings = json::array();
  if (labelled && metrics::weak_generator_guard(a_w) == metrics::GuardStatus::warn) {
    warnings.push_back("weak generator: accuracy " + std::to_string(a_w) +
                       " is below 0.10; disagreement signals are unreliable in this regime");
  }
  report["warnings"] = std::move(warnings);

  json by_signal = json::object();
  for (auto s : signals) by_signal[std::string(to_string(s))] = signal_report(records, s, gap_floor);
  report["signals"] = std::move(by_signal);

  // Highest AUROC among the four headline signals.
  std::string best;
  double best_auroc = -1.0;
  for (auto s : {Signal::g_ent, Signal::g_ppl, Signal::cmp, Signal::cme}) {
    const auto key = std::string(to_string(s));
    if (!report["signals"].contains(key)) continue;
    const auto& a = report["signals"][key]["auroc"];
    if (a.is_number() && a.get<double>() > best_auroc) {
      best_auroc = a.get<double>();
      best = key;
    }
  }
  report["best_auroc_signal"] = best.empty() ? json(nullptr) : json(best);
  return report;
}

/// Means across pairs: AUROC over pairs where defined, APGR over pairs that
/// are not gap-excluded. Excluded pairs are listed separately.
inline json build_summary(const std::vector<json>& reports, std::span<const Signal> signals) {
  json summary{{"pairs", json::array()}, {"signals", json::object()}};
  for (const auto& r : reports) summary["pairs"].push_back(pair_name(r["generator"].get<std::string>(), r["verifier"].get<std::string>()));
  for (auto s : signals) {
    const auto key = std::string(to_string(s));
    double auroc_sum = 0.0, raw_sum = 0.0, norm_sum = 0.0;
    std::size_t auroc_n = 0, raw_n = 0, norm_n = 0;
    auto excluded = json::array();
    for (const auto& r : reports) {
      if (!r["signals"].contains(key)) continue;
      const auto& b = r["signals"][key];
      if (b.contains("auroc") && b["auroc"].is_number()) {
        auroc_sum += b["auroc"].get<double>();
        ++auroc_n;
      }
      if (b.value("excluded", false)) {
        excluded.push_back(pair_name(r["generator"].get<std::string>(), r["verifier"].get<std::string>()));
        continue;
      }
      if (b.contains("apgr_raw") && b["apgr_raw"].is_number()) {
        raw_sum += b["apgr_raw"].get<double>();
        ++raw_n;
      }
      if (b.contains("apgr_normalized") && b["apgr_normalized"].is_number()) {
        norm_sum += b["apgr_normalized"].get<double>();
        ++norm_n;
      }
    }
    summary["signals"][key] = {
        {"mean_auroc", auroc_n ? num(auroc_sum / static_cast<double>(auroc_n)) : json(nullptr)},
        {"auroc_pairs", auroc_n},
        {"mean_apgr_raw", raw_n ? num(raw_sum / static_cast<double>(raw_n)) : json(nullptr)},
        {"mean_apgr_normalized", norm_n ? num(norm_sum / static_cast<double>(norm_n)) : json(nullptr)},
        {"apgr_pairs", raw_n},
        {"gap_excluded_pairs", std::move(excluded)}};
  }
  return summary;
}

inline std::string utc_now_iso() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

// ---- pipeline ----------------------------------------------------------------

class Pipeline {
 public:
  Pipeline(RunConfig config, BackendMap backends, store::RunStore& store)
      : config_(std::move(config)), backends_(std::move(backends)), store_(store) {
    config_.validate();
    preset_ = data::preset(config_.preset);
  }

  const RunConfig& config() const { return config_; }

  const data::LoadedDataset& dataset() {
    if (!dataset_) {
      data::LoadOptions opts;
      opts.limit = config_.limit;
      opts.seed = config_.seed;
      opts.strict = config_.strict;
      dataset_ = data::load_dataset(config_.dataset_path, opts);
      for (const auto& inst : dataset_->instances) {
        if (inst.task_type != preset_.task_type) {
          throw Error(ErrorKind::data, "instance '" + inst.instance_id + "' has task_type " +
                                           std::string(data::to_string(inst.task_type)) + " but preset '" +
                                           preset_.name + "' expects " + std::string(data::to_string(preset_.task_type)));
        }
      }
    }
    return *dataset_;
  }

  fs::path answers_path(std::string_view backend_id) const {
    return config_.out_dir / "answers" / (file_stem(backend_id) + ".jsonl");
  }
  fs::path signals_path(std::string_view verifier) const {
    return config_.out_dir / "signals" / (pair_name(config_.generator, verifier) + ".jsonl");
  }
  fs::path eval_path(std::string_view verifier) const {
    return config_.out_dir / "eval" / (pair_name(config_.generator, verifier) + ".json");
  }

  /// Greedy answers for the generator and every verifier (the latter serve
  /// as strong-model answers for routing). Failed instances are reported and
  /// left out; a rerun picks up from the cache.
  StepReport generate() {
    StepReport report;
    std::vector<std::string> ids{config_.generator};
    for (const auto& v : config_.verifiers) {
      if (std::find(ids.begin(), ids.end(), v) == ids.end()) ids.push_back(v);
    }
    for (const auto& id : ids) {
      auto& handle = backend(id);
      if (!handle.backend->capabilities().can_generate) {
        if (id == config_.generator) require_generator(*handle.backend);
        report.errors.push_back("backend '" + id + "' cannot generate; no strong-model answers for routing");
        continue;
      }
      generate_for(id, report);
    }
    return report;
  }

  /// One SignalRecord per instance and verifier.
  StepReport signals() {
    StepReport report;
    const auto& instances = dataset().instances;
    const auto signals = config_.effective_signals();
    const auto weak_answers = read_answers(answers_path(config_.generator));
    auto generator = cached(config_.generator);
    require_generator(*generator);

    for (const auto& verifier_id : config_.verifiers) {
      auto verifier = cached(verifier_id);
      require_scorer(*verifier);
      std::optional<std::map<std::string, AnswerRow, std::less<>>> strong_answers;
      if (fs::exists(answers_path(verifier_id))) strong_answers = read_answers(answers_path(verifier_id));

      std::vector<std::optional<SignalRecord>> rows(instances.size());
      std::vector<std::vector<std::pair<std::string, std::string>>> errors(instances.size());
      const auto want = [&](Signal s) { return std::find(signals.begin(), signals.end(), s) != signals.end(); };

      parallel_for(instances.size(), config_.parallel, [&](std::size_t i) {
        const auto& inst = instances[i];
        const auto weak = weak_answers.find(inst.instance_id);
        if (weak == weak_answers.end()) {
          errors[i].push_back({"answer", "no generator answer"});
          return;
        }
        SignalRecord rec;
        rec.instance_id = inst.instance_id;
        rec.generator_correct = weak->second.correct;
        if (strong_answers) {
          if (auto s = strong_answers->find(inst.instance_id); s != strong_answers->end()) rec.verifier_correct = s->second.correct;
        }
        try {
          const auto generated = generator->generate(inst.prompt, preset_.decode);
          if (want(Signal::g_ppl) || want(Signal::g_ent)) {
            if (!generated.generator_token_scores) {
              errors[i].push_back({"g_ppl", "generator did not echo logprobs"});
            } else if (!generated.generator_token_scores->empty()) {
              if (want(Signal::g_ppl)) rec.log_gppl = g_ppl(generated);
              if (want(Signal::g_ent)) {
                try {
                  rec.g_ent = g_ent(generated);
                } catch (const Error& e) {
                  errors[i].push_back({"g_ent", e.what()});
                }
              }
            }
          }
          if (want(Signal::cmp) || want(Signal::cme) || want(Signal::cmp_final)) {
            const auto scored = verifier->score_sequence(inst.prompt, generated.text);
            if (want(Signal::cmp)) rec.log_cmp = cmp(scored);
            if (want(Signal::cme)) {
              if (scored.entropy_support.available()) rec.cme = cme(scored);
              else errors[i].push_back({"cme", "verifier reports no entropy support"});
            }
            if (want(Signal::cmp_final)) {
              try {
                rec.log_cmp_final = cmp_final(scored, preset_.answer_span.mode == AnswerSpan::Mode::final_answer
                                                          ? preset_.answer_span
                                                          : AnswerSpan::final_answer());
              } catch (const Error& e) {
                errors[i].push_back({"cmp_final", e.what()});
              }
            }
          }
          if (want(Signal::p_true)) rec.p_true = verifier->judge_ptrue(inst.prompt, generated.text);
        } catch (const Error& e) {
          errors[i].push_back({"backend", e.what()});
        }
        rows[i] = std::move(rec);
      });

      std::string out;
      json meta{{"generator", config_.generator},
                {"verifier", verifier_id},
                {"signals_requested", json::array()},
                {"present", json::object()},
                {"errors", json::array()}};
      for (auto s : signals) meta["signals_requested"].push_back(to_string(s));
      std::map<std::string, std::size_t> present;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (const auto& [what, msg] : errors[i]) {
          meta["errors"].push_back({{"id", instances[i].instance_id}, {"signal", what}, {"message", msg}});
          if (what == "backend" || what == "answer") ++report.failed;
        }
        if (!rows[i]) continue;
        for (auto s : signals) {
          if (stored_value(*rows[i], s)) ++present[std::string(to_string(s))];
        }
        out += json(*rows[i]).dump() + "\n";
        ++report.processed;
      }
      for (auto s : signals) meta["present"][std::string(to_string(s))] = present[std::string(to_string(s))];
      for (const auto& e : meta["errors"]) report.errors.push_back(verifier_id + ": " + e["id"].get<std::string>() + " [" + e["signal"].get<std::string>() + "] " + e["message"].get<std::string>());
      const auto path = signals_path(verifier_id);
      write_text(path, out);
      write_text(fs::path(path).replace_extension(".meta.json"), meta.dump(2) + "\n");
      report.outputs.push_back(path);
    }
    return report;
  }

  /// Reads signal files only. Writes per-pair reports, a summary, and a run
  /// manifest into the store.
  StepReport eval() {
    StepReport report;
    const auto signals = config_.effective_signals();
    std::vector<json> reports;
    std::vector<std::string> pairs;
    for (const auto& verifier : config_.verifiers) {
      const auto records = read_signals(signals_path(verifier));
      auto r = build_eval_report(config_.generator, verifier, records, signals, config_.gap_floor);
      write_text(eval_path(verifier), r.dump(2) + "\n");
      report.outputs.push_back(eval_path(verifier));
      for (const auto& w : r["warnings"]) report.errors.push_back(w.get<std::string>());
      pairs.push_back(pair_name(config_.generator, verifier));
      reports.push_back(std::move(r));
      ++report.processed;
    }
    const auto summary_path = config_.out_dir / "eval" / "summary.json";
    write_text(summary_path, build_summary(reports, signals).dump(2) + "\n");
    report.outputs.push_back(summary_path);

    store::RunManifest m;
    m.dataset_digest = store::sha256_hex(read_text(config_.dataset_path));
    store::Canonical backends_digest;
    for (const auto& [id, handle] : backends_) backends_digest.field(id).field(handle.descriptor);
    m.backend_configs_digest = backends_digest.digest();
    m.preset = config_.preset;
    m.seed = config_.seed;
    m.created_at = utc_now_iso();
    for (auto s : signals) m.signals.emplace_back(to_string(s));
    m.tool_version = std::string(kToolVersion);
    m.out_dir = fs::absolute(config_.out_dir).lexically_normal().string();
    m.pairs = pairs;
    m.run_id = config_.run_id.empty() ? "run-" + m.created_at.substr(0, 19) + "-" +
                                            store::Canonical().field(m.dataset_digest).field(m.backend_configs_digest).field(m.out_dir).digest().substr(0, 8)
                                      : config_.run_id;
    for (auto& c : m.run_id) {
      if (c == ':') c = '-';
    }
    // Generated ids are unique within the store; explicit ids must be.
    if (config_.run_id.empty()) {
      const auto stem = m.run_id;
      for (int k = 2; store_.find_run(m.run_id); ++k) m.run_id = stem + "-" + std::to_string(k);
    }
    store_.write_manifest(m);
    run_id_ = m.run_id;
    return report;
  }

  const std::string& last_run_id() const { return run_id_; }

  struct RouteResult {
    routing::RouteOutcome outcome;
    fs::path decisions_path;
    json summary;
  };

  /// Applies a routing (or abstention) policy to one pair's signal file.
  RouteResult route(const routing::RoutePolicy& policy, std::string_view verifier, bool abstain = false) {
    policy.validate();
    const auto records = read_signals(signals_path(verifier));
    routing::AnswerMap weak, strong;
    for (const auto& [id, row] : read_answers(answers_path(config_.generator))) weak.emplace(id, row.text);
    if (!abstain && fs::exists(answers_path(verifier))) {
      for (const auto& [id, row] : read_answers(answers_path(verifier))) strong.emplace(id, row.text);
    }
    RouteResult result;
    result.outcome = abstain ? routing::abstain_batch(policy, records, &weak) : routing::route_batch(policy, records, weak, strong);

    const auto stem = pair_name(config_.generator, verifier) + "__" + policy.signal_name + (abstain ? "__abstain" : "");
    result.decisions_path = config_.out_dir / "route" / (stem + ".jsonl");
    std::string lines;
    for (const auto& d : result.outcome.decisions) {
      lines += json{{"id", d.instance_id},
                    {abstain ? "abstain" : "routed_to_strong", d.routed_to_strong},
                    {"signal_value", num(d.signal_value)},
                    {"served_answer", d.served_answer}}
                   .dump() +
               "\n";
    }
    write_text(result.decisions_path, lines);
    result.summary = {{"policy", json(policy)},
                      {"mode", abstain ? "abstain" : "route"},
                      {"threshold", routing::threshold_to_json(result.outcome.threshold)},
                      {"n", records.size()},
                      {"routed", result.outcome.routed},
                      {"routed_fraction", num(result.outcome.routed_fraction)},
                      {abstain ? "retained_accuracy" : "routed_accuracy", num(result.outcome.accuracy)}};
    write_text(config_.out_dir / "route" / (stem + ".summary.json"), result.summary.dump(2) + "\n");
    return result;
  }

 private:
  BackendHandle& backend(std::string_view id) {
    auto it = backends_.find(id);
    if (it == backends_.end() || !it->second.backend) {
      throw Error(ErrorKind::configuration, "unknown backend '" + std::string(id) + "'");
    }
    return it->second;
  }

  store::CachedBackend* cached(std::string_view id) {
    std::lock_guard lock(cache_mu_);
    auto it = cached_.find(id);
    if (it == cached_.end()) {
      it = cached_.emplace(std::string(id), std::make_unique<store::CachedBackend>(*backend(id).backend, store_)).first;
    }
    return it->second.get();
  }

  void generate_for(const std::string& id, StepReport& report) {
    const auto& instances = dataset().instances;
    auto model = cached(id);
    std::vector<std::optional<AnswerRow>> rows(instances.size());
    std::vector<std::string> errors(instances.size());
    parallel_for(instances.size(), config_.parallel, [&](std::size_t i) {
      const auto& inst = instances[i];
      try {
        const auto generated = model->generate(inst.prompt, preset_.decode);
        AnswerRow row;
        row.id = inst.instance_id;
        row.text = generated.text;
        row.finish_reason = generated.finish_reason;
        const auto ex = data::extract_answer(generated.text, inst.task_type);
        row.extracted = ex.value;
        row.extraction_failed = ex.failed();
        row.fallback = ex.fallback;
        row.correct = data::judge(ex, inst.gold);
        rows[i] = std::move(row);
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    });

    std::string out;
    std::size_t failures = 0, fallbacks = 0, backend_errors = 0, correct = 0;
    json diag{{"backend", id}, {"errors", json::array()}, {"skipped_lines", json::array()}};
    for (const auto& s : dataset().skipped) diag["skipped_lines"].push_back({{"line", s.line}, {"message", s.message}});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i]) {
        ++backend_errors;
        diag["errors"].push_back({{"id", instances[i].instance_id}, {"message", errors[i]}});
        report.errors.push_back(id + ": " + instances[i].instance_id + ": " + errors[i]);
        continue;
      }
      failures += rows[i]->extraction_failed ? 1 : 0;
      fallbacks += rows[i]->fallback ? 1 : 0;
      correct += rows[i]->correct ? 1 : 0;
      out += to_json(*rows[i]).dump() + "\n";
    }
    const std::size_t answered = rows.size() - backend_errors;
    diag["answered"] = answered;
    diag["correct"] = correct;
    diag["accuracy"] = answered ? num(static_cast<double>(correct) / static_cast<double>(answered)) : json(nullptr);
    diag["extraction_failures"] = failures;
    diag["numeric_fallbacks"] = fallbacks;
    diag["backend_errors"] = backend_errors;
    const auto path = answers_path(id);
    write_text(path, out);
    write_text(fs::path(path).replace_extension(".diagnostics.json"), diag.dump(2) + "\n");
    report.outputs.push_back(path);
    report.processed += answered;
    report.failed += backend_errors;
  }

  RunConfig config_;
  BackendMap backends_;
  store::RunStore& store_;
  data::TaskPreset preset_;
  std::optional<data::LoadedDataset> dataset_;
  std::mutex cache_mu_;
  std::map<std::string, std::unique_ptr<store::CachedBackend>, std::less<>> cached_;
  std::string run_id_;
};

// ---- cross-run report -------------------------------------------------------

namespace detail {

inline std::string csv_num(const json& v) {
  if (!v.is_number()) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
  return buf;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class Csv {
 public:
  explicit Csv(std::initializer_list<std::string_view> header) { row(header); }

  template <typename Range>
  void row(const Range& cells) {
    bool first = true;
    for (const auto& c : cells) {
      if (!first) text_ += ',';
      text_ += csv_field(c);
      first = false;
    }
    text_ += '\n';
  }
  void row(std::initializer_list<std::string> cells) { row(std::vector<std::string>(cells)); }

  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

}  // namespace detail

struct ReportResult {
  std::vector<std::string> included;
  std::vector<std::string> missing;  // "<run_id>: reason"
  std::vector<fs::path> outputs;
};

/// Merges the eval outputs of the given runs (all stored runs when `run_ids`
/// is empty) into one file per figure family. Reads files only.
inline ReportResult build_report(const store::RunStore& store, const std::vector<std::string>& run_ids, const fs::path& out_dir) {
  using detail::csv_num;
  detail::Csv auroc({"run_id", "pair", "generator", "verifier", "signal", "n", "auroc"});
  detail::Csv apgr({"run_id", "pair", "signal", "gap", "excluded", "apgr_raw", "apgr_normalized", "apgr_oracle"});
  detail::Csv scatter({"run_id", "pair", "signal", "gap", "auroc"});
  detail::Csv coverage({"run_id", "pair", "signal", "coverage", "accuracy"});
  detail::Csv quintiles({"run_id", "pair", "signal", "quintile", "size", "accuracy"});
  detail::Csv cases({"run_id", "pair", "signal", "cell", "n", "mean"});
  detail::Csv correlation({"signal", "n", "rho", "p_value", "method"});

  ReportResult result;
  std::vector<store::RunManifest> runs;
  if (run_ids.empty()) {
    runs = store.list_runs();
  } else {
    for (const auto& id : run_ids) {
      if (auto m = store.find_run(id)) runs.push_back(*m);
      else result.missing.push_back(id + ": no manifest");
    }
  }

  json tables{{"runs", json::array()}, {"pairs", json::array()}};
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> gap_auroc;
  for (const auto& run : runs) {
    bool any = false;
    for (const auto& pair : run.pairs) {
      const auto path = fs::path(run.out_dir) / "eval" / (pair + ".json");
      if (!fs::exists(path)) {
        result.missing.push_back(run.run_id + ": " + path.string() + " not found");
        continue;
      }
      const auto r = json::parse(read_text(path));
      any = true;
      const auto gap = r.value("gap", json(nullptr));
      tables["pairs"].push_back({{"run_id", run.run_id}, {"pair", pair}, {"report", r}});
      for (const auto& [signal, b] : r["signals"].items()) {
        const auto a = b.value("auroc", json(nullptr));
        auroc.row({run.run_id, pair, r["generator"].get<std::string>(), r["verifier"].get<std::string>(), signal,
                   std::to_string(b.value("n", 0)), csv_num(a)});
        apgr.row({run.run_id, pair, signal, csv_num(gap), b.value("excluded", false) ? "true" : "false",
                  csv_num(b.value("apgr_raw", json(nullptr))), csv_num(b.value("apgr_normalized", json(nullptr))),
                  csv_num(b.value("apgr_oracle", json(nullptr)))});
        scatter.row({run.run_id, pair, signal, csv_num(gap), csv_num(a)});
        if (gap.is_number() && a.is_number()) {
          gap_auroc[signal].first.push_back(gap.get<double>());
          gap_auroc[signal].second.push_back(a.get<double>());
        }
        for (const auto& p : b.value("coverage_curve", json::array())) {
          coverage.row({run.run_id, pair, signal, csv_num(p[0]), csv_num(p[1])});
        }
        if (b.contains("quintile_accuracy")) {
          for (std::size_t q = 0; q < 5; ++q) {
            quintiles.row({run.run_id, pair, signal, "Q" + std::to_string(q + 1),
                           std::to_string(b["quintile_sizes"][q].get<std::size_t>()), csv_num(b["quintile_accuracy"][q])});
          }
        }
        if (b.contains("case_means")) {
          for (const char* cell : {"both_correct", "gen_only_wrong", "ver_only_wrong", "both_wrong"}) {
            const auto& c = b["case_means"][cell];
            cases.row({run.run_id, pair, signal, cell, std::to_string(c["n"].get<std::size_t>()), csv_num(c["mean"])});
          }
        }
      }
    }
    if (any) {
      result.included.push_back(run.run_id);
      tables["runs"].push_back(run.run_id);
    }
  }

  json corr = json::object();
  for (const auto& [signal, xy] : gap_auroc) {
    try {
      const auto c = metrics::spearman(xy.first, xy.second);
      correlation.row({signal, std::to_string(c.n), csv_num(json(c.rho)), csv_num(json(c.p_value)), metrics::to_string(c.method)});
      corr[signal] = {{"n", c.n}, {"rho", num(c.rho)}, {"p_value", num(c.p_value)}, {"method", metrics::to_string(c.method)}};
    } catch (const Error& e) {
      correlation.row({signal, std::to_string(xy.first.size()), "", "", ""});
      corr[signal] = {{"n", xy.first.size()}, {"error", e.what()}};
    }
  }
  tables["gap_correlation"] = std::move(corr);
  tables["missing"] = result.missing;

  auto emit = [&](const char* name, const std::string& text) {
    write_text(out_dir / name, text);
    result.outputs.push_back(out_dir / name);
  };
  emit("auroc_table.csv", auroc.str());
  emit("apgr_table.csv", apgr.str());
  emit("gap_vs_auroc.csv", scatter.str());
  emit("gap_correlation.csv", correlation.str());
  emit("coverage_accuracy.csv", coverage.str());
  emit("quintiles.csv", quintiles.str());
  emit("case_means.csv", cases.str());
  emit("tables.json", tables.dump(2) + "\n");
  std::string missing;
  for (const auto& m : result.missing) missing += m + "\n";
  emit("missing_runs.txt", missing);
  return result;
}

}  // namespace xmodel::pipeline
