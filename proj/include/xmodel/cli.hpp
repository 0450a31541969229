#pragma once

// Command surface: generate, signals, eval, route, report.
//
// Exit codes:
//   0  success
//   1  unexpected failure
//   2  configuration error (bad flags, unknown backend, duplicate run id)
//   3  data error (bad dataset, undefined metric, corrupt cache entry)
//   4  backend error (transport, protocol, capability mismatch)
//
// Backends are declared in JSON files passed with --backend-config; each file
// holds one config object or an array of them. A --config file supplies any
// RunConfig field and wins over the corresponding flag.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/http_backend.hpp"
#include "xmodel/pipeline.hpp"

namespace xmodel::cli {

enum ExitCode : int { ok = 0, unexpected = 1, config_error = 2, data_error = 3, backend_error = 4 };

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration:
    case ErrorKind::duplicate_run: return config_error;
    case ErrorKind::data:
    case ErrorKind::degenerate_input:
    case ErrorKind::marker_not_found:
    case ErrorKind::undefined_metric:
    case ErrorKind::division_hazard:
    case ErrorKind::corrupt_entry: return data_error;
    case ErrorKind::transport:
    case ErrorKind::protocol:
    case ErrorKind::capability: return backend_error;
  }
  return unexpected;
}

/// Backends supplied by the embedding program; take precedence over
/// --backend-config entries with the same id.
using BackendRegistry = pipeline::BackendMap;

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::configuration, "cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::configuration, path + ": " + e.what());
  }
}

inline std::vector<Signal> parse_signals(const std::vector<std::string>& names) {
  std::vector<Signal> out;
  for (const auto& n : names) {
    std::stringstream ss(n);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) out.push_back(parse_signal(item));
    }
  }
  return out;
}

struct Options {
  pipeline::RunConfig run;
  std::string store_dir = "xmodel-store";
  std::vector<std::string> backend_configs;
  std::string config_file;
  std::vector<std::string> signal_names;
  double gap_floor = 0.05;
  bool no_gap_floor = false;
  std::size_t limit = 0;
  bool lenient = false;

  std::string route_signal = "cmp";
  std::optional<double> budget;
  std::optional<double> threshold;
  bool abstain = false;

  std::vector<std::string> report_runs;
  std::string report_out;
};

/// Applies --config on top of the flag values.
inline void apply_config_file(Options& o) {
  if (o.config_file.empty()) return;
  const auto j = read_json_file(o.config_file);
  if (!j.is_object()) throw Error(ErrorKind::configuration, o.config_file + ": expected an object");
  try {
    auto& r = o.run;
    if (j.contains("dataset")) r.dataset_path = j["dataset"].get<std::string>();
    if (j.contains("preset")) r.preset = j["preset"].get<std::string>();
    if (j.contains("generator")) r.generator = j["generator"].get<std::string>();
    if (j.contains("verifiers")) r.verifiers = j["verifiers"].get<std::vector<std::string>>();
    if (j.contains("signals")) o.signal_names = j["signals"].get<std::vector<std::string>>();
    if (j.contains("limit")) o.limit = j["limit"].get<std::size_t>();
    if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("out")) r.out_dir = j["out"].get<std::string>();
    if (j.contains("store")) o.store_dir = j["store"].get<std::string>();
    if (j.contains("gap_floor")) {
      o.no_gap_floor = j["gap_floor"].is_null();
      if (!o.no_gap_floor) o.gap_floor = j["gap_floor"].get<double>();
    }
    if (j.contains("parallel")) r.parallel = j["parallel"].get<int>();
    if (j.contains("strict")) o.lenient = !j["strict"].get<bool>();
    if (j.contains("run_id")) r.run_id = j["run_id"].get<std::string>();
    if (j.contains("backend_configs")) {
      for (const auto& p : j["backend_configs"]) o.backend_configs.push_back(p.get<std::string>());
    }
    if (j.contains("policy")) {
      const auto p = j["policy"].get<routing::RoutePolicy>();
      o.route_signal = p.signal_name;
      o.budget = p.budget;
      o.threshold = p.threshold;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::configuration, o.config_file + ": " + e.what());
  }
}

inline void finalize(Options& o) {
  apply_config_file(o);
  o.run.signals = parse_signals(o.signal_names);
  o.run.limit = o.limit > 0 ? std::optional<std::size_t>(o.limit) : std::nullopt;
  o.run.gap_floor = o.no_gap_floor ? std::nullopt : std::optional<double>(o.gap_floor);
  o.run.strict = !o.lenient;
}

/// Loads backend configs. HTTP backends are only constructed here, so
/// commands that never call this never touch the network.
inline pipeline::BackendMap load_backends(const Options& o, const BackendRegistry* injected,
                                          std::vector<std::unique_ptr<Backend>>& owned) {
  pipeline::BackendMap map;
  for (const auto& path : o.backend_configs) {
    const auto j = read_json_file(path);
    const auto list = j.is_array() ? j : nlohmann::json::array({j});
    for (const auto& entry : list) {
      auto cfg = entry.get<HttpBackendConfig>();
      if (map.count(cfg.id)) throw Error(ErrorKind::configuration, "backend '" + cfg.id + "' declared twice");
      auto descriptor = nlohmann::json(cfg);
      descriptor.erase("api_key_env");
      auto backend = std::make_unique<HttpBackend>(cfg);
      map[cfg.id] = {backend.get(), descriptor.dump()};
      owned.push_back(std::move(backend));
    }
  }
  if (injected) {
    for (const auto& [id, handle] : *injected) map[id] = handle;
  }
  return map;
}

inline void print_step(std::ostream& out, std::ostream& err, std::string_view step, const pipeline::StepReport& r) {
  out << step << ": " << r.processed << " ok, " << r.failed << " failed\n";
  for (const auto& p : r.outputs) out << "  wrote " << p.string() << "\n";
  for (const auto& e : r.errors) err << "  " << e << "\n";
}

}  // namespace detail

/// Entry point shared by the executable and the tests. `injected` backends
/// are used in addition to (and override) --backend-config entries.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
                   const BackendRegistry* injected = nullptr) {
  CLI::App app{"Cross-model disagreement signals: generate, score, evaluate and route."};
  app.require_subcommand(1);
  detail::Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--dataset", o.run.dataset_path, "JSONL dataset");
    sub->add_option("--preset", o.run.preset, "mmlu | triviaqa | gsm8k")->capture_default_str();
    sub->add_option("--generator", o.run.generator, "generator backend id");
    sub->add_option("--verifier", o.run.verifiers, "verifier backend id (repeatable)");
    sub->add_option("--signals", o.signal_names, "comma-separated signals");
    sub->add_option("--limit", o.limit, "keep at most this many instances (0 = all)");
    sub->add_option("--seed", o.run.seed, "subsampling seed");
    sub->add_option("--out", o.run.out_dir, "output directory")->capture_default_str();
    sub->add_option("--store", o.store_dir, "cache and manifest directory")->capture_default_str();
    sub->add_option("--gap-floor", o.gap_floor, "minimum capability gap for APGR")->capture_default_str();
    sub->add_flag("--no-gap-floor", o.no_gap_floor, "never exclude pairs; zero gaps become errors");
    sub->add_option("--parallel", o.run.parallel, "concurrent backend requests")->capture_default_str();
    sub->add_flag("--lenient", o.lenient, "skip malformed dataset lines instead of failing");
    sub->add_option("--backend-config", o.backend_configs, "backend config JSON (repeatable)");
    sub->add_option("--config", o.config_file, "run config JSON; overrides flags");
    sub->add_option("--run-id", o.run.run_id, "manifest id for eval (generated when omitted)");
  };

  auto* gen = app.add_subcommand("generate", "greedy answers for generator and verifiers");
  common(gen);
  auto* sig = app.add_subcommand("signals", "score generator answers with each verifier");
  common(sig);
  auto* ev = app.add_subcommand("eval", "metrics per pair from signal files");
  common(ev);
  auto* rt = app.add_subcommand("route", "apply a routing or abstention policy");
  common(rt);
  rt->add_option("--signal", o.route_signal, "signal to threshold")->capture_default_str();
  auto* budget = rt->add_option("--budget", o.budget, "target routed fraction in [0, 1]");
  auto* threshold = rt->add_option("--threshold", o.threshold, "route when the signal exceeds this value");
  budget->excludes(threshold);
  rt->add_flag("--abstain", o.abstain, "abstain instead of routing to the verifier");
  auto* rp = app.add_subcommand("report", "merge eval outputs of stored runs into tables");
  rp->add_option("--runs", o.report_runs, "run ids (default: all stored runs)");
  rp->add_option("--store", o.store_dir, "cache and manifest directory")->capture_default_str();
  rp->add_option("--out", o.report_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : config_error;
  }

  try {
    if (rp->parsed()) {
      const store::RunStore store(o.store_dir);
      const auto r = pipeline::build_report(store, o.report_runs, o.report_out);
      out << "report: " << r.included.size() << " run(s)\n";
      for (const auto& p : r.outputs) out << "  wrote " << p.string() << "\n";
      for (const auto& m : r.missing) err << "  missing: " << m << "\n";
      return r.missing.empty() ? ok : data_error;
    }

    detail::finalize(o);
    store::RunStore store(o.store_dir);
    std::vector<std::unique_ptr<Backend>> owned;
    const bool needs_backends = gen->parsed() || sig->parsed();
    auto backends = needs_backends ? detail::load_backends(o, injected, owned) : pipeline::BackendMap{};
    if (needs_backends && o.run.verifiers.empty()) {
      throw Error(ErrorKind::configuration, "at least one --verifier is required");
    }
    pipeline::Pipeline pipe(o.run, std::move(backends), store);

    if (gen->parsed()) {
      const auto r = pipe.generate();
      detail::print_step(out, err, "generate", r);
      return r.ok() ? ok : backend_error;
    }
    if (sig->parsed()) {
      const auto r = pipe.signals();
      detail::print_step(out, err, "signals", r);
      return r.ok() ? ok : backend_error;
    }
    if (ev->parsed()) {
      if (o.run.verifiers.empty()) throw Error(ErrorKind::configuration, "at least one --verifier is required");
      const auto r = pipe.eval();
      detail::print_step(out, err, "eval", r);
      out << "run_id: " << pipe.last_run_id() << "\n";
      return ok;
    }
    if (rt->parsed()) {
      if (o.run.verifiers.size() != 1) throw Error(ErrorKind::configuration, "route takes exactly one --verifier");
      routing::RoutePolicy policy;
      policy.signal_name = o.route_signal;
      policy.budget = o.budget;
      policy.threshold = o.threshold;
      const auto r = pipe.route(policy, o.run.verifiers.front(), o.abstain);
      out << r.summary.dump(2) << "\n";
      out << "wrote " << r.decisions_path.string() << "\n";
      return ok;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return unexpected;
  }
  return unexpected;
}

}  // namespace xmodel::cli
