#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodel/error.hpp"
#include "xmodel/signals.hpp"

namespace xmodel::routing {

inline constexpr double kRouteNothing = std::numeric_limits<double>::infinity();
inline constexpr double kRouteEverything = -std::numeric_limits<double>::infinity();

struct RoutePolicy {
  std::string signal_name = "cmp";
  std::optional<double> threshold;
  std::optional<double> budget;  // target routed share in [0, 1]
  std::optional<std::string> calibration_set_id;

  void validate() const {
    parse_signal(signal_name);
    if (threshold.has_value() == budget.has_value()) {
      throw Error(ErrorKind::configuration, "route policy needs exactly one of threshold or budget");
    }
    if (budget && !(*budget >= 0.0 && *budget <= 1.0)) {
      throw Error(ErrorKind::configuration, "budget must lie in [0, 1]");
    }
    if (threshold && std::isnan(*threshold)) throw Error(ErrorKind::configuration, "threshold is NaN");
  }

  Signal signal() const { return parse_signal(signal_name); }
};

struct RouteDecision {
  std::string instance_id;
  bool routed_to_strong = false;  // for abstention: abstained
  double signal_value = 0.0;
  std::string served_answer;
};

struct RouteOutcome {
  std::vector<RouteDecision> decisions;  // ordered by instance_id
  double threshold = 0.0;
  double routed_fraction = 0.0;
  std::optional<double> accuracy;  // served accuracy (routing) or retained accuracy (abstention)
  std::size_t routed = 0;
};

/// Label-free threshold from a budget: the largest routed share <= budget
/// achievable with strict-greater routing on these scores. Budget 0 yields
/// +inf (route nothing); a full budget yields -inf (route everything).
inline double calibrate_threshold(std::span<const double> scores, double budget) {
  if (scores.empty()) throw Error(ErrorKind::degenerate_input, "cannot calibrate on an empty score set");
  if (!(budget >= 0.0 && budget <= 1.0)) throw Error(ErrorKind::configuration, "budget must lie in [0, 1]");
  std::vector<double> desc(scores.begin(), scores.end());
  std::sort(desc.begin(), desc.end(), std::greater<>());
  const std::size_t n = desc.size();
  // Tolerance keeps budgets like k/n from flooring to k-1.
  std::size_t j = std::min(n, static_cast<std::size_t>(std::floor(budget * static_cast<double>(n) + 1e-9)));
  if (j == n) return kRouteEverything;
  // Routing exactly j items needs desc[j-1] > desc[j].
  while (j > 0 && !(desc[j - 1] > desc[j])) --j;
  if (j == 0) return kRouteNothing;
  return desc[j];
}

inline std::vector<double> signal_values(std::span<const SignalRecord> records, Signal signal) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto v = suspicion(r, signal);
    if (!v) {
      throw Error(ErrorKind::capability,
                  "signal " + std::string(to_string(signal)) + " absent for '" + r.instance_id + "'");
    }
    out.push_back(*v);
  }
  return out;
}

/// Threshold in force for `policy`; budgets are calibrated on
/// `calibration_scores` (the batch itself when no separate split is given).
inline double resolve_threshold(const RoutePolicy& policy, std::span<const double> calibration_scores) {
  policy.validate();
  if (policy.threshold) return *policy.threshold;
  return calibrate_threshold(calibration_scores, *policy.budget);
}

using AnswerMap = std::map<std::string, std::string, std::less<>>;

namespace detail {

inline RouteOutcome decide(const RoutePolicy& policy, std::span<const SignalRecord> records,
                           std::optional<std::span<const double>> calibration, const AnswerMap* weak,
                           const AnswerMap* strong, bool abstain) {
  const auto values = signal_values(records, policy.signal());
  RouteOutcome out;
  out.threshold = resolve_threshold(policy, calibration ? *calibration : std::span<const double>(values));

  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return records[a].instance_id < records[b].instance_id; });

  bool labelled = true;
  std::int64_t correct = 0;
  std::size_t served = 0;
  for (auto i : idx) {
    const auto& r = records[i];
    RouteDecision d;
    d.instance_id = r.instance_id;
    d.signal_value = values[i];
    d.routed_to_strong = values[i] > out.threshold;
    const AnswerMap* source = d.routed_to_strong ? strong : weak;
    if (source) {
      if (auto it = source->find(r.instance_id); it != source->end()) d.served_answer = it->second;
    }
    out.routed += d.routed_to_strong ? 1 : 0;
    if (abstain) {
      if (!d.routed_to_strong) {
        if (!r.generator_correct) labelled = false;
        else correct += *r.generator_correct ? 1 : 0;
        ++served;
      }
    } else {
      const auto& label = d.routed_to_strong ? r.verifier_correct : r.generator_correct;
      if (!r.generator_correct || !r.verifier_correct) labelled = false;
      else correct += *label ? 1 : 0;
      ++served;
    }
    out.decisions.push_back(std::move(d));
  }
  out.routed_fraction = records.empty() ? 0.0 : static_cast<double>(out.routed) / static_cast<double>(records.size());
  if (labelled && served > 0) out.accuracy = static_cast<double>(correct) / static_cast<double>(served);
  return out;
}

}  // namespace detail

/// Sends each record whose signal exceeds the threshold to the strong model.
/// Accuracy is reported only when every record carries both labels.
inline RouteOutcome route_batch(const RoutePolicy& policy, std::span<const SignalRecord> records,
                                const AnswerMap& weak_answers, const AnswerMap& strong_answers,
                                std::optional<std::span<const double>> calibration_scores = std::nullopt) {
  return detail::decide(policy, records, calibration_scores, &weak_answers, &strong_answers, false);
}

/// Selective prediction: `routed_to_strong` means abstain. Accuracy is over
/// the retained (served) records.
inline RouteOutcome abstain_batch(const RoutePolicy& policy, std::span<const SignalRecord> records,
                                  const AnswerMap* weak_answers = nullptr,
                                  std::optional<std::span<const double>> calibration_scores = std::nullopt) {
  return detail::decide(policy, records, calibration_scores, weak_answers, nullptr, true);
}

// Thresholds may be infinite; JSON has no literal for that, so they are
// written as the strings "inf" / "-inf".
inline nlohmann::json threshold_to_json(double t) {
  if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
  return t;
}

inline double threshold_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return kRouteNothing;
    if (s == "-inf") return kRouteEverything;
    throw Error(ErrorKind::configuration, "bad threshold '" + s + "'");
  }
  return j.get<double>();
}

inline void to_json(nlohmann::json& j, const RoutePolicy& p) {
  j = nlohmann::json{{"signal_name", p.signal_name}};
  if (p.threshold) j["threshold"] = threshold_to_json(*p.threshold);
  if (p.budget) j["budget"] = *p.budget;
  if (p.calibration_set_id) j["calibration_set_id"] = *p.calibration_set_id;
}

inline void from_json(const nlohmann::json& j, RoutePolicy& p) {
  try {
    p.signal_name = j.at("signal_name").get<std::string>();
    p.threshold.reset();
    p.budget.reset();
    p.calibration_set_id.reset();
    if (j.contains("threshold") && !j["threshold"].is_null()) p.threshold = threshold_from_json(j["threshold"]);
    if (j.contains("budget") && !j["budget"].is_null()) p.budget = j["budget"].get<double>();
    if (j.contains("calibration_set_id") && !j["calibration_set_id"].is_null()) {
      p.calibration_set_id = j["calibration_set_id"].get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::configuration, std::string("bad route policy: ") + e.what());
  }
  p.validate();
}

}  // namespace xmodel::routing
