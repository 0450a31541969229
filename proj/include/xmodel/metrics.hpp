#pragma once

// Ranking- and routing-based evaluation of a scalar signal against
// correctness labels. Convention: higher score = more suspicious, and the
// positive class for AUROC is "weak model incorrect".
//
// Every ordering breaks score ties by instance_id ascending so that routing,
// abstention and quintile assignments are deterministic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "xmodel/error.hpp"
#include "xmodel/signals.hpp"

namespace xmodel::metrics {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct LabeledScore {
  std::string instance_id;
  double score = 0.0;
  bool weak_correct = false;
  std::optional<bool> strong_correct;
};

namespace detail {

inline void require_finite(std::span<const LabeledScore> items) {
  for (const auto& it : items) {
    if (!std::isfinite(it.score)) {
      throw Error(ErrorKind::degenerate_input, "non-finite score for instance '" + it.instance_id + "'");
    }
  }
}

/// Indices ordered by score descending, ties by instance_id ascending.
inline std::vector<std::size_t> routing_order(std::span<const LabeledScore> items) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].score != items[b].score) return items[a].score > items[b].score;
    return items[a].instance_id < items[b].instance_id;
  });
  return idx;
}

/// Indices ordered by score ascending (most confident first), ties by
/// instance_id ascending.
inline std::vector<std::size_t> confidence_order(std::span<const LabeledScore> items) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].score != items[b].score) return items[a].score < items[b].score;
    return items[a].instance_id < items[b].instance_id;
  });
  return idx;
}

}  // namespace detail

/// Mann-Whitney AUROC with midrank ties:
/// P(score_incorrect > score_correct) + 0.5 P(equal).
inline double auroc(std::span<const LabeledScore> items) {
  detail::require_finite(items);
  const auto order = detail::confidence_order(items);
  std::uint64_t pos = 0, neg = 0;
  for (const auto& it : items) (it.weak_correct ? neg : pos) += 1;
  if (pos == 0 || neg == 0) {
    throw Error(ErrorKind::undefined_metric, "AUROC needs both correct and incorrect instances");
  }
  // Twice the concordance count, so every term stays an integer.
  std::uint64_t twice_concordant = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && items[order[j]].score == items[order[i]].score) {
      (items[order[j]].weak_correct ? neg_here : pos_here) += 1;
      ++j;
    }
    twice_concordant += 2 * pos_here * neg_below + pos_here * neg_here;
    neg_below += neg_here;
    i = j;
  }
  return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

struct RoutingPoint {
  double c = 0.0;    // fraction routed to the strong model
  double a_c = 0.0;  // accuracy of the mixed system
  double pgr = 0.0;
};

struct RoutingCurve {
  std::vector<RoutingPoint> points;
  double a_w = 0.0;
  double a_s = 0.0;
  double apgr_raw = kNaN;         // random routing ~ 0.5
  double apgr_oracle = kNaN;      // apgr_raw of the oracle ordering
  double apgr_normalized = kNaN;  // random = 0, oracle = 1
  bool excluded = false;
  std::string exclusion_reason;

  double gap() const { return a_s - a_w; }
};

/// Trapezoidal mean of PGR over c in [0, 1] on the n+1 integer thresholds.
inline double apgr_from_points(std::span<const RoutingPoint> points) {
  if (points.size() < 2) return kNaN;
  double area = 0.0;
  for (std::size_t k = 0; k + 1 < points.size(); ++k) {
    area += (points[k].pgr + points[k + 1].pgr) / 2.0 * (points[k + 1].c - points[k].c);
  }
  return area;
}

namespace detail {

inline std::vector<RoutingPoint> accuracy_sweep(std::span<const LabeledScore> items, std::span<const std::size_t> order) {
  const std::size_t n = items.size();
  std::int64_t correct = 0;
  for (const auto& it : items) correct += it.weak_correct ? 1 : 0;
  std::vector<RoutingPoint> points;
  points.reserve(n + 1);
  const double dn = static_cast<double>(n);
  points.push_back({0.0, static_cast<double>(correct) / dn, 0.0});
  for (std::size_t k = 1; k <= n; ++k) {
    const auto& it = items[order[k - 1]];
    correct += (*it.strong_correct ? 1 : 0) - (it.weak_correct ? 1 : 0);
    points.push_back({static_cast<double>(k) / dn, static_cast<double>(correct) / dn, 0.0});
  }
  return points;
}

inline void fill_pgr(std::vector<RoutingPoint>& points, double a_w, double a_s) {
  for (auto& p : points) p.pgr = (p.a_c - a_w) / (a_s - a_w);
}

/// Best achievable ordering: items whose routing gains accuracy (weak wrong,
/// strong right) first, then the remaining weak-incorrect items, then
/// weak-correct items with those the strong model also gets right first.
inline std::vector<std::size_t> oracle_order(std::span<const LabeledScore> items) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto rank = [&](std::size_t i) {
    const bool w = items[i].weak_correct, s = *items[i].strong_correct;
    return !w && s ? 0 : !w ? 1 : s ? 2 : 3;
  };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (rank(a) != rank(b)) return rank(a) < rank(b);
    return items[a].instance_id < items[b].instance_id;
  });
  return idx;
}

}  // namespace detail

/// Routes the most suspicious instances to the strong model first and
/// records a(c) and PGR(c) at every integer threshold c = k/n.
///
/// `gap_floor`: pairs with |a_s - a_w| below it are flagged excluded (values
/// are still computed when the gap is non-zero). Passing nullopt disables
/// exclusion, in which case a zero gap is an error.
inline RoutingCurve pgr_curve(std::span<const LabeledScore> items, std::optional<double> gap_floor = 0.05) {
  detail::require_finite(items);
  if (items.size() < 2) throw Error(ErrorKind::degenerate_input, "routing curve needs at least 2 instances");
  for (const auto& it : items) {
    if (!it.strong_correct) {
      throw Error(ErrorKind::degenerate_input, "instance '" + it.instance_id + "' lacks a strong-model label");
    }
  }

  RoutingCurve curve;
  curve.points = detail::accuracy_sweep(items, detail::routing_order(items));
  curve.a_w = curve.points.front().a_c;
  curve.a_s = curve.points.back().a_c;
  const double gap = curve.a_s - curve.a_w;

  if (gap_floor && std::abs(gap) < *gap_floor) {
    curve.excluded = true;
    curve.exclusion_reason = "capability gap " + std::to_string(gap) + " below floor " + std::to_string(*gap_floor);
  }
  if (gap == 0.0) {
    if (!gap_floor) throw Error(ErrorKind::division_hazard, "weak and strong accuracy are equal; PGR undefined");
    for (auto& p : curve.points) p.pgr = kNaN;
    return curve;
  }

  detail::fill_pgr(curve.points, curve.a_w, curve.a_s);
  curve.apgr_raw = apgr_from_points(curve.points);

  auto oracle = detail::accuracy_sweep(items, detail::oracle_order(items));
  detail::fill_pgr(oracle, curve.a_w, curve.a_s);
  curve.apgr_oracle = apgr_from_points(oracle);
  const double denom = curve.apgr_oracle - 0.5;
  curve.apgr_normalized = std::abs(denom) > 1e-12 ? (curve.apgr_raw - 0.5) / denom : kNaN;
  return curve;
}

struct CoveragePoint {
  double coverage = 0.0;
  double accuracy = 0.0;
};

struct CoverageAccuracyCurve {
  std::vector<CoveragePoint> points;
  double auc = 0.0;  // trapezoid over coverage in [1/n, 1]
};

/// Abstention sweep: keep the k lowest-score instances for k = 1..n.
inline CoverageAccuracyCurve coverage_accuracy(std::span<const LabeledScore> items) {
  detail::require_finite(items);
  if (items.empty()) throw Error(ErrorKind::degenerate_input, "coverage curve needs at least one instance");
  const auto order = detail::confidence_order(items);
  const double dn = static_cast<double>(items.size());
  CoverageAccuracyCurve curve;
  curve.points.reserve(items.size());
  std::int64_t correct = 0;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    correct += items[order[k - 1]].weak_correct ? 1 : 0;
    curve.points.push_back({static_cast<double>(k) / dn, static_cast<double>(correct) / static_cast<double>(k)});
  }
  for (std::size_t k = 0; k + 1 < curve.points.size(); ++k) {
    curve.auc += (curve.points[k].accuracy + curve.points[k + 1].accuracy) / 2.0 *
                 (curve.points[k + 1].coverage - curve.points[k].coverage);
  }
  return curve;
}

struct QuintileResult {
  std::array<double, 5> accuracy{};
  std::array<std::size_t, 5> sizes{};
  double spread = 0.0;      // accuracy(Q1) - accuracy(Q5)
  std::vector<int> bin_of;  // bin index per input item, 0 = lowest scores
};

/// Sorted ascending, split into 5 contiguous bins whose sizes differ by at
/// most one; earlier bins take the remainder.
inline QuintileResult quintile_spread(std::span<const LabeledScore> items) {
  detail::require_finite(items);
  if (items.size() < 5) throw Error(ErrorKind::degenerate_input, "quintiles need at least 5 instances");
  const auto order = detail::confidence_order(items);
  QuintileResult out;
  out.bin_of.assign(items.size(), 0);
  const std::size_t base = items.size() / 5, extra = items.size() % 5;
  std::size_t at = 0;
  for (int b = 0; b < 5; ++b) {
    const std::size_t size = base + (static_cast<std::size_t>(b) < extra ? 1 : 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < size; ++i, ++at) {
      out.bin_of[order[at]] = b;
      correct += items[order[at]].weak_correct ? 1 : 0;
    }
    out.sizes[b] = size;
    out.accuracy[b] = static_cast<double>(correct) / static_cast<double>(size);
  }
  out.spread = out.accuracy[0] - out.accuracy[4];
  return out;
}

struct CaseCell {
  double mean = kNaN;
  std::size_t n = 0;
  bool empty() const { return n == 0; }
};

struct CaseMeans {
  CaseCell both_correct;
  CaseCell gen_only_wrong;
  CaseCell ver_only_wrong;
  CaseCell both_wrong;

  std::size_t total() const { return both_correct.n + gen_only_wrong.n + ver_only_wrong.n + both_wrong.n; }
};

/// Mean of the stored (log-space for CMP-family) signal in each of the four
/// generator/verifier outcome cells.
inline CaseMeans case_means(std::span<const SignalRecord> records, Signal signal) {
  std::array<double, 4> sum{};
  std::array<std::size_t, 4> n{};
  for (const auto& r : records) {
    if (!r.generator_correct || !r.verifier_correct) {
      throw Error(ErrorKind::degenerate_input, "case means need generator and verifier labels ('" + r.instance_id + "')");
    }
    const auto v = stored_value(r, signal);
    if (!v) {
      throw Error(ErrorKind::capability,
                  "signal " + std::string(to_string(signal)) + " absent for '" + r.instance_id + "'");
    }
    const int cell = (*r.generator_correct ? 0 : 1) + (*r.verifier_correct ? 0 : 2);
    sum[cell] += *v;
    ++n[cell];
  }
  auto make = [&](int c) { return CaseCell{n[c] ? sum[c] / static_cast<double>(n[c]) : kNaN, n[c]}; };
  return {make(0), make(1), make(2), make(3)};
}

struct CorrelationResult {
  enum class Method { exact_permutation, t_approximation };
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  Method method = Method::t_approximation;
};

inline const char* to_string(CorrelationResult::Method m) {
  return m == CorrelationResult::Method::exact_permutation ? "exact_permutation" : "t_approximation";
}

/// Midranks (1-based) with ties sharing the average rank.
inline std::vector<double> midranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && xs[idx[j]] == xs[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

namespace detail {

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace detail

/// Spearman rank correlation. Two-sided p-value: exact permutation over all
/// n! orderings when n <= 8, Student-t approximation with n-2 df otherwise.
inline CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorKind::degenerate_input, "spearman inputs differ in length");
  if (xs.size() < 3) throw Error(ErrorKind::degenerate_input, "spearman needs at least 3 points");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(xs) || constant(ys)) throw Error(ErrorKind::undefined_metric, "correlation undefined for constant input");

  const auto rx = midranks(xs);
  const auto ry = midranks(ys);
  CorrelationResult out;
  out.n = xs.size();
  out.rho = detail::pearson(rx, ry);

  if (out.n <= 8) {
    out.method = CorrelationResult::Method::exact_permutation;
    auto perm = ry;
    std::sort(perm.begin(), perm.end());
    std::size_t extreme = 0, total = 0;
    const double observed = std::abs(out.rho) - 1e-12;
    do {
      ++total;
      if (std::abs(detail::pearson(rx, perm)) >= observed) ++extreme;
    } while (std::next_permutation(perm.begin(), perm.end()));
    // Permutations of tied ranks are distinct multiset orderings; each is
    // equally likely, so the ratio is still the exact p-value.
    out.p_value = static_cast<double>(extreme) / static_cast<double>(total);
  } else {
    out.method = CorrelationResult::Method::t_approximation;
    if (std::abs(out.rho) >= 1.0) {
      out.p_value = 0.0;
    } else {
      const double df = static_cast<double>(out.n) - 2.0;
      const double t = out.rho * std::sqrt(df / (1.0 - out.rho * out.rho));
      boost::math::students_t dist(df);
      out.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
    }
  }
  return out;
}

enum class GuardStatus { ok, warn };

inline constexpr double kWeakGeneratorFloor = 0.10;

/// Below roughly 10% generator accuracy there is too little contrast for any
/// of the signals; the result is a warning only.
inline GuardStatus weak_generator_guard(double weak_accuracy) {
  if (!(weak_accuracy >= 0.0 && weak_accuracy <= 1.0)) {
    throw Error(ErrorKind::degenerate_input, "accuracy must lie in [0, 1]");
  }
  return weak_accuracy < kWeakGeneratorFloor ? GuardStatus::warn : GuardStatus::ok;
}

/// Builds LabeledScores for one signal. Weak labels come from
/// generator_correct and strong labels from verifier_correct.
inline std::vector<LabeledScore> labeled_scores(std::span<const SignalRecord> records, Signal signal) {
  std::vector<LabeledScore> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto v = suspicion(r, signal);
    if (!v) {
      throw Error(ErrorKind::capability,
                  "signal " + std::string(to_string(signal)) + " absent for '" + r.instance_id + "'");
    }
    if (!r.generator_correct) throw Error(ErrorKind::degenerate_input, "missing generator label for '" + r.instance_id + "'");
    out.push_back({r.instance_id, *v, *r.generator_correct, r.verifier_correct});
  }
  return out;
}

}  // namespace xmodel::metrics
