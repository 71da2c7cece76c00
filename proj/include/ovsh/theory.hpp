#pragma once

// Length-scaled next-token loss and its gradient-norm (Lipschitz) bound.
//
// With c = 1/h(k) scaling the non-gold scores,
//   L(s, y)  = ln(1 + e^{-s_y} * sum_{j != y} e^{c s_j})
//   dL/ds_y  = -E / (1 + E),            E = e^{-s_y} * sum_{j != y} e^{c s_j}
//   dL/ds_j  =  c e^{c s_j - s_y} / (1 + E)
//   ||grad|| <= sqrt(1 + ((V - 1) c)^2) * E / (1 + E)
//
// E / (1 + E) equals 1 - e^{s_y} / (e^{s_y} + sum_{j != y} e^{c s_j}), i.e. one
// minus the gold probability under the loss's own normalizer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ovsh/common.hpp"

namespace ovsh::theory {

using LengthMap = std::function<double(double)>;

inline double identity_length_map(double k) { return k; }

struct BoundProbe {
  std::vector<double> scores;
  std::size_t gold = 0;  // 0-based
  double k = 1;
  LengthMap h = identity_length_map;

  double scale() const { return 1.0 / h(k); }

  void validate() const {
    if (scores.empty()) throw InputError("probe needs at least one score");
    if (gold >= scores.size()) throw InputError("gold index out of range");
    if (!(k >= 1)) throw InputError("length parameter k must be >= 1");
    for (double s : scores)
      if (!std::isfinite(s)) throw InputError("probe scores must be finite");
    const double hk = h(k);
    if (!(hk > 0) || !std::isfinite(hk)) throw InputError("h(k) must be positive and finite");
  }
};

namespace detail {

// Shifted exponents w_j = exp(z_j - M) for z_j = c s_j - s_y (j != y), with
// M = max(0, max_j z_j); `base` = exp(-M) stands in for the leading 1.
struct Terms {
  std::vector<double> w;  // w[y] = 0
  double shift = 0;
  double base = 1;
  double sum = 0;
};

inline Terms terms(const BoundProbe& p) {
  const double c = p.scale();
  const double sy = p.scores[p.gold];
  Terms t;
  t.w.assign(p.scores.size(), 0.0);
  double m = 0;
  for (std::size_t j = 0; j < p.scores.size(); ++j)
    if (j != p.gold) m = std::max(m, c * p.scores[j] - sy);
  t.shift = m;
  t.base = std::exp(-m);
  for (std::size_t j = 0; j < p.scores.size(); ++j) {
    if (j == p.gold) continue;
    t.w[j] = std::exp(c * p.scores[j] - sy - m);
    t.sum += t.w[j];
  }
  return t;
}

}  // namespace detail

inline double scaled_ntp_loss(const BoundProbe& p) {
  p.validate();
  const auto t = detail::terms(p);
  if (t.shift == 0) return std::log1p(t.sum);
  return t.shift + std::log(t.base + t.sum);
}

/// Closed-form gradient of scaled_ntp_loss with respect to the scores.
inline std::vector<double> scaled_ntp_grad(const BoundProbe& p) {
  p.validate();
  const auto t = detail::terms(p);
  const double denom = t.base + t.sum;
  const double c = p.scale();
  std::vector<double> g(p.scores.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = j == p.gold ? -t.sum / denom : c * t.w[j] / denom;
  return g;
}

struct BoundSides {
  double lhs = 0;  // ||grad_s L||
  double rhs = 0;  // Lipschitz bound
};

inline BoundSides grad_norm_bound(const BoundProbe& p) {
  const auto g = scaled_ntp_grad(p);
  double sq = 0;
  for (double v : g) sq += v * v;
  const auto t = detail::terms(p);
  const double others = double(p.scores.size() - 1) * p.scale();
  return {std::sqrt(sq), std::sqrt(1 + others * others) * (t.sum / (t.base + t.sum))};
}

/// Bound evaluated with every score (gold included) scaled by 1/h(k) in the
/// normalizer. Agrees with grad_norm_bound at h(k) = 1 but can turn negative
/// once the gold score dominates and h(k) > 1.
inline double uniformly_scaled_rhs(const BoundProbe& p) {
  p.validate();
  const double c = p.scale();
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : p.scores) mx = std::max(mx, c * s);
  double z = 0;
  for (double s : p.scores) z += std::exp(c * s - mx);
  const double gold_prob = std::exp(p.scores[p.gold] - mx) / z;
  const double others = double(p.scores.size() - 1) * c;
  return std::sqrt(1 + others * others) * (1 - gold_prob);
}

/// Central-difference gradient of scaled_ntp_loss.
inline std::vector<double> finite_difference_grad(BoundProbe p, double step = 1e-5) {
  std::vector<double> g(p.scores.size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double orig = p.scores[j];
    p.scores[j] = orig + step;
    const double up = scaled_ntp_loss(p);
    p.scores[j] = orig - step;
    const double down = scaled_ntp_loss(p);
    p.scores[j] = orig;
    g[j] = (up - down) / (2 * step);
  }
  return g;
}

/// ||a - b|| / (||a|| + ||b|| + 1e-8)
inline double vector_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nb) + 1e-8);
}

struct BoundTestReport {
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::size_t fd_failures = 0;
  double max_slack_ratio = 0;   // max lhs / rhs
  double max_fd_rel_error = 0;
  std::vector<std::string> failures;  // first few offending probes
};

/// Draws a probe for trial `t`: V in [2, 64], scores uniform in [-5, 5], gold
/// uniform, k uniform in [1, 100]. Each trial has its own RNG stream.
inline BoundProbe random_probe(std::uint64_t seed, std::uint64_t t) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(t), std::uint32_t(t >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<int> vocab(2, 64);
  std::uniform_real_distribution<double> score(-5.0, 5.0), length(1.0, 100.0);
  BoundProbe p;
  p.scores.resize(std::size_t(vocab(rng)));
  for (auto& s : p.scores) s = score(rng);
  p.gold = std::uniform_int_distribution<std::size_t>(0, p.scores.size() - 1)(rng);
  p.k = length(rng);
  return p;
}

inline std::string describe(const BoundProbe& p) {
  std::ostringstream os;
  os.precision(17);
  os << "V=" << p.scores.size() << " gold=" << p.gold << " k=" << p.k << " s=[";
  for (std::size_t i = 0; i < p.scores.size(); ++i) os << (i ? "," : "") << p.scores[i];
  os << "]";
  return os.str();
}

inline BoundTestReport bound_property_test(std::size_t trials, std::uint64_t seed, double fd_tolerance = 1e-5) {
  if (trials < 1) throw InputError("bound_property_test needs at least one trial");
  BoundTestReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto p = random_probe(seed, t);
    const auto sides = grad_norm_bound(p);
    const double fd_err = vector_relative_error(scaled_ntp_grad(p), finite_difference_grad(p));
    ++rep.trials;
    if (sides.rhs > 0) rep.max_slack_ratio = std::max(rep.max_slack_ratio, sides.lhs / sides.rhs);
    rep.max_fd_rel_error = std::max(rep.max_fd_rel_error, fd_err);
    const bool violated = sides.lhs > sides.rhs + 1e-9;
    const bool fd_bad = fd_err > fd_tolerance;
    rep.violations += violated;
    rep.fd_failures += fd_bad;
    if ((violated || fd_bad) && rep.failures.size() < 10) {
      std::ostringstream os;
      os.precision(17);
      os << "trial " << t << ": lhs=" << sides.lhs << " rhs=" << sides.rhs << " fd_err=" << fd_err << " "
         << describe(p);
      rep.failures.push_back(os.str());
    }
  }
  return rep;
}

}  // namespace ovsh::theory
