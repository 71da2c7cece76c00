#pragma once

// Gradient signal-to-noise ratio across training samples:
//   GSNR_j = mean_s(g_j)^2 / (var_s(g_j) + eps)
// with population variance. Per-sample gradients are streamed through a
// Welford accumulator so memory stays O(parameters).

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ovsh/tinylm.hpp"

namespace ovsh {

inline constexpr double kGsnrEpsilon = 1e-12;

/// Streaming per-coordinate mean and population variance.
class GsnrAccumulator {
 public:
  explicit GsnrAccumulator(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  template <class T>
  void add(std::span<const T> g) {
    if (g.size() != mean_.size()) throw InputError("gradient dimension mismatch");
    ++count_;
    const double inv = 1.0 / double(count_);
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double x = double(g[j]);
      const double delta = x - mean_[j];
      mean_[j] += delta * inv;
      m2_[j] += delta * (x - mean_[j]);
    }
  }
  void add(std::initializer_list<double> g) { add(std::span<const double>(g.begin(), g.size())); }

  std::size_t count() const noexcept { return count_; }
  std::size_t dim() const noexcept { return mean_.size(); }
  double mean(std::size_t j) const { return mean_[j]; }
  double variance(std::size_t j) const { return count_ ? m2_[j] / double(count_) : 0.0; }

  double gsnr(std::size_t j, double eps = kGsnrEpsilon) const {
    return mean_[j] * mean_[j] / (variance(j) + eps);
  }

 private:
  std::vector<double> mean_, m2_;
  std::size_t count_ = 0;
};

/// Calls `sink(index, gradient)` once per sample, in order. The gradient
/// buffer is reused between calls.
template <class T>
void per_sample_grads(const Transformer<T>& m, std::span<const Sample> samples,
                      const std::function<void(std::size_t, std::span<const T>)>& sink,
                      bool full_sequence = false) {
  if (samples.empty()) throw InputError("per_sample_grads needs at least one sample");
  ParamBuffer<T> g(m.param_count());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    grad(m, samples.subspan(i, 1), std::span<T>(g), full_sequence);
    sink(i, std::span<const T>(g));
  }
}

struct GSNRReport {
  std::map<std::string, double> per_param_group;  // mean GSNR within each named segment
  double aggregate = 0;                           // unweighted mean over all parameters
  std::size_t sample_count = 0;
  double epsilon = kGsnrEpsilon;
};

template <class T>
GSNRReport gsnr(const Transformer<T>& m, std::span<const Sample> samples, double epsilon = kGsnrEpsilon,
                bool full_sequence = false) {
  if (samples.size() < 2) throw InputError("gsnr needs at least two samples");
  if (!(epsilon > 0)) throw InputError("gsnr epsilon must be > 0");
  GsnrAccumulator acc(m.param_count());
  per_sample_grads<T>(m, samples, [&](std::size_t, std::span<const T> g) { acc.add(g); }, full_sequence);

  GSNRReport rep;
  rep.sample_count = acc.count();
  rep.epsilon = epsilon;
  double total = 0;
  for (const auto& seg : m.layout().segments()) {
    double sum = 0;
    for (std::size_t j = seg.offset; j < seg.offset + seg.size(); ++j) sum += acc.gsnr(j, epsilon);
    rep.per_param_group[seg.name] = sum / double(seg.size());
    total += sum;
  }
  rep.aggregate = total / double(m.param_count());
  return rep;
}

}  // namespace ovsh
