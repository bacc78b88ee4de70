#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "bbta/common.hpp"

namespace bbta {

// Probabilities are floored at this value before any logarithm. Removes NaN
// at the simplex boundary without visibly perturbing values.
inline constexpr double kProbFloor = 1e-12;

namespace detail {

inline double entropy_span(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > kProbFloor) h -= v * std::log(v);
  }
  return h;
}

// KL(p || q). Returns +inf when p puts mass where q has none.
inline double kl_span(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= kProbFloor) continue;
    if (q[k] <= kProbFloor) return std::numeric_limits<double>::infinity();
    d += p[k] * std::log(p[k] / q[k]);
  }
  return d;
}

inline double cosine_span(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  double c = num / (std::sqrt(na) * std::sqrt(nb));
  // snap to +/-1 so identical vectors compare as exactly parallel
  if (std::fabs(c) > 1.0 - 1e-12) c = c < 0.0 ? -1.0 : 1.0;
  return c;
}

}  // namespace detail

// Point on the K-simplex. Validated on construction; the unit of every
// information measure in the project.
class ProbVector {
 public:
  ProbVector() = default;
  explicit ProbVector(std::vector<double> values) : values_(std::move(values)) {
    validate();
  }

  static ProbVector uniform(int k) {
    return ProbVector(std::vector<double>(static_cast<std::size_t>(k), 1.0 / k));
  }
  static ProbVector one_hot(int k, int index) {
    std::vector<double> v(static_cast<std::size_t>(k), 0.0);
    v[static_cast<std::size_t>(index)] = 1.0;
    return ProbVector(std::move(v));
  }

  int k() const { return static_cast<int>(values_.size()); }
  const std::vector<double>& values() const { return values_; }
  double operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }
  std::span<const double> span() const { return values_; }

  int argmax() const {
    int best = 0;
    for (int i = 1; i < k(); ++i)
      if (values_[static_cast<std::size_t>(i)] > values_[static_cast<std::size_t>(best)]) best = i;
    return best;
  }

 private:
  void validate() const {
    if (values_.size() < 2) throw ConfigError("ProbVector: K must be >= 2");
    double sum = 0.0;
    for (double v : values_) {
      if (!(v >= 0.0 && v <= 1.0))
        throw ConfigError("ProbVector: entry outside [0,1]");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6)
      throw ConfigError("ProbVector: values do not sum to 1");
  }

  std::vector<double> values_;
};

// Margins and weights shared by the objectives.
struct FilterParams {
  double epsilon = 0.0;  // entropy margin, nats
  double d = 0.05;       // diversity margin on |cosine|
  double alpha = 0.4;    // fusion weight
  double lambda = 50.0;  // consistency KL weight

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("FilterParams: epsilon must be > 0");
    if (!(d > 0.0 && d <= 1.0)) throw ConfigError("FilterParams: d must be in (0,1]");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw ConfigError("FilterParams: alpha must be in [0,1]");
    if (!(lambda >= 0.0)) throw ConfigError("FilterParams: lambda must be >= 0");
  }
};

// Shannon entropy in nats, with 0*log(0) := 0. Result lies in [0, ln K].
inline double entropy(const ProbVector& p) { return detail::entropy_span(p.span()); }

inline double kl(const ProbVector& p, const ProbVector& q) {
  if (p.k() != q.k()) throw ConfigError("kl: dimension mismatch");
  return detail::kl_span(p.span(), q.span());
}

// p_H = alpha * p_s + (1 - alpha) * p_b.
inline ProbVector harmonize(const ProbVector& p_s, const ProbVector& p_b, double alpha) {
  if (p_s.k() != p_b.k()) throw ConfigError("harmonize: dimension mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("harmonize: alpha outside [0,1]");
  std::vector<double> out(static_cast<std::size_t>(p_s.k()));
  for (int i = 0; i < p_s.k(); ++i)
    out[static_cast<std::size_t>(i)] = alpha * p_s[i] + (1.0 - alpha) * p_b[i];
  return ProbVector(std::move(out));
}

// alpha-weighted Jensen-Shannon divergence:
//   alpha * KL(p_s || p_H) + (1 - alpha) * KL(p_b || p_H).
// Equals H(p_H) - alpha*H(p_s) - (1-alpha)*H(p_b); zero iff p_s == p_b.
inline double js_alpha(const ProbVector& p_s, const ProbVector& p_b, double alpha) {
  ProbVector mix = harmonize(p_s, p_b, alpha);
  return alpha * kl(p_s, mix) + (1.0 - alpha) * kl(p_b, mix);
}

// Reliability weight: exp(epsilon - h) when h < epsilon, else 0.
inline double reliability_weight(double h, double epsilon) {
  if (!(h >= 0.0)) throw ConfigError("reliability_weight: entropy must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("reliability_weight: epsilon must be > 0");
  if (h >= epsilon) return 0.0;
  return std::exp(epsilon - h);
}

// True iff |cos(p, ema)| < d. The sentinel (uninitialized EMA) passes:
// the moving average is undefined before the first reliable sample.
inline bool diversity_gate(const ProbVector& p, const ProbVector& ema, double d) {
  if (ema.k() == 0) return true;  // sentinel
  if (p.k() != ema.k()) throw ConfigError("diversity_gate: dimension mismatch");
  return std::fabs(detail::cosine_span(p.span(), ema.span())) < d;
}

}  // namespace bbta
