#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

#include "bbta/common.hpp"

namespace bbta {

// Dense row-major array of doubles. All numerics in this project are 64-bit.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
    data.assign(static_cast<std::size_t>(count(shape)), 0.0);
  }
  Tensor(std::vector<int> shp, std::vector<double> values)
      : shape(std::move(shp)), data(std::move(values)) {
    assert(static_cast<std::int64_t>(data.size()) == count(shape));
  }

  static std::int64_t count(const std::vector<int>& shp) {
    std::int64_t n = 1;
    for (int d : shp) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }

  static Tensor full(std::vector<int> shp, double v) {
    Tensor t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor gaussian(std::vector<int> shp, Rng& rng, double mean = 0.0,
                         double stddev = 1.0) {
    Tensor t(std::move(shp));
    for (double& v : t.data) v = bbta::gaussian(rng, mean, stddev);
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(c)];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(c)];
  }

  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(shape[1]); }
  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(shape[1]); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  assert(a.size() == b.size());
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return num / (std::sqrt(na) * std::sqrt(nb));
}

// y[N,O] = x[N,I] * w[O,I]^T + b[O]. Both row(r) of x and row(j) of w are
// contiguous, so the inner dot product vectorizes.
inline void matmul_bias(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  assert(w.dim(1) == in && b.size() == out);
  y = Tensor({n, out});
  for (int r = 0; r < n; ++r) {
    const double* xr = x.row(r);
    double* yr = y.row(r);
    for (int j = 0; j < out; ++j) yr[j] = b.at(j) + dot(xr, w.row(j), in);
  }
}

}  // namespace bbta
