#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attn/common.hpp"
#include "attn/rng.hpp"

namespace attn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_count(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles, rank 1 or 2. Scalars are shape {1}.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_count(shape), 0.0) {
    check_shape(!shape.empty() && shape.size() <= 2, "tensor rank must be 1 or 2");
    for (auto d : shape) check_shape(d > 0, "tensor dimensions must be positive");
  }

  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    check_shape(shape_count(shape) == data.size(),
                "tensor data length does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor of(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
  }

  static Tensor matrix(std::size_t r, std::size_t c, std::initializer_list<double> v) {
    return Tensor({r, c}, std::vector<double>(v));
  }

  static Tensor one_hot(std::size_t n, std::size_t index) {
    Tensor t({n});
    check_shape(index < n, "one_hot index out of range");
    t.data[index] = 1.0;
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : 1; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline double dot(const Tensor& a, const Tensor& b) {
  check_shape(a.size() == b.size(), "dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// y = M x for rank-2 M and rank-1 x.
inline Tensor matvec(const Tensor& m, const Tensor& x) {
  check_shape(m.rank() == 2 && x.rank() == 1 && m.cols() == x.size(),
              "matvec: incompatible shapes " + shape_str(m.shape) + " " + shape_str(x.shape));
  Tensor y({m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    const double* row = m.data.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) s += row[c] * x.data[c];
    y.data[r] = s;
  }
  return y;
}

// y = x^T M (row-vector times matrix).
inline Tensor vecmat(const Tensor& x, const Tensor& m) {
  check_shape(m.rank() == 2 && x.rank() == 1 && m.rows() == x.size(),
              "vecmat: incompatible shapes");
  Tensor y({m.cols()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x.data[r];
    const double* row = m.data.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) y.data[c] += xr * row[c];
  }
  return y;
}

inline void fill_uniform(Tensor& t, Rng& rng, double radius) {
  for (auto& v : t.data) v = rng.uniform(-radius, radius);
}

// Glorot-style init: radius sqrt(6 / (fan_in + fan_out)).
inline void fill_glorot(Tensor& t, Rng& rng) {
  const double fan_in = t.rank() == 2 ? static_cast<double>(t.cols()) : static_cast<double>(t.size());
  const double fan_out = t.rank() == 2 ? static_cast<double>(t.rows()) : 1.0;
  fill_uniform(t, rng, std::sqrt(6.0 / (fan_in + fan_out)));
}

inline double softmax_inplace(Tensor& t) {
  // Max-subtraction keeps exp in range; returns the log-normalizer.
  double m = t.data[0];
  for (double v : t.data) m = std::max(m, v);
  double z = 0.0;
  for (auto& v : t.data) {
    v = std::exp(v - m);
    z += v;
  }
  for (auto& v : t.data) v /= z;
  return m + std::log(z);
}

}  // namespace attn
