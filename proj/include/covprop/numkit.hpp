#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "covprop/error.hpp"

namespace covprop {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt2 = 1.41421356237309504880;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct Vector {
  std::vector<double> data;

  Vector() = default;
  explicit Vector(std::size_t n, double value = 0.0) : data(n, value) {}
  Vector(std::initializer_list<double> init) : data(init) {}

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  bool operator==(const Vector&) const = default;
};

// Dense row-major matrix. Small sizes throughout, so no blocking tricks.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double value = 0.0)
      : rows(r), cols(c), data(r * c, value) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix scaled_identity(std::size_t n, double s) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = s;
    return m;
  }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }

  double trace() const {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) s += (*this)(i, i);
    return s;
  }

  double max_diag() const {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) m = std::max(m, (*this)(i, i));
    return m;
  }

  bool operator==(const Matrix&) const = default;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw_error(ErrorKind::dimension,
                "matmul: incompatible shapes " + shape_string(a) + " and " + shape_string(b));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      double* orow = &out.data[i * out.cols];
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw_error(ErrorKind::dimension,
                "matrix add: incompatible shapes " + shape_string(a) + " and " + shape_string(b));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Matrix scaled(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data) v *= s;
  return out;
}

// y = A x
inline Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols != x.size()) {
    throw_error(ErrorKind::dimension, "matvec: matrix " + shape_string(a) + " vs vector length " +
                                          std::to_string(x.size()));
  }
  Vector y(a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

// y = A^T x
inline Vector matvec_transposed(const Matrix& a, const Vector& x) {
  if (a.rows != x.size()) {
    throw_error(ErrorKind::dimension, "matvec_transposed: matrix " + shape_string(a) +
                                          " vs vector length " + std::to_string(x.size()));
  }
  Vector y(a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (std::size_t j = 0; j < a.cols; ++j) y[j] += a(i, j) * xi;
  }
  return y;
}

inline double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw_error(ErrorKind::dimension, "dot: lengths " + std::to_string(a.size()) + " and " +
                                          std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace detail {

inline void check_symmetric(const Matrix& m, const char* who) {
  if (m.rows != m.cols) {
    throw_error(ErrorKind::dimension, std::string(who) + ": matrix " + shape_string(m) +
                                          " is not square");
  }
  double asym = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = i + 1; j < m.cols; ++j)
      asym = std::max(asym, std::abs(m(i, j) - m(j, i)));
  const double tol = 1e-9 * std::max(1.0, m.max_abs());
  if (asym > tol) {
    throw_error(ErrorKind::validation, std::string(who) + ": matrix is not symmetric, max |m_ij - m_ji| = " +
                                           std::to_string(asym));
  }
}

}  // namespace detail

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. The matrix is
// symmetrized internally after the tolerance check so tiny roundoff skew does
// not leak into the result.
inline std::vector<double> sym_eigenvalues(const Matrix& m) {
  detail::check_symmetric(m, "sym_eigenvalues");
  const std::size_t n = m.rows;
  if (n == 0) return {};
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));

  const double scale = std::max(1e-300, a.max_abs());
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) < 1e-13 * scale * n) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

inline double min_eigenvalue_sym(const Matrix& m) {
  if (m.rows == 0) {
    throw_error(ErrorKind::dimension, "min_eigenvalue_sym: empty matrix");
  }
  return sym_eigenvalues(m).front();
}

namespace detail {

// Continued fraction for erfc(x), x >= 2.5, via modified Lentz.
inline double erfc_continued_fraction(double x) {
  const double tiny = 1e-300;
  double f = x;
  double c = f;
  double d = 0.0;
  for (int i = 1; i <= 200; ++i) {
    const double an = 0.5 * i;
    d = x + an * d;
    if (std::abs(d) < tiny) d = tiny;
    c = x + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-17) break;
  }
  return std::exp(-x * x) / (std::sqrt(kPi) * f);
}

// Positive-term series for erf(x), |x| < 2.9: no cancellation, ~60 terms max.
inline double erf_series(double ax) {
  const double t = 2.0 * ax * ax;
  double term = 1.0;
  double sum = 1.0;
  for (int n = 1; n < 300; ++n) {
    term *= t / (2.0 * n + 1.0);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return 2.0 * ax * std::exp(-ax * ax) * sum / std::sqrt(kPi);
}

}  // namespace detail

inline double erf_value(double x) {
  if (std::isnan(x)) return x;
  const double ax = std::abs(x);
  double r;
  if (ax < 2.9) {
    r = detail::erf_series(ax);
  } else if (ax < 27.0) {
    r = 1.0 - detail::erfc_continued_fraction(ax);
  } else {
    r = 1.0;
  }
  return x < 0.0 ? -r : r;
}

inline double erfc_value(double x) {
  if (std::isnan(x)) return x;
  if (x >= 2.5) {
    return x < 27.0 ? detail::erfc_continued_fraction(x) : 0.0;
  }
  if (x <= -2.5) {
    return 2.0 - erfc_value(-x);
  }
  return 1.0 - erf_value(x);
}

inline double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

inline double std_normal_cdf(double x) { return 0.5 * erfc_value(-x / kSqrt2); }

// Inverse standard normal CDF: rational initial guess refined by one Newton
// step, which brings the absolute error to ~1e-15 over the open unit interval.
inline double std_normal_cdf_inv(double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    throw_error(ErrorKind::domain,
                "std_normal_cdf_inv: p = " + std::to_string(p) + " outside (0, 1)");
  }
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double pdf = std_normal_pdf(x);
  if (pdf > 1e-300) {
    x -= (std_normal_cdf(x) - p) / pdf;
  }
  return x;
}

namespace detail {

// P[Bin(n, p) >= k], summed upward from the smallest included term with the
// pmf recursion; the first term is seeded in log space to dodge overflow.
inline double binomial_tail_geq(std::uint64_t n, std::uint64_t k, double p) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double nd = static_cast<double>(n);
  const double kd = static_cast<double>(k);
  double log_pmf = std::lgamma(nd + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0) +
                   kd * std::log(p) + (nd - kd) * std::log1p(-p);
  double pmf = std::exp(log_pmf);
  double sum = pmf;
  const double odds = p / (1.0 - p);
  const double mode = nd * p;
  for (std::uint64_t i = k; i < n; ++i) {
    pmf *= odds * static_cast<double>(n - i) / static_cast<double>(i + 1);
    sum += pmf;
    if (pmf < 1e-320) break;
    if (static_cast<double>(i) > mode && pmf < sum * 1e-17) break;
  }
  return std::min(sum, 1.0);
}

}  // namespace detail

// One-sided Clopper-Pearson lower confidence bound: the largest p with
// P[Bin(trials, p) >= successes] <= alpha. Bisection on the tail, which is
// monotone increasing in p.
inline double binom_lower_confidence(std::uint64_t successes, std::uint64_t trials, double alpha) {
  if (trials == 0) {
    throw_error(ErrorKind::domain, "binom_lower_confidence: zero trials");
  }
  if (successes > trials) {
    throw_error(ErrorKind::domain, "binom_lower_confidence: successes " +
                                       std::to_string(successes) + " exceed trials " +
                                       std::to_string(trials));
  }
  if (!(alpha > 0.0) || !(alpha < 1.0)) {
    throw_error(ErrorKind::domain,
                "binom_lower_confidence: alpha = " + std::to_string(alpha) + " outside (0, 1)");
  }
  if (successes == 0) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-14; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (detail::binomial_tail_geq(trials, successes, mid) > alpha) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return lo;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// Derives an independent stream seed; used to give every sample index its own
// reproducible generator regardless of worker count or iteration order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + detail::rotl64(stream, 31));
  std::uint64_t a = detail::splitmix64(s);
  std::uint64_t b = detail::splitmix64(s);
  return a ^ detail::rotl64(b, 17);
}

// xoshiro256++ seeded via splitmix64, Box-Muller for normals. The standard
// library's normal_distribution is implementation-defined, which would break
// bit-reproducibility across toolchains, so the full path is pinned here.
class NormalRng {
 public:
  explicit NormalRng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = detail::splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl64(state_[3], 45);
    return result;
  }

  // Uniform on (0, 1]: safe as a log argument.
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform_pos();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    cached_ = r * std::sin(angle);
    has_cached_ = true;
    return r * std::cos(angle);
  }

 private:
  std::uint64_t state_[4] = {};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace covprop
