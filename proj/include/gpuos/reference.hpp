// Scalar double-precision reference implementations over dense row-major
// vectors. These are the oracles the operator kernels are tested against;
// they share no iteration or broadcast machinery with the kernels.
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace gpuos::reference {

inline double relu(double x) { return x < 0.0 ? 0.0 : x; }

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

/// Row-wise stabilized softmax: subtract the row max, exponentiate,
/// normalize. Left-to-right accumulation.
inline std::vector<double> softmax_rows(const std::vector<double>& x, size_t rows, size_t cols) {
  std::vector<double> out(rows * cols);
  for (size_t r = 0; r < rows; ++r) {
    double m = x[r * cols];
    for (size_t j = 1; j < cols; ++j) {
      if (m < x[r * cols + j]) m = x[r * cols + j];
    }
    double sum = 0.0;
    for (size_t j = 0; j < cols; ++j) sum += std::exp(x[r * cols + j] - m);
    for (size_t j = 0; j < cols; ++j) out[r * cols + j] = std::exp(x[r * cols + j] - m) / sum;
  }
  return out;
}

/// Row-wise layer normalization with population variance.
inline std::vector<double> layernorm_rows(const std::vector<double>& x,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta, size_t rows,
                                          size_t cols, double eps) {
  std::vector<double> out(rows * cols);
  for (size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (size_t j = 0; j < cols; ++j) mean += x[r * cols + j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (size_t j = 0; j < cols; ++j) {
      const double d = x[r * cols + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < cols; ++j) {
      out[r * cols + j] = (x[r * cols + j] - mean) * inv * gamma[j] + beta[j];
    }
  }
  return out;
}

inline std::vector<double> sum_rows(const std::vector<double>& x, size_t rows, size_t cols) {
  std::vector<double> out(rows, 0.0);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t j = 0; j < cols; ++j) out[r] += x[r * cols + j];
  }
  return out;
}

inline std::vector<double> max_rows(const std::vector<double>& x, size_t rows, size_t cols) {
  std::vector<double> out(rows);
  for (size_t r = 0; r < rows; ++r) {
    double m = x[r * cols];
    for (size_t j = 1; j < cols; ++j) {
      if (m < x[r * cols + j]) m = x[r * cols + j];
    }
    out[r] = m;
  }
  return out;
}

inline std::vector<double> min_rows(const std::vector<double>& x, size_t rows, size_t cols) {
  std::vector<double> out(rows);
  for (size_t r = 0; r < rows; ++r) {
    double m = x[r * cols];
    for (size_t j = 1; j < cols; ++j) {
      if (x[r * cols + j] < m) m = x[r * cols + j];
    }
    out[r] = m;
  }
  return out;
}

/// (m,k) x (k,n) -> (m,n), textbook triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, size_t m, size_t k,
                                  const std::vector<double>& b, size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  }
  return out;
}

inline std::vector<double> vecmat(const std::vector<double>& v, size_t k,
                                  const std::vector<double>& m, size_t n) {
  std::vector<double> out(n, 0.0);
  for (size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (size_t p = 0; p < k; ++p) acc += v[p] * m[p * n + j];
    out[j] = acc;
  }
  return out;
}

/// Single-token decode attention: q (h,d), caches (h,t,d), out (h,d).
inline std::vector<double> sdpa(const std::vector<double>& q, const std::vector<double>& kc,
                                const std::vector<double>& vc, size_t h, size_t t, size_t d,
                                double scale) {
  std::vector<double> out(h * d, 0.0);
  for (size_t head = 0; head < h; ++head) {
    std::vector<double> scores(t, 0.0);
    for (size_t i = 0; i < t; ++i) {
      double acc = 0.0;
      for (size_t j = 0; j < d; ++j) {
        acc += q[head * d + j] * kc[(head * t + i) * d + j];
      }
      scores[i] = scale * acc;
    }
    double m = scores[0];
    for (size_t i = 1; i < t; ++i) {
      if (m < scores[i]) m = scores[i];
    }
    double sum = 0.0;
    for (size_t i = 0; i < t; ++i) sum += std::exp(scores[i] - m);
    for (size_t i = 0; i < t; ++i) {
      const double w = std::exp(scores[i] - m) / sum;
      for (size_t j = 0; j < d; ++j) {
        out[head * d + j] += w * vc[(head * t + i) * d + j];
      }
    }
  }
  return out;
}

/// Rotary embedding on (t,d): pair (2i, 2i+1) at position p rotates by
/// p * theta_base^(-2i/d).
inline std::vector<double> rope(const std::vector<double>& x, const std::vector<double>& pos,
                                size_t t, size_t d, double theta_base) {
  std::vector<double> out(t * d);
  for (size_t row = 0; row < t; ++row) {
    for (size_t i = 0; i < d / 2; ++i) {
      const double theta =
          pos[row] * std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      const double a = x[row * d + 2 * i];
      const double b = x[row * d + 2 * i + 1];
      out[row * d + 2 * i] = a * c - b * s;
      out[row * d + 2 * i + 1] = a * s + b * c;
    }
  }
  return out;
}

}  // namespace gpuos::reference
