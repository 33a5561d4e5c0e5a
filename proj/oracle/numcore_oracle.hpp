#pragma once

// Straight-line reference implementations used only by tests. They take raw
// row-major vectors and share no code with the library kernels.

#include <cmath>
#include <cstdint>
#include <vector>

namespace mmi::oracle {

using Vec = std::vector<double>;

inline Vec linear(const Vec& x, std::int64_t rows, std::int64_t din, const Vec& w, std::int64_t dout, const Vec& b) {
  Vec y(static_cast<std::size_t>(rows * dout), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t o = 0; o < dout; ++o) {
      double acc = b.empty() ? 0.0 : b[o];
      for (std::int64_t i = 0; i < din; ++i) acc += x[r * din + i] * w[o * din + i];
      y[r * dout + o] = acc;
    }
  }
  return y;
}

inline Vec softmax(const Vec& x) {
  double peak = x[0];
  for (double v : x) peak = v > peak ? v : peak;
  Vec y(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (y[i] = std::exp(x[i] - peak));
  for (double& v : y) v /= total;
  return y;
}

inline Vec layer_norm(const Vec& x, std::int64_t rows, std::int64_t d, const Vec& g, const Vec& b, double eps = 1e-5) {
  Vec y(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mu += x[r * d + i];
    mu /= static_cast<double>(d);
    for (std::int64_t i = 0; i < d; ++i) var += (x[r * d + i] - mu) * (x[r * d + i] - mu);
    var /= static_cast<double>(d);
    for (std::int64_t i = 0; i < d; ++i) y[r * d + i] = (x[r * d + i] - mu) / std::sqrt(var + eps) * g[i] + b[i];
  }
  return y;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v))); }

// Single-head softmax attention of q[tq, d] over k/v[tk, d] restricted to
// keys [lo[i], hi[i]).
inline Vec attention(const Vec& q, const Vec& k, const Vec& v, std::int64_t tq, std::int64_t d, std::int64_t heads,
                     const std::vector<std::int64_t>& lo, const std::vector<std::int64_t>& hi) {
  const std::int64_t dh = d / heads;
  Vec out(static_cast<std::size_t>(tq * d), 0.0);
  for (std::int64_t i = 0; i < tq; ++i) {
    for (std::int64_t h = 0; h < heads; ++h) {
      Vec s;
      for (std::int64_t j = lo[i]; j < hi[i]; ++j) {
        double dot = 0.0;
        for (std::int64_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s.push_back(dot / std::sqrt(static_cast<double>(dh)));
      }
      if (s.empty()) continue;
      const Vec p = softmax(s);
      for (std::int64_t j = lo[i]; j < hi[i]; ++j) {
        for (std::int64_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += p[j - lo[i]] * v[j * d + h * dh + c];
      }
    }
  }
  return out;
}

// Bilinear read of map[h, w, c] at normalized (u, v), pixel-center
// convention, zero outside.
inline Vec bilinear(const Vec& map, std::int64_t h, std::int64_t w, std::int64_t c, double u, double v) {
  const double x = u * static_cast<double>(w) - 0.5;
  const double y = v * static_cast<double>(h) - 0.5;
  const auto x0 = static_cast<std::int64_t>(std::floor(x));
  const auto y0 = static_cast<std::int64_t>(std::floor(y));
  const double ax = x - static_cast<double>(x0);
  const double ay = y - static_cast<double>(y0);
  Vec out(static_cast<std::size_t>(c), 0.0);
  auto tap = [&](std::int64_t yy, std::int64_t xx, double weight) {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
    for (std::int64_t k = 0; k < c; ++k) out[k] += weight * map[(yy * w + xx) * c + k];
  };
  tap(y0, x0, (1 - ax) * (1 - ay));
  tap(y0, x0 + 1, ax * (1 - ay));
  tap(y0 + 1, x0, (1 - ax) * ay);
  tap(y0 + 1, x0 + 1, ax * ay);
  return out;
}

}  // namespace mmi::oracle
