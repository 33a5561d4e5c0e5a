#include "mmi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <string>

#include "blas.hpp"

namespace mmi {
namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename T>
std::int64_t last_dim(const char* op, const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": rank-0 input");
  return x.shape().back();
}

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D dfdx) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [dfdx](detail::Node<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

// One bilinear tap set for a point on an [H, W, C] map under the pixel-center
// convention. Corners outside the map are flagged invalid and read as zero.
struct Taps {
  std::int64_t x0, y0;
  double fx, fy;
  std::int64_t index[4];  // element offset of channel 0, or -1
  double weight[4];
};

inline Taps make_taps(double u, double v, std::int64_t height, std::int64_t width, std::int64_t channels) {
  Taps t{};
  const double x = u * static_cast<double>(width) - 0.5;
  const double y = v * static_cast<double>(height) - 0.5;
  const double xf = std::floor(x);
  const double yf = std::floor(y);
  t.fx = x - xf;
  t.fy = y - yf;
  t.x0 = static_cast<std::int64_t>(xf);
  t.y0 = static_cast<std::int64_t>(yf);
  const std::int64_t xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
  const std::int64_t ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
  t.weight[0] = (1.0 - t.fx) * (1.0 - t.fy);
  t.weight[1] = t.fx * (1.0 - t.fy);
  t.weight[2] = (1.0 - t.fx) * t.fy;
  t.weight[3] = t.fx * t.fy;
  for (int c = 0; c < 4; ++c) {
    const bool inside = xs[c] >= 0 && xs[c] < width && ys[c] >= 0 && ys[c] < height;
    t.index[c] = inside ? (ys[c] * width + xs[c]) * channels : -1;
  }
  return t;
}

// Partial derivatives of the tap weights w.r.t. continuous x and y.
inline void tap_slopes(const Taps& t, double dx[4], double dy[4]) {
  dx[0] = -(1.0 - t.fy);
  dx[1] = (1.0 - t.fy);
  dx[2] = -t.fy;
  dx[3] = t.fy;
  dy[0] = -(1.0 - t.fx);
  dy[1] = -t.fx;
  dy[2] = (1.0 - t.fx);
  dy[3] = t.fx;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [factor](detail::Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must have one element, got " + to_string(s.shape()));
  const T factor = s.item();
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("mul_scalar", x.shape(), std::move(out), {x, s}, [](detail::Node<T>& self) {
    const T f = self.parents[1]->value[0];
    const auto& xv = self.parents[0]->value;
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
      g[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  const auto d = last_dim("add_rowvec", x);
  if (b.numel() != d) {
    throw DimensionError("add_rowvec: vector of " + std::to_string(b.numel()) + " for rows of " + std::to_string(d));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % static_cast<std::size_t>(d)];
  return make_result<T>("add_rowvec", x.shape(), std::move(out), {x, b}, [d](detail::Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<std::size_t>(d)] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_per_sample(const Tensor<T>& x, const Tensor<T>& e) {
  if (x.rank() < 2 || e.rank() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(-1)) {
    throw DimensionError("add_per_sample: " + to_string(x.shape()) + " + " + to_string(e.shape()));
  }
  const auto batch = x.dim(0);
  const auto channels = x.dim(-1);
  const auto inner = x.numel() / batch;
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto ev = e.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < inner; ++i) out[b * inner + i] += ev[b * channels + i % channels];
  }
  return make_result<T>("add_per_sample", x.shape(), std::move(out), {x, e},
                        [batch, channels, inner](detail::Node<T>& self) {
                          if (T* g = parent_grad(self, 0)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                          if (T* g = parent_grad(self, 1)) {
                            for (std::int64_t b = 0; b < batch; ++b) {
                              for (std::int64_t i = 0; i < inner; ++i) {
                                g[b * channels + i % channels] += self.grad[b * inner + i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      "silu", x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s + v * s * (T(1) - s);
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = static_cast<T>(0.044715);
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  blas::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, n, k](detail::Node<T>& self) {
    const T* av = self.parents[0]->value.data();
    const T* bv = self.parents[1]->value.data();
    if (T* g = parent_grad(self, 0)) blas::gemm(false, true, m, k, n, T(1), self.grad.data(), n, bv, n, T(1), g, k);
    if (T* g = parent_grad(self, 1)) blas::gemm(true, false, k, n, m, T(1), av, k, self.grad.data(), n, T(1), g, n);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const auto din = last_dim("linear", x);
  if (w.rank() != 2 || w.dim(1) != din) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  const auto dout = w.dim(0);
  if (b.defined() && b.numel() != dout) {
    throw DimensionError("linear: bias " + to_string(b.shape()) + " for " + std::to_string(dout) + " outputs");
  }
  const auto rows = x.numel() / din;
  std::vector<T> out(static_cast<std::size_t>(rows * dout), T(0));
  if (b.defined()) {
    const auto bv = b.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * dout);
  }
  blas::gemm(false, true, rows, dout, din, T(1), x.data().data(), din, w.data().data(), din, b.defined() ? T(1) : T(0),
             out.data(), dout);
  Shape shape = x.shape();
  shape.back() = dout;
  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>("linear", std::move(shape), std::move(out), std::move(parents),
                        [rows, din, dout](detail::Node<T>& self) {
                          const T* xv = self.parents[0]->value.data();
                          const T* wv = self.parents[1]->value.data();
                          const T* gy = self.grad.data();
                          if (T* g = parent_grad(self, 0)) blas::gemm(false, false, rows, din, dout, T(1), gy, dout, wv, din, T(1), g, din);
                          if (T* g = parent_grad(self, 1)) blas::gemm(true, false, dout, din, rows, T(1), gy, dout, xv, din, T(1), g, din);
                          if (self.parents.size() > 2) {
                            if (T* g = parent_grad(self, 2)) {
                              for (std::int64_t r = 0; r < rows; ++r) {
                                for (std::int64_t o = 0; o < dout; ++o) g[o] += gy[r * dout + o];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const auto d = last_dim("softmax", x);
  if (d == 0) throw DimensionError("softmax: empty axis");
  const auto rows = x.numel() / d;
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * d;
    T* dst = out.data() + r * d;
    const T peak = *std::max_element(src, src + d);
    T total = 0;
    for (std::int64_t i = 0; i < d; ++i) total += (dst[i] = std::exp(src[i] - peak));
    for (std::int64_t i = 0; i < d; ++i) dst[i] /= total;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, d](detail::Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* gy = self.grad.data() + r * d;
      T dot = 0;
      for (std::int64_t i = 0; i < d; ++i) dot += gy[i] * y[i];
      for (std::int64_t i = 0; i < d; ++i) g[r * d + i] += y[i] * (gy[i] - dot);
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                        std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [T, V], got " + to_string(logits.shape()));
  const auto rows = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows || static_cast<std::int64_t>(mask.size()) != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(mask.size()) + " mask flags");
  }
  std::vector<std::int64_t> active;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                           std::to_string(vocab) + ")");
    }
    active.push_back(r);
  }
  if (active.empty()) throw EmptyInputError("cross_entropy: every position is masked");

  const auto in = logits.data();
  std::vector<T> probs(active.size() * static_cast<std::size_t>(vocab));
  std::vector<std::int64_t> picked(active.size());
  T loss = 0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const T* row = in.data() + active[a] * vocab;
    T* p = probs.data() + a * vocab;
    const T peak = *std::max_element(row, row + vocab);
    T total = 0;
    for (std::int64_t i = 0; i < vocab; ++i) total += (p[i] = std::exp(row[i] - peak));
    for (std::int64_t i = 0; i < vocab; ++i) p[i] /= total;
    picked[a] = targets[active[a]];
    loss += peak + std::log(total) - row[picked[a]];
  }
  const T count = static_cast<T>(active.size());
  return make_result<T>("cross_entropy", {1}, {loss / count}, {logits},
                        [active = std::move(active), probs = std::move(probs), picked = std::move(picked), vocab,
                         count](detail::Node<T>& self) {
                          T* g = parent_grad(self, 0);
                          if (!g) return;
                          const T scale_factor = self.grad[0] / count;
                          for (std::size_t a = 0; a < active.size(); ++a) {
                            T* row = g + active[a] * vocab;
                            const T* p = probs.data() + a * vocab;
                            for (std::int64_t i = 0; i < vocab; ++i) row[i] += scale_factor * p[i];
                            row[picked[a]] -= scale_factor;
                          }
                        });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mse", a, b);
  if (a.numel() == 0) throw EmptyInputError("mse: empty input");
  const auto av = a.data();
  const auto bv = b.data();
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    total += d * d;
  }
  const T n = static_cast<T>(av.size());
  return make_result<T>("mse", {1}, {total / n}, {a, b}, [n](detail::Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    const T k = T(2) * self.grad[0] / n;
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += k * (x[i] - y[i]);
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] -= k * (x[i] - y[i]);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto v = x.data();
  const T total = std::accumulate(v.begin(), v.end(), T(0));
  return make_result<T>("sum", {1}, {total}, {x}, [](detail::Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const auto n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw EmptyInputError("mean: empty input");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const auto d = last_dim("layer_norm", x);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine params of " + std::to_string(gamma.numel()) + "/" +
                         std::to_string(beta.numel()) + " for width " + std::to_string(d));
  }
  const auto rows = x.numel() / d;
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(in.size()), xhat(in.size()), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * d;
    T mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += src[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::int64_t i = 0; i < d; ++i) {
      const T h = (src[i] - mu) * rstd[r];
      xhat[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
                          const T* gy = self.grad.data();
                          const T* gv = self.parents[1]->value.data();
                          if (T* g = parent_grad(self, 1)) {
                            for (std::int64_t r = 0; r < rows; ++r) {
                              for (std::int64_t i = 0; i < d; ++i) g[i] += gy[r * d + i] * xhat[r * d + i];
                            }
                          }
                          if (T* g = parent_grad(self, 2)) {
                            for (std::int64_t r = 0; r < rows; ++r) {
                              for (std::int64_t i = 0; i < d; ++i) g[i] += gy[r * d + i];
                            }
                          }
                          if (T* g = parent_grad(self, 0)) {
                            for (std::int64_t r = 0; r < rows; ++r) {
                              T m1 = 0, m2 = 0;
                              for (std::int64_t i = 0; i < d; ++i) {
                                const T dh = gy[r * d + i] * gv[i];
                                m1 += dh;
                                m2 += dh * xhat[r * d + i];
                              }
                              m1 /= static_cast<T>(d);
                              m2 /= static_cast<T>(d);
                              for (std::int64_t i = 0; i < d; ++i) {
                                const T dh = gy[r * d + i] * gv[i];
                                g[r * d + i] += rstd[r] * (dh - m1 - xhat[r * d + i] * m2);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::int64_t heads,
                    std::span<const KeyRange> ranges) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()));
  }
  const auto tq = q.dim(0), tk = k.dim(0), width = q.dim(1);
  if (heads < 1 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (!ranges.empty() && static_cast<std::int64_t>(ranges.size()) != tq) {
    throw DimensionError("attention: " + std::to_string(ranges.size()) + " key ranges for " + std::to_string(tq) + " queries");
  }
  std::vector<KeyRange> window(static_cast<std::size_t>(tq), KeyRange{0, tk});
  if (!ranges.empty()) {
    for (std::int64_t i = 0; i < tq; ++i) {
      const auto [lo, hi] = ranges[i];
      if (lo < 0 || hi > tk || lo > hi) throw DimensionError("attention: invalid key range");
      window[i] = ranges[i];
    }
  }
  const auto dh = width / heads;
  const T factor = T(1) / std::sqrt(static_cast<T>(dh));
  // probs laid out per (query, head) as contiguous runs over the key window.
  std::vector<std::int64_t> offset(static_cast<std::size_t>(tq * heads + 1), 0);
  for (std::int64_t i = 0; i < tq; ++i) {
    for (std::int64_t h = 0; h < heads; ++h) {
      offset[i * heads + h + 1] = offset[i * heads + h] + (window[i].second - window[i].first);
    }
  }
  std::vector<T> probs(static_cast<std::size_t>(offset.back()));
  std::vector<T> out(static_cast<std::size_t>(tq * width), T(0));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  for (std::int64_t i = 0; i < tq; ++i) {
    const auto [lo, hi] = window[i];
    if (lo == hi) continue;
    for (std::int64_t h = 0; h < heads; ++h) {
      T* p = probs.data() + offset[i * heads + h];
      const T* qi = qv + i * width + h * dh;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = lo; j < hi; ++j) {
        const T* kj = kv + j * width + h * dh;
        T s = 0;
        for (std::int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= factor;
        p[j - lo] = s;
        peak = std::max(peak, s);
      }
      T total = 0;
      for (std::int64_t j = lo; j < hi; ++j) total += (p[j - lo] = std::exp(p[j - lo] - peak));
      T* oi = out.data() + i * width + h * dh;
      for (std::int64_t j = lo; j < hi; ++j) {
        p[j - lo] /= total;
        const T w = p[j - lo];
        const T* vj = vv + j * width + h * dh;
        for (std::int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
  return make_result<T>(
      "attention", {tq, width}, std::move(out), {q, k, v},
      [tq, width, heads, dh, factor, window = std::move(window), offset = std::move(offset),
       probs = std::move(probs)](detail::Node<T>& self) {
        const T* qv = self.parents[0]->value.data();
        const T* kv = self.parents[1]->value.data();
        const T* vv = self.parents[2]->value.data();
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        T* gv = parent_grad(self, 2);
        std::vector<T> dp;
        for (std::int64_t i = 0; i < tq; ++i) {
          const auto [lo, hi] = window[i];
          if (lo == hi) continue;
          for (std::int64_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + offset[i * heads + h];
            const T* go = self.grad.data() + i * width + h * dh;
            dp.assign(static_cast<std::size_t>(hi - lo), T(0));
            T inner = 0;
            for (std::int64_t j = lo; j < hi; ++j) {
              const T* vj = vv + j * width + h * dh;
              T s = 0;
              for (std::int64_t c = 0; c < dh; ++c) s += go[c] * vj[c];
              dp[j - lo] = s;
              inner += s * p[j - lo];
              if (gv) {
                T* gvj = gv + j * width + h * dh;
                for (std::int64_t c = 0; c < dh; ++c) gvj[c] += p[j - lo] * go[c];
              }
            }
            const T* qi = qv + i * width + h * dh;
            for (std::int64_t j = lo; j < hi; ++j) {
              const T ds = p[j - lo] * (dp[j - lo] - inner) * factor;
              if (gq) {
                const T* kj = kv + j * width + h * dh;
                T* gqi = gq + i * width + h * dh;
                for (std::int64_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                T* gkj = gk + j * width + h * dh;
                for (std::int64_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, C], got " + to_string(table.shape()));
  const auto vocab = table.dim(0), width = table.dim(1);
  std::vector<std::int64_t> rows(ids.begin(), ids.end());
  std::vector<T> out(rows.size() * static_cast<std::size_t>(width));
  const auto tv = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= vocab) {
      throw LookupError("embedding: id " + std::to_string(rows[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + rows[i] * width, width, out.begin() + static_cast<std::int64_t>(i) * width);
  }
  const auto n = static_cast<std::int64_t>(rows.size());
  return make_result<T>("embedding", {n, width}, std::move(out), {table},
                        [rows = std::move(rows), width](detail::Node<T>& self) {
                          T* g = parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            for (std::int64_t c = 0; c < width; ++c) {
                              g[rows[i] * width + c] += self.grad[i * width + c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  if (x.rank() == 0 || begin < 0 || end > x.dim(0) || begin > end) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         to_string(x.shape()));
  }
  const auto row = x.numel() / std::max<std::int64_t>(x.dim(0), 1);
  std::vector<T> out(x.data().begin() + begin * row, x.data().begin() + end * row);
  Shape shape = x.shape();
  shape[0] = end - begin;
  return make_result<T>("slice_rows", std::move(shape), std::move(out), {x}, [begin, row](detail::Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    g += begin * row;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw EmptyInputError("concat: no inputs");
  const auto rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    for (std::int64_t a = 0; a < rank; ++a) {
      if (a != axis && p.shape()[a] != shape[a]) {
        throw DimensionError("concat: " + to_string(p.shape()) + " does not match " + to_string(shape));
      }
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t a = 0; a < axis; ++a) outer *= shape[a];
  for (std::int64_t a = axis + 1; a < rank; ++a) inner *= shape[a];
  std::vector<std::int64_t> chunk(parts.size()), start(parts.size());
  std::int64_t run = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    chunk[i] = parts[i].shape()[axis] * inner;
    start[i] = run;
    run += chunk[i];
  }
  std::vector<T> out(static_cast<std::size_t>(outer * run));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      std::copy_n(parts[i].data().begin() + o * chunk[i], chunk[i], out.begin() + o * run + start[i]);
    }
  }
  return make_result<T>("concat", std::move(shape), std::move(out), parts,
                        [outer, run, chunk = std::move(chunk), start = std::move(start)](detail::Node<T>& self) {
                          for (std::size_t i = 0; i < chunk.size(); ++i) {
                            T* g = parent_grad(self, i);
                            if (!g) continue;
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const T* src = self.grad.data() + o * run + start[i];
                              for (std::int64_t c = 0; c < chunk[i]; ++c) g[o * chunk[i] + c] += src[c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](detail::Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride, std::int64_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(3) != x.dim(3)) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " vs kernel " + to_string(w.shape()));
  }
  const auto batch = x.dim(0), height = x.dim(1), width = x.dim(2), cin = x.dim(3);
  const auto cout = w.dim(0), kh = w.dim(1), kw = w.dim(2);
  if (b.defined() && b.numel() != cout) throw DimensionError("conv2d: bias size mismatch");
  if (stride < 1 || height + 2 * pad < kh || width + 2 * pad < kw) throw DimensionError("conv2d: kernel larger than input");
  const auto ho = (height + 2 * pad - kh) / stride + 1;
  const auto wo = (width + 2 * pad - kw) / stride + 1;
  const auto patch = kh * kw * cin;
  const auto rows = batch * ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  std::vector<T> cols;
  if (!pointwise) {
    cols.assign(static_cast<std::size_t>(rows * patch), T(0));
    const T* xv = x.data().data();
    for (std::int64_t n = 0; n < batch; ++n) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T* dst = cols.data() + ((n * ho + oy) * wo + ox) * patch;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const auto iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= height) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= width) continue;
              std::copy_n(xv + ((n * height + iy) * width + ix) * cin, cin, dst + (ky * kw + kx) * cin);
            }
          }
        }
      }
    }
  }
  const T* col_data = pointwise ? x.data().data() : cols.data();
  std::vector<T> out(static_cast<std::size_t>(rows * cout), T(0));
  if (b.defined()) {
    const auto bv = b.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * cout);
  }
  blas::gemm(false, true, rows, cout, patch, T(1), col_data, patch, w.data().data(), patch, b.defined() ? T(1) : T(0),
             out.data(), cout);

  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(
      "conv2d", {batch, ho, wo, cout}, std::move(out), std::move(parents),
      [=, cols = std::move(cols)](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        const T* wv = self.parents[1]->value.data();
        const T* cv = pointwise ? self.parents[0]->value.data() : cols.data();
        if (T* g = parent_grad(self, 1)) blas::gemm(true, false, cout, patch, rows, T(1), gy, cout, cv, patch, T(1), g, patch);
        if (self.parents.size() > 2) {
          if (T* g = parent_grad(self, 2)) {
            for (std::int64_t r = 0; r < rows; ++r) {
              for (std::int64_t o = 0; o < cout; ++o) g[o] += gy[r * cout + o];
            }
          }
        }
        T* gx = parent_grad(self, 0);
        if (!gx) return;
        if (pointwise) {
          blas::gemm(false, false, rows, patch, cout, T(1), gy, cout, wv, patch, T(1), gx, patch);
          return;
        }
        std::vector<T> dcols(static_cast<std::size_t>(rows * patch), T(0));
        blas::gemm(false, false, rows, patch, cout, T(1), gy, cout, wv, patch, T(0), dcols.data(), patch);
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const T* src = dcols.data() + ((n * ho + oy) * wo + ox) * patch;
              for (std::int64_t ky = 0; ky < kh; ++ky) {
                const auto iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= height) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                  const auto ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= width) continue;
                  T* dst = gx + ((n * height + iy) * width + ix) * cin;
                  const T* s = src + (ky * kw + kx) * cin;
                  for (std::int64_t c = 0; c < cin; ++c) dst[c] += s[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample2x: expected [B, H, W, C], got " + to_string(x.shape()));
  const auto batch = x.dim(0), height = x.dim(1), width = x.dim(2), ch = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch * 4 * height * width * ch));
  const T* xv = x.data().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t y = 0; y < 2 * height; ++y) {
      for (std::int64_t xx = 0; xx < 2 * width; ++xx) {
        std::copy_n(xv + ((n * height + y / 2) * width + xx / 2) * ch, ch,
                    out.begin() + ((n * 2 * height + y) * 2 * width + xx) * ch);
      }
    }
  }
  return make_result<T>("upsample2x", {batch, 2 * height, 2 * width, ch}, std::move(out), {x},
                        [=](detail::Node<T>& self) {
                          T* g = parent_grad(self, 0);
                          if (!g) return;
                          for (std::int64_t n = 0; n < batch; ++n) {
                            for (std::int64_t y = 0; y < 2 * height; ++y) {
                              for (std::int64_t xx = 0; xx < 2 * width; ++xx) {
                                const T* src = self.grad.data() + ((n * 2 * height + y) * 2 * width + xx) * ch;
                                T* dst = g + ((n * height + y / 2) * width + xx / 2) * ch;
                                for (std::int64_t c = 0; c < ch; ++c) dst[c] += src[c];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> avgpool2x(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) % 2 || x.dim(2) % 2) {
    throw DimensionError("avgpool2x: expected [B, H, W, C] with even H, W, got " + to_string(x.shape()));
  }
  const auto batch = x.dim(0), height = x.dim(1) / 2, width = x.dim(2) / 2, ch = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch * height * width * ch), T(0));
  const T* xv = x.data().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t y = 0; y < 2 * height; ++y) {
      for (std::int64_t xx = 0; xx < 2 * width; ++xx) {
        const T* src = xv + ((n * 2 * height + y) * 2 * width + xx) * ch;
        T* dst = out.data() + ((n * height + y / 2) * width + xx / 2) * ch;
        for (std::int64_t c = 0; c < ch; ++c) dst[c] += T(0.25) * src[c];
      }
    }
  }
  return make_result<T>("avgpool2x", {batch, height, width, ch}, std::move(out), {x}, [=](detail::Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    for (std::int64_t n = 0; n < batch; ++n) {
      for (std::int64_t y = 0; y < 2 * height; ++y) {
        for (std::int64_t xx = 0; xx < 2 * width; ++xx) {
          const T* src = self.grad.data() + ((n * height + y / 2) * width + xx / 2) * ch;
          T* dst = g + ((n * 2 * height + y) * 2 * width + xx) * ch;
          for (std::int64_t c = 0; c < ch; ++c) dst[c] += T(0.25) * src[c];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& pts) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [H, W, C], got " + to_string(map.shape()));
  if (pts.rank() != 2 || pts.dim(1) != 2) throw DimensionError("bilinear_sample: points must be [P, 2], got " + to_string(pts.shape()));
  const auto height = map.dim(0), width = map.dim(1), ch = map.dim(2), count = pts.dim(0);
  const T* mv = map.data().data();
  const T* pv = pts.data().data();
  std::vector<T> out(static_cast<std::size_t>(count * ch), T(0));
  for (std::int64_t p = 0; p < count; ++p) {
    const auto taps = make_taps(static_cast<double>(pv[2 * p]), static_cast<double>(pv[2 * p + 1]), height, width, ch);
    T* dst = out.data() + p * ch;
    for (int c = 0; c < 4; ++c) {
      if (taps.index[c] < 0) continue;
      const T w = static_cast<T>(taps.weight[c]);
      const T* src = mv + taps.index[c];
      for (std::int64_t k = 0; k < ch; ++k) dst[k] += w * src[k];
    }
  }
  return make_result<T>("bilinear_sample", {count, ch}, std::move(out), {map, pts}, [=](detail::Node<T>& self) {
    const T* mv = self.parents[0]->value.data();
    const T* pv = self.parents[1]->value.data();
    T* gm = parent_grad(self, 0);
    T* gp = parent_grad(self, 1);
    for (std::int64_t p = 0; p < count; ++p) {
      const auto taps = make_taps(static_cast<double>(pv[2 * p]), static_cast<double>(pv[2 * p + 1]), height, width, ch);
      const T* go = self.grad.data() + p * ch;
      double sx[4], sy[4];
      tap_slopes(taps, sx, sy);
      double du = 0, dv = 0;
      for (int c = 0; c < 4; ++c) {
        if (taps.index[c] < 0) continue;
        const T* src = mv + taps.index[c];
        double dot = 0;
        for (std::int64_t k = 0; k < ch; ++k) dot += static_cast<double>(go[k]) * static_cast<double>(src[k]);
        du += sx[c] * dot;
        dv += sy[c] * dot;
        if (gm) {
          const T w = static_cast<T>(taps.weight[c]);
          T* dst = gm + taps.index[c];
          for (std::int64_t k = 0; k < ch; ++k) dst[k] += w * go[k];
        }
      }
      if (gp) {
        gp[2 * p] += static_cast<T>(du * static_cast<double>(width));
        gp[2 * p + 1] += static_cast<T>(dv * static_cast<double>(height));
      }
    }
  });
}

template <typename T>
Tensor<T> deform_attn(const std::vector<std::vector<Tensor<T>>>& levels, const Tensor<T>& locations,
                      const Tensor<T>& weights) {
  const auto images = static_cast<std::int64_t>(levels.size());
  if (images == 0) throw EmptyInputError("deform_attn: no images");
  const auto num_levels = static_cast<std::int64_t>(levels[0].size());
  if (num_levels == 0) throw DimensionError("deform_attn: image without levels");
  const auto ch = levels[0][0].dim(-1);
  for (const auto& image : levels) {
    if (static_cast<std::int64_t>(image.size()) != num_levels) throw DimensionError("deform_attn: level count differs across images");
    for (const auto& map : image) {
      if (map.rank() != 3 || map.dim(2) != ch) throw DimensionError("deform_attn: channel width differs across maps");
    }
  }
  if (locations.rank() != 5 || locations.dim(1) != images || locations.dim(4) != 2) {
    throw DimensionError("deform_attn: locations " + to_string(locations.shape()) + " for " + std::to_string(images) + " images");
  }
  const auto queries = locations.dim(0), heads = locations.dim(2), points = locations.dim(3);
  const Shape expected{queries, heads, images, num_levels, points};
  if (weights.shape() != expected) {
    throw DimensionError("deform_attn: weights " + to_string(weights.shape()) + ", expected " + to_string(expected));
  }
  if (ch % heads != 0) throw DimensionError("deform_attn: channels not divisible by heads");
  const auto hc = ch / heads;

  const T* lv = locations.data().data();
  const T* wv = weights.data().data();
  std::vector<T> out(static_cast<std::size_t>(queries * ch), T(0));
  auto loc_index = [=](std::int64_t q, std::int64_t m, std::int64_t h, std::int64_t k) {
    return (((q * images + m) * heads + h) * points + k) * 2;
  };
  auto weight_index = [=](std::int64_t q, std::int64_t h, std::int64_t m, std::int64_t l, std::int64_t k) {
    return (((q * heads + h) * images + m) * num_levels + l) * points + k;
  };
  for (std::int64_t q = 0; q < queries; ++q) {
    for (std::int64_t m = 0; m < images; ++m) {
      for (std::int64_t h = 0; h < heads; ++h) {
        T* dst = out.data() + q * ch + h * hc;
        for (std::int64_t k = 0; k < points; ++k) {
          const auto li = loc_index(q, m, h, k);
          for (std::int64_t l = 0; l < num_levels; ++l) {
            const auto& map = levels[m][l];
            const auto taps = make_taps(static_cast<double>(lv[li]), static_cast<double>(lv[li + 1]), map.dim(0),
                                        map.dim(1), ch);
            const T a = wv[weight_index(q, h, m, l, k)];
            const T* mv = map.data().data();
            for (int c = 0; c < 4; ++c) {
              if (taps.index[c] < 0) continue;
              const T w = a * static_cast<T>(taps.weight[c]);
              const T* src = mv + taps.index[c] + h * hc;
              for (std::int64_t j = 0; j < hc; ++j) dst[j] += w * src[j];
            }
          }
        }
      }
    }
  }

  std::vector<Tensor<T>> parents{locations, weights};
  std::vector<std::pair<std::int64_t, std::int64_t>> dims;
  for (const auto& image : levels) {
    for (const auto& map : image) {
      parents.push_back(map);
      dims.emplace_back(map.dim(0), map.dim(1));
    }
  }
  return make_result<T>(
      "deform_attn", {queries, ch}, std::move(out), std::move(parents),
      [=, dims = std::move(dims)](detail::Node<T>& self) {
        const T* lv = self.parents[0]->value.data();
        const T* wv = self.parents[1]->value.data();
        T* gl = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        for (std::int64_t q = 0; q < queries; ++q) {
          for (std::int64_t m = 0; m < images; ++m) {
            for (std::int64_t h = 0; h < heads; ++h) {
              const T* go = self.grad.data() + q * ch + h * hc;
              for (std::int64_t k = 0; k < points; ++k) {
                const auto li = loc_index(q, m, h, k);
                double du = 0, dv = 0;
                for (std::int64_t l = 0; l < num_levels; ++l) {
                  const auto map_slot = static_cast<std::size_t>(2 + m * num_levels + l);
                  const auto [height, width] = dims[map_slot - 2];
                  const T* mv = self.parents[map_slot]->value.data();
                  T* gm = parent_grad(self, map_slot);
                  const auto taps = make_taps(static_cast<double>(lv[li]), static_cast<double>(lv[li + 1]), height, width, ch);
                  double sx[4], sy[4];
                  tap_slopes(taps, sx, sy);
                  const auto wi = weight_index(q, h, m, l, k);
                  const double a = static_cast<double>(wv[wi]);
                  double sampled_dot = 0, sx_dot = 0, sy_dot = 0;
                  for (int c = 0; c < 4; ++c) {
                    if (taps.index[c] < 0) continue;
                    const T* src = mv + taps.index[c] + h * hc;
                    double dot = 0;
                    for (std::int64_t j = 0; j < hc; ++j) dot += static_cast<double>(go[j]) * static_cast<double>(src[j]);
                    sampled_dot += taps.weight[c] * dot;
                    sx_dot += sx[c] * dot;
                    sy_dot += sy[c] * dot;
                    if (gm) {
                      const T w = static_cast<T>(a * taps.weight[c]);
                      T* dst = gm + taps.index[c] + h * hc;
                      for (std::int64_t j = 0; j < hc; ++j) dst[j] += w * go[j];
                    }
                  }
                  if (gw) gw[wi] += static_cast<T>(sampled_dot);
                  du += a * sx_dot * static_cast<double>(width);
                  dv += a * sy_dot * static_cast<double>(height);
                }
                if (gl) {
                  gl[li] += static_cast<T>(du);
                  gl[li + 1] += static_cast<T>(dv);
                }
              }
            }
          }
        }
      });
}

#define MMI_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                 \
  template Tensor<T> mul_scalar(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add_per_sample(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> tanh(const Tensor<T>&);                                                                     \
  template Tensor<T> silu(const Tensor<T>&);                                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> softmax(const Tensor<T>&);                                                                  \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int64_t>, std::span<const std::uint8_t>); \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                                     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                   \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t,               \
                               std::span<const KeyRange>);                                                       \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int64_t>);                                 \
  template Tensor<T> slice_rows(const Tensor<T>&, std::int64_t, std::int64_t);                                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::int64_t);                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t, std::int64_t);   \
  template Tensor<T> upsample2x(const Tensor<T>&);                                                               \
  template Tensor<T> avgpool2x(const Tensor<T>&);                                                                \
  template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> deform_attn(const std::vector<std::vector<Tensor<T>>>&, const Tensor<T>&, const Tensor<T>&);

MMI_INSTANTIATE_OPS(float)
MMI_INSTANTIATE_OPS(double)

}  // namespace mmi
