#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mmi/tensor.hpp"

namespace mmi {

// Differentiable primitives. All are pure functions of their inputs; every
// one records a backward closure when any input requires grad. Broadcasting
// is limited to the explicit row-vector / per-sample forms below.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
/// s * x for a one-element tensor s.
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s);
/// x[..., D] + b[D].
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b);
/// x[B, ..., C] + e[B, C], broadcast over the middle axes.
template <typename T> Tensor<T> add_per_sample(const Tensor<T>& x, const Tensor<T>& e);

template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
/// tanh approximation of GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// A[M, K] · B[K, N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., Din] · Wᵀ + b, W of shape [Dout, Din]. `b` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Softmax over the trailing axis, max-shifted.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
/// Mean over positions with mask != 0 of −log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                        std::span<const std::uint8_t> mask);
/// mean((a − b)²).
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Layer normalization over the trailing axis with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

/// Allowed key window [begin, end) for one query row.
using KeyRange = std::pair<std::int64_t, std::int64_t>;

/// Multi-head scaled dot-product attention over already-projected q[Tq, C],
/// k[Tk, C], v[Tk, C]. Heads split C evenly. `ranges` (one per query, or
/// empty for "all keys") restricts each query to a contiguous key window;
/// keys outside the window are skipped entirely.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::int64_t heads,
                    std::span<const KeyRange> ranges = {});

/// Rows `ids` of table[V, C] → [n, C].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> ids);
/// x[begin:end] along axis 0.
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t begin, std::int64_t end);
/// Concatenation along `axis`; all other extents must agree.
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// 2-D convolution in NHWC layout: x[B, H, W, Cin], w[Cout, kh, kw, Cin],
/// b[Cout] (may be undefined), zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride, std::int64_t pad);
/// Nearest-neighbour 2× upsampling of x[B, H, W, C].
template <typename T> Tensor<T> upsample2x(const Tensor<T>& x);
/// 2×2 average pooling of x[B, H, W, C].
template <typename T> Tensor<T> avgpool2x(const Tensor<T>& x);

/// Bilinear sampling of map[Hl, Wl, C] at normalized points pts[P, 2] (u, v)
/// → [P, C]. Pixel-center convention: x = u·Wl − 0.5, y = v·Hl − 0.5; the
/// four neighbours outside the map contribute zero. Differentiable w.r.t.
/// both the map and the points.
template <typename T> Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& pts);

/// Multi-image multi-scale deformable aggregation.
///
///   levels[m][l]   feature map [H_l, W_l, C] of image m at level l
///   locations      [Q, M, heads, K, 2] normalized points, shared by all levels
///   weights        [Q, heads, M, L, K] attention weights
///   → [Q, C], where head h reads channels [h·C/heads, (h+1)·C/heads).
template <typename T>
Tensor<T> deform_attn(const std::vector<std::vector<Tensor<T>>>& levels, const Tensor<T>& locations,
                      const Tensor<T>& weights);

}  // namespace mmi
