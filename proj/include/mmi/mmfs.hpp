#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmi/params.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/tensor.hpp"

namespace mmi {

enum class GateKind {
  Llm,      // f_q + tanh(α)·f_o, α scalar
  Decoder,  // f_q + Conv1x1(f_o), conv zero-initialized
};

struct MMFSConfig {
  std::int64_t query_dim = 32;
  std::int64_t feature_dim = 32;
  std::int64_t levels = 3;
  std::int64_t points = 4;
  std::int64_t max_images = 6;
  std::int64_t heads = 1;
  double alpha_init = 0.0;
  GateKind gate = GateKind::Llm;
};

/// Sampling locations and weights for a block of queries that share one
/// visible image set.
template <typename T>
struct SamplingPlan {
  Tensor<T> locations;  // [Q, M, heads, K, 2], normalized (u, v), shared by all levels
  Tensor<T> weights;    // [Q, heads, M, L, K], softmax-normalized jointly over (M, L, K)
  std::vector<std::int64_t> images;  // visible image ids, oldest first
};

/// Multi-image multi-scale deformable feature synchronizer.
///
/// For each visible image m (rank r = M−1−m, so the most recent image has
/// rank 0): q(m) = W_q·f_q + b_q + PosEmbed[r]; offsets = W_p·q(m) + b_p are
/// added to the reference point and reused at every level; logits
/// W_A·q(m) + b_A over (L, K) are concatenated across images and normalized
/// by one softmax per head.
template <typename T>
class MMFS {
 public:
  MMFS(const MMFSConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng);

  /// queries [Q, Dq]; refs [Q, 2] (treated as constants). Throws
  /// EmptyInputError for an empty visible set and CapacityError above M̄.
  [[nodiscard]] SamplingPlan<T> plan(const Tensor<T>& queries, const Tensor<T>& refs,
                                     std::span<const std::int64_t> visible) const;

  /// Deformable aggregation over `pyramids` (one per plan image, oldest
  /// first) → [Q, F].
  [[nodiscard]] Tensor<T> sample(std::span<const ImagePyramid<T>* const> pyramids, const SamplingPlan<T>& plan) const;

  /// Gated residual application for queries that all see `pyramids` (oldest
  /// first). Only the M̄ most recent images are used; with none the queries
  /// are returned unchanged.
  [[nodiscard]] Tensor<T> apply(const Tensor<T>& queries, const Tensor<T>& refs,
                                std::span<const ImagePyramid<T>* const> pyramids) const;

  /// Row-wise application where row i sees images visible[i] (indices into
  /// `pyramids`). Consecutive rows with identical visible lists are batched;
  /// a row never touches pyramids outside its own list.
  [[nodiscard]] Tensor<T> apply_rows(const Tensor<T>& queries, const Tensor<T>& refs,
                                     const std::vector<std::vector<std::int64_t>>& visible,
                                     std::span<const ImagePyramid<T>* const> pyramids) const;

  [[nodiscard]] const MMFSConfig& config() const { return config_; }
  [[nodiscard]] const Tensor<T>& wq() const { return wq_; }
  [[nodiscard]] const Tensor<T>& bq() const { return bq_; }
  [[nodiscard]] const Tensor<T>& wp() const { return wp_; }
  [[nodiscard]] const Tensor<T>& bp() const { return bp_; }
  [[nodiscard]] const Tensor<T>& wa() const { return wa_; }
  [[nodiscard]] const Tensor<T>& ba() const { return ba_; }
  [[nodiscard]] const Tensor<T>& pos() const { return pos_; }
  [[nodiscard]] const Tensor<T>& alpha() const { return alpha_; }
  [[nodiscard]] const Tensor<T>& gate_w() const { return gate_w_; }
  [[nodiscard]] const Tensor<T>& gate_b() const { return gate_b_; }

 private:
  [[nodiscard]] Tensor<T> gate(const Tensor<T>& queries, const Tensor<T>& fo) const;

  MMFSConfig config_;
  Tensor<T> wq_, bq_, wp_, bp_, wa_, ba_, pos_;
  Tensor<T> alpha_, gate_w_, gate_b_;
};

extern template class MMFS<float>;
extern template class MMFS<double>;

}  // namespace mmi
