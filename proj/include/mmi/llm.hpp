#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmi/mmfs.hpp"
#include "mmi/params.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/sequence.hpp"
#include "mmi/tensor.hpp"

namespace mmi {

struct LLMConfig {
  std::int64_t d_model = 128;
  std::int64_t layers = 4;
  std::int64_t heads = 4;
  std::int64_t ffn_mult = 4;
  std::int64_t text_vocab = 256;
  std::int64_t mmfs_every = 2;
  std::int64_t max_context = 256;
  bool use_mmfs = true;
  std::int64_t mmfs_levels = 3;
  std::int64_t mmfs_points = 4;
  std::int64_t mmfs_max_images = 6;
  std::int64_t mmfs_heads = 1;
  double alpha_init = 0.0;
  bool strict_visibility = false;

  [[nodiscard]] Vocab vocab() const { return Vocab{text_vocab}; }
  /// Layers i with (i + 1) % mmfs_every == 0 carry an MMFS module between
  /// self-attention and the feed-forward block.
  [[nodiscard]] bool is_mmfs_layer(std::int64_t i) const { return use_mmfs && (i + 1) % mmfs_every == 0; }
  void validate() const;
};

template <typename T>
struct LLMOutput {
  Tensor<T> logits;  // [T, V]
  Tensor<T> hidden;  // [T, C], after the final layer norm
};

/// Incremental decoding state for one single-segment sequence.
template <typename T>
struct KVCache {
  std::vector<std::vector<T>> keys, values;  // per layer, [length, C] row-major
  std::vector<T> hidden;                     // [length, C] final hidden rows
  std::int64_t length = 0;
};

/// Pre-LN causal transformer over interleaved streams. Text and special
/// slots are embedded from a table, image slots take the caller's visual
/// tokens; learned absolute positions restart in every packed segment and
/// attention never crosses a segment boundary.
template <typename T>
class CausalLM {
 public:
  CausalLM(const LLMConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng);

  /// visual_tokens[j] is [N, C] and pyramids[j] the feature pyramid of local
  /// image j. Throws LookupError if an image in the stream has neither.
  [[nodiscard]] LLMOutput<T> forward(const PackedSequence& seq, const std::vector<Tensor<T>>& visual_tokens,
                                     std::span<const ImagePyramid<T>* const> pyramids) const;

  /// Masked next-token cross-entropy of `logits` against the stream.
  [[nodiscard]] Tensor<T> ntp_loss(const Tensor<T>& logits, const PackedSequence& seq) const;

  /// Input rows (before positions) for `slots`.
  [[nodiscard]] Tensor<T> embed(std::span<const Slot> slots, const std::vector<Tensor<T>>& visual_tokens) const;

  /// Appends `inputs` (rows from embed) at positions cache.length… and
  /// returns their outputs. visible[i] lists the images row i may read.
  /// Runs without recording gradients.
  [[nodiscard]] LLMOutput<T> step(KVCache<T>& cache, const Tensor<T>& inputs,
                                  const std::vector<std::vector<std::int64_t>>& visible,
                                  std::span<const ImagePyramid<T>* const> pyramids) const;

  [[nodiscard]] KVCache<T> new_cache() const;

  [[nodiscard]] const LLMConfig& config() const { return config_; }

  struct Block {
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
    std::unique_ptr<MMFS<T>> mmfs;
  };
  [[nodiscard]] const std::vector<Block>& blocks() const { return blocks_; }
  [[nodiscard]] const Tensor<T>& token_table() const { return tokens_; }
  [[nodiscard]] const Tensor<T>& position_table() const { return positions_; }
  [[nodiscard]] const Tensor<T>& final_g() const { return lnf_g_; }
  [[nodiscard]] const Tensor<T>& final_b() const { return lnf_b_; }
  [[nodiscard]] const Tensor<T>& head() const { return head_; }

 private:
  [[nodiscard]] Tensor<T> feed_forward(const Block& b, const Tensor<T>& x) const;

  LLMConfig config_;
  Tensor<T> tokens_, positions_, lnf_g_, lnf_b_, head_;
  std::vector<Block> blocks_;
};

extern template class CausalLM<float>;
extern template class CausalLM<double>;

}  // namespace mmi
