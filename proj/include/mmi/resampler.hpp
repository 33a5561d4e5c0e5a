#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmi/params.hpp"
#include "mmi/tensor.hpp"

namespace mmi {

struct ResamplerConfig {
  std::int64_t width = 32;     // latent / output width C
  std::int64_t input_dim = 0;  // feature width; 0 means `width`
  std::int64_t latents = 8;
  std::int64_t depth = 2;
  std::int64_t heads = 1;
  std::int64_t ffn_mult = 4;
};

/// Perceiver-style resampler: learned latents cross-attend a variable-size
/// feature set. Each block is
///   z ← z + Wo·Attn(Wq·LN(z), Wk·LN(x), Wv·LN(x));  z ← z + FFN(LN(z)).
/// Keys carry no positional information.
template <typename T>
class Resampler {
 public:
  Resampler(const ResamplerConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng);

  /// features [S, input_dim] with S ≥ 1 → [latents, width].
  [[nodiscard]] Tensor<T> operator()(const Tensor<T>& features) const;

  [[nodiscard]] const ResamplerConfig& config() const { return config_; }

  struct Block {
    Tensor<T> ln_q_g, ln_q_b, ln_kv_g, ln_kv_b, wq, wk, wv, wo;
    Tensor<T> ln_f_g, ln_f_b, w1, b1, w2, b2;
  };
  [[nodiscard]] const Tensor<T>& latents() const { return latents_; }
  [[nodiscard]] const std::vector<Block>& blocks() const { return blocks_; }

 private:
  ResamplerConfig config_;
  Tensor<T> latents_;
  std::vector<Block> blocks_;
};

extern template class Resampler<float>;
extern template class Resampler<double>;

}  // namespace mmi
