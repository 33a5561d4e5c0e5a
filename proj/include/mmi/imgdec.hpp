#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmi/mmfs.hpp"
#include "mmi/params.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/tensor.hpp"

namespace mmi {

/// Linear-β DDPM schedule over timesteps 1..T.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::int64_t steps = 100, double beta_first = 1e-4, double beta_last = 0.02);

  [[nodiscard]] std::int64_t steps() const { return static_cast<std::int64_t>(betas_.size()); }
  [[nodiscard]] double beta(std::int64_t t) const;
  [[nodiscard]] double alpha(std::int64_t t) const { return 1.0 - beta(t); }
  /// Product of α_s for s ≤ t; alpha_bar(0) is 1.
  [[nodiscard]] double alpha_bar(std::int64_t t) const;

  /// √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
  template <typename T>
  [[nodiscard]] Tensor<T> noise(const Tensor<T>& x0, std::int64_t t, const Tensor<T>& eps) const;

  /// `count` increasing timesteps ending at T, evenly spread over 1..T.
  [[nodiscard]] std::vector<std::int64_t> respaced(std::int64_t count) const;

 private:
  void check(std::int64_t t) const;
  std::vector<double> betas_, alpha_bars_;
};

struct DenoiserConfig {
  std::int64_t image_size = 16;  // square H_g = W_g
  std::int64_t image_channels = 3;
  std::int64_t base_channels = 16;  // stage s has base·2^s channels
  std::int64_t depth = 2;
  std::int64_t cond_tokens = 16;
  std::int64_t cond_dim = 32;
  std::int64_t attn_heads = 1;
  bool use_mmfs = true;
  std::int64_t mmfs_feature_dim = 32;
  std::int64_t mmfs_levels = 3;
  std::int64_t mmfs_points = 4;
  std::int64_t mmfs_max_images = 6;
  std::int64_t mmfs_heads = 1;
  std::int64_t schedule_steps = 100;
  double beta_first = 1e-4;
  double beta_last = 0.02;

  [[nodiscard]] std::int64_t stage_channels(std::int64_t s) const { return base_channels << s; }
  [[nodiscard]] std::int64_t time_dim() const { return 4 * base_channels; }
  void validate() const;
};

/// Images visible to one batch element, oldest first.
template <typename T>
using PyramidSet = std::vector<const ImagePyramid<T>*>;

/// Recorded randomness of one NIP evaluation.
template <typename T>
struct NipDraw {
  std::vector<std::int64_t> t;  // per batch element, in [1, T]
  Tensor<T> eps;                // same shape as x0
};

template <typename T>
struct SampleOptions {
  double guidance = 3.5;
  std::int64_t steps = 0;  // 0 means every schedule step
  /// Called after each update with the 1-based step index and x.
  std::function<void(std::int64_t, const Tensor<T>&)> trace;
};

/// ε-prediction U-Net on NHWC images.
///
/// Down stage s: ResBlock → cross-attention to the condition → (skip saved)
/// → stride-2 conv → MMFS over the visible pyramids with per-pixel queries
/// referenced at their own pixel centers and a zero-initialized 1×1 output
/// projection. A middle ResBlock follows, then the mirrored up stages:
/// upsample → conv → concat skip → ResBlock → cross-attention. No MMFS on the
/// way up.
template <typename T>
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng);

  /// x_t [B, H, W, ch], one timestep and one condition [N_c, cond_dim] per
  /// element; `pyramids` is empty or has one set per element.
  [[nodiscard]] Tensor<T> denoise(const Tensor<T>& x_t, std::span<const std::int64_t> t,
                                  const std::vector<Tensor<T>>& conds,
                                  const std::vector<PyramidSet<T>>& pyramids) const;

  [[nodiscard]] NipDraw<T> draw(const Shape& shape, Philox& rng) const;
  /// mean((ε − ε̂(x_t, t))²) for the recorded draw.
  [[nodiscard]] Tensor<T> nip_loss(const Tensor<T>& x0, const std::vector<Tensor<T>>& conds,
                                   const std::vector<PyramidSet<T>>& pyramids, const NipDraw<T>& draw) const;
  [[nodiscard]] Tensor<T> nip_loss(const Tensor<T>& x0, const std::vector<Tensor<T>>& conds,
                                   const std::vector<PyramidSet<T>>& pyramids, Philox& rng) const;

  /// Ancestral sampling with classifier-free guidance
  /// ε̂ = ε̂_null + s·(ε̂_cond − ε̂_null); batch = conds.size(). Runs without
  /// recording gradients.
  [[nodiscard]] Tensor<T> sample(const std::vector<Tensor<T>>& conds, const std::vector<PyramidSet<T>>& pyramids,
                                 const SampleOptions<T>& options, Philox& rng) const;

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }
  [[nodiscard]] const NoiseSchedule& schedule() const { return schedule_; }
  [[nodiscard]] const Tensor<T>& null_cond() const { return null_cond_; }
  /// null_cond() repeated `batch` times.
  [[nodiscard]] std::vector<Tensor<T>> null_conds(std::int64_t batch) const;

  struct ResBlock {
    Tensor<T> ln1_g, ln1_b, conv1_w, conv1_b, temb_w, temb_b, ln2_g, ln2_b, conv2_w, conv2_b, skip_w, skip_b;
  };
  struct CrossAttn {
    Tensor<T> ln_g, ln_b, wq, wk, wv, wo;
  };
  struct Down {
    ResBlock res;
    CrossAttn xattn;
    Tensor<T> down_w, down_b;
    std::unique_ptr<MMFS<T>> mmfs;
  };
  struct Up {
    Tensor<T> up_w, up_b;
    ResBlock res;
    CrossAttn xattn;
  };

 private:
  [[nodiscard]] Tensor<T> res_block(const ResBlock& b, const Tensor<T>& x, const Tensor<T>& temb) const;
  [[nodiscard]] Tensor<T> cross_attn(const CrossAttn& a, const Tensor<T>& x, const std::vector<Tensor<T>>& conds) const;
  [[nodiscard]] Tensor<T> synchronize(const MMFS<T>& m, const Tensor<T>& x,
                                      const std::vector<PyramidSet<T>>& pyramids) const;

  DenoiserConfig config_;
  NoiseSchedule schedule_;
  Tensor<T> conv_in_w_, conv_in_b_, time_w1_, time_b1_, time_w2_, time_b2_;
  std::vector<Down> downs_;
  ResBlock mid_;
  std::vector<Up> ups_;  // ups_[s] mirrors downs_[s]
  Tensor<T> out_g_, out_b_, out_w_, out_bias_, null_cond_;
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

/// Sinusoidal embedding of timestep t: [sin(t·f_i) | cos(t·f_i)] with
/// f_i = 10000^(−i/half), half = dim/2.
std::vector<double> timestep_embedding(std::int64_t t, std::int64_t dim);

/// Pixel-center coordinates ((x + ½)/W, (y + ½)/H) of an H×W grid, row-major.
template <typename T>
Tensor<T> pixel_refs(std::int64_t height, std::int64_t width);

/// [0, 1] pixels ↔ [−1, 1] diffusion space.
template <typename T>
Tensor<T> to_diffusion(const RawImage& image);
template <typename T>
RawImage from_diffusion(const Tensor<T>& x);

}  // namespace mmi
