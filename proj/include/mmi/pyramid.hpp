#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmi/params.hpp"
#include "mmi/tensor.hpp"

namespace mmi {

/// 8-bit binary PPM/PGM image normalized to [0, 1], stored [H, W, channels].
struct RawImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;
  std::vector<float> pixels;

  [[nodiscard]] float at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

RawImage read_pnm(const std::string& path);
/// P6 for 3 channels, P5 for 1. Values are clamped to [0, 1] and rounded.
void write_pnm(const std::string& path, const RawImage& image);

/// Nearest-neighbour integer upscaling.
RawImage upscale_nearest(const RawImage& image, std::int64_t factor);

template <typename T>
Tensor<T> image_tensor(const RawImage& image);

struct PyramidConfig {
  std::int64_t levels = 3;
  std::int64_t channels = 32;
  std::int64_t image_channels = 3;
};

/// (H_i, W_i) for i = 1..levels: H / 2^(i+2). Throws DimensionError unless
/// H and W are divisible by 2^(levels+2).
std::vector<std::pair<std::int64_t, std::int64_t>> pyramid_shapes(std::int64_t height, std::int64_t width,
                                                                  std::int64_t levels);

template <typename T>
struct ImagePyramid {
  std::vector<Tensor<T>> levels;  // level l is [H_l, W_l, C]
  std::int64_t height = 0;
  std::int64_t width = 0;

  [[nodiscard]] std::int64_t channels() const { return levels.empty() ? 0 : levels.front().dim(2); }
  /// All level features as one [Σ H_l·W_l, C] token set.
  [[nodiscard]] Tensor<T> flatten() const;
};

/// Toy multi-scale encoder: an 8×8 stride-8 patch projection gives level 1,
/// each further level is a 2×2 stride-2 convolution of the previous one.
/// The whole map is linear in the image plus biases.
template <typename T>
class PyramidEncoder {
 public:
  PyramidEncoder(const PyramidConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng);

  /// image is [H, W, image_channels].
  [[nodiscard]] ImagePyramid<T> encode(const Tensor<T>& image) const;

  [[nodiscard]] const PyramidConfig& config() const { return config_; }
  [[nodiscard]] const Tensor<T>& patch_weight() const { return patch_w_; }
  [[nodiscard]] const Tensor<T>& patch_bias() const { return patch_b_; }
  [[nodiscard]] const std::vector<Tensor<T>>& reduce_weights() const { return reduce_w_; }
  [[nodiscard]] const std::vector<Tensor<T>>& reduce_biases() const { return reduce_b_; }

 private:
  PyramidConfig config_;
  Tensor<T> patch_w_, patch_b_;
  std::vector<Tensor<T>> reduce_w_, reduce_b_;
};

extern template class PyramidEncoder<float>;
extern template class PyramidEncoder<double>;

}  // namespace mmi
