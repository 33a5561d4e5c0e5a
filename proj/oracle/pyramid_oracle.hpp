#pragma once

#include <cstdint>
#include <vector>

namespace mmi::oracle {

// Level-1 patch projection written as a direct sum over each 8×8 patch.
// image [H, W, ch], w [C, 8, 8, ch], b [C] → [H/8, W/8, C].
inline std::vector<double> patch_projection(const std::vector<double>& image, std::int64_t h, std::int64_t w,
                                            std::int64_t ch, const std::vector<double>& weight,
                                            const std::vector<double>& bias, std::int64_t c) {
  const std::int64_t ho = h / 8, wo = w / 8;
  std::vector<double> out(static_cast<std::size_t>(ho * wo * c));
  for (std::int64_t py = 0; py < ho; ++py) {
    for (std::int64_t px = 0; px < wo; ++px) {
      for (std::int64_t o = 0; o < c; ++o) {
        double acc = bias[o];
        for (std::int64_t dy = 0; dy < 8; ++dy) {
          for (std::int64_t dx = 0; dx < 8; ++dx) {
            for (std::int64_t k = 0; k < ch; ++k) {
              acc += weight[((o * 8 + dy) * 8 + dx) * ch + k] * image[((py * 8 + dy) * w + px * 8 + dx) * ch + k];
            }
          }
        }
        out[(py * wo + px) * c + o] = acc;
      }
    }
  }
  return out;
}

// 2×2 stride-2 reduction of x [h, w, c] with w [c, 2, 2, c].
inline std::vector<double> reduce2(const std::vector<double>& x, std::int64_t h, std::int64_t w, std::int64_t c,
                                   const std::vector<double>& weight, const std::vector<double>& bias) {
  std::vector<double> out(static_cast<std::size_t>((h / 2) * (w / 2) * c));
  for (std::int64_t y = 0; y < h / 2; ++y) {
    for (std::int64_t xx = 0; xx < w / 2; ++xx) {
      for (std::int64_t o = 0; o < c; ++o) {
        double acc = bias[o];
        for (std::int64_t dy = 0; dy < 2; ++dy) {
          for (std::int64_t dx = 0; dx < 2; ++dx) {
            for (std::int64_t k = 0; k < c; ++k) {
              acc += weight[((o * 2 + dy) * 2 + dx) * c + k] * x[((2 * y + dy) * w + 2 * xx + dx) * c + k];
            }
          }
        }
        out[(y * (w / 2) + xx) * c + o] = acc;
      }
    }
  }
  return out;
}

}  // namespace mmi::oracle
