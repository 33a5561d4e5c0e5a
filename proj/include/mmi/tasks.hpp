#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmi/imgdec.hpp"
#include "mmi/pipeline.hpp"

namespace mmi::tasks {

/// Eight well-separated RGB colors in [0, 1].
const std::vector<std::vector<float>>& palette();

/// Solid palette color with ±jitter uniform noise, diffusion space.
template <typename T>
Tensor<T> class_image(std::int64_t size, std::int64_t channels, std::int64_t color, double jitter, Philox& rng);

/// Caption token ids of class c: three ids derived from c.
std::vector<std::int64_t> caption(std::int64_t c, std::int64_t text_vocab);

/// Interleaved "[image c1] caption(c1) [image c2] caption(c2)" samples with
/// random classes. Every scored next token is a function of the images seen
/// so far, so a model can drive the NTP loss to zero.
template <typename T>
std::vector<TrainContext<T>> lm_corpus(const ModelConfig& config, std::int64_t count, Philox& rng);

/// Three frames of one random two-color layout, each shifted one cell right
/// of the previous, with a fixed caption before every frame.
template <typename T>
std::vector<TrainContext<T>> story_corpus(const ModelConfig& config, std::int64_t count, Philox& rng);

/// Corpus for a named sequence task ("lm" or "story"), drawn from
/// Philox(seed).split(0xc0). ConfigError for any other name.
template <typename T>
std::vector<TrainContext<T>> corpus_for(const std::string& task, const ModelConfig& config, std::int64_t count,
                                        std::uint64_t seed);

/// size×size two-color grid of cells×cells blocks (colors drawn from the
/// palette, distinct), diffusion space. `shift` rolls the grid right by whole
/// cells.
template <typename T>
Tensor<T> layout_image(std::int64_t size, std::int64_t channels, std::int64_t cells, Philox& rng,
                       std::int64_t shift = 0);

/// Sum of two isotropic Gaussian blobs (σ = size/8, random centers),
/// clipped to [0, 1] and mapped to diffusion space.
template <typename T>
Tensor<T> blob_image(std::int64_t size, std::int64_t channels, Philox& rng);

/// Draws `batch` samples without replacement (with replacement once the
/// corpus is smaller) and packs them first-fit into contexts of max_len.
template <typename T>
std::vector<TrainContext<T>> packed_batch(const std::vector<TrainContext<T>>& corpus, std::int64_t batch,
                                          std::int64_t max_len, Philox& rng);

struct LogLine {
  std::int64_t step = 0;
  double ntp = 0, nip = 0, total = 0, wall_ms = 0;
};

using LogFn = std::function<void(const LogLine&)>;

/// Runs `steps` trainer steps on batches from `corpus`; batch k is drawn
/// from a stream keyed by (seed, k) so resumed runs see the same data.
template <typename T>
std::vector<LogLine> train_corpus(Trainer<T>& trainer, const std::vector<TrainContext<T>>& corpus,
                                  std::int64_t steps, std::int64_t batch, std::int64_t max_len, std::uint64_t seed,
                                  const LogFn& log = {});

/// Decoder-only diffusion on blob images (NIP loss only, null condition).
struct BlobConfig {
  std::int64_t image_size = 8;
  std::int64_t channels = 1;
  std::int64_t base_channels = 16;
  std::int64_t steps = 400;
  std::int64_t batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

struct BlobResult {
  std::vector<double> losses;         // per step
  std::vector<double> window_means;   // mean loss per 100-step window
  double data_mean = 0, data_std = 0;       // pixel statistics of fresh training draws
  double sample_mean = 0, sample_std = 0;   // pixel statistics of generated samples
  std::vector<std::pair<std::string, Tensor<float>>> params;
};

BlobResult run_blob(const BlobConfig& config, std::int64_t samples = 32, const LogFn& log = {});

/// Layout-copy ablation: reconstruct a two-color layout from its own
/// pyramid. The condition is a resampler over the pyramid cells without
/// positional information, so spatial arrangement reaches the decoder only
/// through MMFS.
struct CopyConfig {
  std::int64_t image_size = 16;
  std::int64_t cells = 4;
  std::int64_t feature_dim = 32;
  std::int64_t base_channels = 16;
  std::int64_t cond_tokens = 16;
  std::int64_t points = 4;
  std::int64_t steps = 1000;
  std::int64_t batch = 8;
  double lr = 2e-3;
  bool mmfs = true;
  std::int64_t eval_images = 16;
  std::int64_t sample_steps = 25;
  std::uint64_t seed = 0;
};

struct CopyResult {
  std::vector<double> losses;
  double mse = 0;  // generated vs target, mean over pixels of the eval set
  std::vector<std::pair<std::string, Tensor<float>>> params;
};

CopyResult run_copy(const CopyConfig& config, const LogFn& log = {});

}  // namespace mmi::tasks
