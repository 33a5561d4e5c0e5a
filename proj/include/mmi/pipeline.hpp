#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmi/imgdec.hpp"
#include "mmi/llm.hpp"
#include "mmi/params.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/resampler.hpp"
#include "mmi/sequence.hpp"

namespace mmi {

/// Every sub-model of the interleaved generator. finalize() ties the shared
/// widths: pyramid channels = d_model (the LLM gate adds sampled features to
/// hidden states), decoder MMFS levels = LLM MMFS levels.
struct ModelConfig {
  LLMConfig llm;
  DenoiserConfig decoder;
  std::int64_t visual_tokens = 8;    // N per image
  std::int64_t resampler_depth = 1;  // both resamplers
  std::int64_t encoder_scale = 4;    // nearest upscale before the pyramid encoder

  void finalize();
  void validate() const;
  [[nodiscard]] std::int64_t encoder_input() const { return decoder.image_size * encoder_scale; }
};

/// Owns the parameters and all sub-models. Parameter prefixes: "enc.",
/// "vis." (visual-token resampler), "llm.", "cond." (condition resampler),
/// "dec.".
template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// image [S, S, ch] in diffusion space → pyramid of the upscaled image.
  [[nodiscard]] ImagePyramid<T> pyramid(const Tensor<T>& image) const;
  /// N visual tokens [N, d_model] resampled from all pyramid cells.
  [[nodiscard]] Tensor<T> visual_tokens(const ImagePyramid<T>& pyramid) const;
  /// Condition tokens from LLM hidden rows [begin, end).
  [[nodiscard]] Tensor<T> condition(const Tensor<T>& hidden, std::int64_t begin, std::int64_t end) const;

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] ParamStore<T>& params() { return store_; }
  [[nodiscard]] const ParamStore<T>& params() const { return store_; }
  [[nodiscard]] const PyramidEncoder<T>& encoder() const { return *encoder_; }
  [[nodiscard]] const Resampler<T>& visual() const { return *visual_; }
  [[nodiscard]] const CausalLM<T>& llm() const { return *llm_; }
  [[nodiscard]] const Resampler<T>& cond() const { return *cond_; }
  [[nodiscard]] const Denoiser<T>& decoder() const { return *decoder_; }

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  std::unique_ptr<PyramidEncoder<T>> encoder_;
  std::unique_ptr<Resampler<T>> visual_;
  std::unique_ptr<CausalLM<T>> llm_;
  std::unique_ptr<Resampler<T>> cond_;
  std::unique_ptr<Denoiser<T>> decoder_;
};

extern template class Model<float>;
extern template class Model<double>;

/// One packed context with its images ([S, S, ch], diffusion space) by local
/// index.
template <typename T>
struct TrainContext {
  PackedSequence seq;
  std::vector<Tensor<T>> images;
};

struct OptimizerConfig {
  enum class Kind { Adam, Sgd };
  Kind kind = Kind::Adam;
  double lr = 1e-3;
  double decoder_lr = 1e-3;  // parameters under "dec."
  double beta1 = 0.9;
  double beta2 = 0.995;
  double eps = 1e-6;
  double grad_clip = 1.0;  // global norm; 0 disables
};

struct TrainConfig {
  double lambda = 10.0;
  double dropout = 0.1;  // condition dropout per image
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  void validate() const;
};

template <typename T>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, ParamStore<T>& store, std::string decoder_prefix = "dec.");
  /// Applies one update from the accumulated gradients, then zeroes them.
  void step();
  [[nodiscard]] std::int64_t steps() const { return steps_; }
  /// Moments as named tensors ("opt.m.<param>", "opt.v.<param>") plus
  /// "opt.step".
  [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state);

 private:
  OptimizerConfig config_;
  ParamStore<T>& store_;
  std::string decoder_prefix_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t steps_ = 0;
};

extern template class Optimizer<float>;
extern template class Optimizer<double>;

template <typename T>
struct Losses {
  Tensor<T> ntp, nip, total;
  std::int64_t ntp_positions = 0;
  std::int64_t nip_images = 0;
};

/// total = ntp + λ·nip from one forward pass over the batch. NTP averages
/// over every scored position; NIP averages over images that are not the
/// first element of their segment, each conditioned on the resampled hidden
/// rows from its segment start through its BoI (or the null condition with
/// probability `dropout`) and on the pyramids of the earlier images of its
/// segment. Throws EmptyInputError if neither loss has anything to score.
template <typename T>
Losses<T> compute_losses(const Model<T>& model, const std::vector<TrainContext<T>>& batch, double lambda,
                         double dropout, Philox& rng);

struct StepStats {
  double ntp = 0, nip = 0, total = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const TrainConfig& config);
  /// compute_losses, backward, one optimizer update.
  StepStats step(const std::vector<TrainContext<T>>& batch);
  [[nodiscard]] Optimizer<T>& optimizer() { return optimizer_; }
  [[nodiscard]] Philox& rng() { return rng_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }

 private:
  Model<T>& model_;
  TrainConfig config_;
  Optimizer<T> optimizer_;
  Philox rng_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

struct GenerateConfig {
  std::int64_t max_new = 64;  // sampled tokens (an image counts once)
  double temperature = 0.0;   // 0 = greedy
  double guidance = 3.5;
  std::int64_t diffusion_steps = 0;  // 0 = full schedule
  std::uint64_t seed = 0;
  /// May rewrite the next-token logits; called with the generation step.
  std::function<void(std::int64_t, std::vector<double>&)> logits_hook;
  /// Per diffusion update: generated image index, step, mean and std of x.
  std::function<void(std::int64_t, std::int64_t, double, double)> sample_trace;
};

template <typename T>
struct GenerationResult {
  /// Generated elements only. Image ids continue after the prompt's images:
  /// id = prompt_images.size() + k refers to images[k].
  std::vector<Element> elements;
  std::vector<Tensor<T>> images;  // [S, S, ch], diffusion space
};

/// Autoregressive interleaved generation with a KV cache. Predicting BoI
/// conditions the decoder on all hidden rows through the BoI, samples an
/// image that sees every earlier image, and feeds its visual tokens back.
/// Prompt image ids index `prompt_images`. Throws LengthError when the
/// context would overflow.
template <typename T>
GenerationResult<T> generate(const Model<T>& model, const std::vector<Element>& prompt,
                             const std::vector<Tensor<T>>& prompt_images, const GenerateConfig& config);

/// Checkpoint file: 8-byte magic "MMIV1\0\0\0", u32 LE manifest length, JSON
/// manifest {"format", "config", "tensors": [{name, shape, dtype, offset,
/// nbytes}]}, then little-endian f32 payloads at the listed offsets.
struct Checkpoint {
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
/// Throws IoError if unreadable and FormatError on a bad magic, truncation or
/// inconsistent manifest.
Checkpoint read_checkpoint(const std::string& path);

/// Copies every checkpoint tensor into `store`. Names absent from the store
/// raise LookupError listing them, as do store entries missing from the
/// checkpoint; names starting with "opt." are skipped.
template <typename T>
void load_params(const Checkpoint& checkpoint, ParamStore<T>& store);

template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> export_params(const ParamStore<T>& store);

}  // namespace mmi
