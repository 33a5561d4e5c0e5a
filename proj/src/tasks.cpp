#include "mmi/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mmi/ops.hpp"
#include "mmi/resampler.hpp"

namespace mmi::tasks {

const std::vector<std::vector<float>>& palette() {
  static const std::vector<std::vector<float>> colors = {
      {0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.1f, 0.2f, 0.9f}, {0.95f, 0.9f, 0.1f},
      {0.9f, 0.1f, 0.9f}, {0.1f, 0.9f, 0.9f}, {0.05f, 0.05f, 0.05f}, {0.95f, 0.95f, 0.95f},
  };
  return colors;
}

namespace {

float channel_value(std::int64_t color, std::int64_t ch) {
  const auto& c = palette()[static_cast<std::size_t>(color % 8)];
  return c[static_cast<std::size_t>(ch % 3)];
}

}  // namespace

template <typename T>
Tensor<T> class_image(std::int64_t size, std::int64_t channels, std::int64_t color, double jitter, Philox& rng) {
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(size * size * channels));
  for (std::int64_t i = 0; i < size * size; ++i) {
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double p = std::clamp(channel_value(color, ch) + rng.uniform(-jitter, jitter), 0.0, 1.0);
      v.push_back(static_cast<T>(2.0 * p - 1.0));
    }
  }
  return Tensor<T>::from({size, size, channels}, std::move(v));
}

std::vector<std::int64_t> caption(std::int64_t c, std::int64_t text_vocab) {
  return {(3 * c + 1) % text_vocab, (5 * c + 2) % text_vocab, (7 * c + 3) % text_vocab};
}

template <typename T>
std::vector<TrainContext<T>> lm_corpus(const ModelConfig& config, std::int64_t count, Philox& rng) {
  const auto vocab = config.llm.text_vocab, size = config.decoder.image_size, ch = config.decoder.image_channels;
  std::vector<TrainContext<T>> out;
  for (std::int64_t i = 0; i < count; ++i) {
    const auto c1 = rng.uniform_int(0, 8), c2 = rng.uniform_int(0, 8);
    TrainContext<T> ctx;
    ctx.seq = build({Element::img(0), Element::text(caption(c1, vocab)), Element::img(1),
                     Element::text(caption(c2, vocab))},
                    config.visual_tokens, config.llm.vocab());
    ctx.images = {class_image<T>(size, ch, c1, 0.05, rng), class_image<T>(size, ch, c2, 0.05, rng)};
    out.push_back(std::move(ctx));
  }
  return out;
}

template <typename T>
Tensor<T> layout_image(std::int64_t size, std::int64_t channels, std::int64_t cells, Philox& rng, std::int64_t shift) {
  const auto a = rng.uniform_int(0, 8);
  auto b = rng.uniform_int(0, 7);
  if (b >= a) ++b;
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(cells * cells));
  for (auto& g : grid) g = rng.bernoulli(0.5) ? 1 : 0;
  const auto cell = size / cells;
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(size * size * channels));
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const auto gx = ((x / cell - shift) % cells + cells) % cells;
      const auto color = grid[static_cast<std::size_t>((y / cell) * cells + gx)] ? a : b;
      for (std::int64_t ch = 0; ch < channels; ++ch) v.push_back(static_cast<T>(2.0 * channel_value(color, ch) - 1.0));
    }
  }
  return Tensor<T>::from({size, size, channels}, std::move(v));
}

template <typename T>
std::vector<TrainContext<T>> story_corpus(const ModelConfig& config, std::int64_t count, Philox& rng) {
  const auto size = config.decoder.image_size, ch = config.decoder.image_channels;
  const auto vocab = config.llm.text_vocab;
  std::vector<TrainContext<T>> out;
  for (std::int64_t i = 0; i < count; ++i) {
    TrainContext<T> ctx;
    const std::vector<std::int64_t> words{1 % vocab, 2 % vocab};
    ctx.seq = build({Element::text(words), Element::img(0), Element::text(words), Element::img(1),
                     Element::text(words), Element::img(2)},
                    config.visual_tokens, config.llm.vocab());
    const auto key = rng.next_u64();
    for (std::int64_t f = 0; f < 3; ++f) {
      Philox frame(key);  // identical layout, shifted
      ctx.images.push_back(layout_image<T>(size, ch, 4, frame, f));
    }
    out.push_back(std::move(ctx));
  }
  return out;
}

template <typename T>
std::vector<TrainContext<T>> corpus_for(const std::string& task, const ModelConfig& config, std::int64_t count,
                                        std::uint64_t seed) {
  auto rng = Philox(seed).split(0xc0);
  if (task == "lm") return lm_corpus<T>(config, count, rng);
  if (task == "story") return story_corpus<T>(config, count, rng);
  throw ConfigError("no sequence corpus for task '" + task + "'");
}

template <typename T>
Tensor<T> blob_image(std::int64_t size, std::int64_t channels, Philox& rng) {
  const double s = static_cast<double>(size);
  const double sigma = s / 8.0;
  double cx[2], cy[2];
  for (int k = 0; k < 2; ++k) {
    cx[k] = rng.uniform(0.2 * s, 0.8 * s);
    cy[k] = rng.uniform(0.2 * s, 0.8 * s);
  }
  std::vector<T> v;
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      double p = 0;
      for (int k = 0; k < 2; ++k) {
        const double dx = static_cast<double>(x) + 0.5 - cx[k], dy = static_cast<double>(y) + 0.5 - cy[k];
        p += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
      p = std::min(p, 1.0);
      for (std::int64_t ch = 0; ch < channels; ++ch) v.push_back(static_cast<T>(2.0 * p - 1.0));
    }
  }
  return Tensor<T>::from({size, size, channels}, std::move(v));
}

template <typename T>
std::vector<TrainContext<T>> packed_batch(const std::vector<TrainContext<T>>& corpus, std::int64_t batch,
                                          std::int64_t max_len, Philox& rng) {
  if (corpus.empty()) throw EmptyInputError("packed_batch: empty corpus");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> chosen;
  while (static_cast<std::int64_t>(chosen.size()) < batch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto i : order) {
      if (static_cast<std::int64_t>(chosen.size()) == batch) break;
      chosen.push_back(i);
    }
  }
  // Give every image a batch-wide id so packing can gather them.
  std::vector<PackedSequence> samples;
  std::vector<const Tensor<T>*> images;
  for (auto i : chosen) {
    auto seq = corpus[i].seq;
    for (auto& id : seq.images) {
      const auto local = static_cast<std::size_t>(&id - seq.images.data());
      id = static_cast<std::int64_t>(images.size());
      images.push_back(&corpus[i].images[local]);
    }
    samples.push_back(std::move(seq));
  }
  std::vector<TrainContext<T>> out;
  for (auto& seq : pack(samples, max_len)) {
    TrainContext<T> ctx;
    for (auto id : seq.images) ctx.images.push_back(*images[static_cast<std::size_t>(id)]);
    ctx.seq = std::move(seq);
    out.push_back(std::move(ctx));
  }
  return out;
}

template <typename T>
std::vector<LogLine> train_corpus(Trainer<T>& trainer, const std::vector<TrainContext<T>>& corpus, std::int64_t steps,
                                  std::int64_t batch, std::int64_t max_len, std::uint64_t seed, const LogFn& log) {
  std::vector<LogLine> lines;
  const Philox data(seed ^ 0xda7aULL);
  for (std::int64_t i = 0; i < steps; ++i) {
    const auto k = trainer.optimizer().steps();
    auto rng = data.split(static_cast<std::uint64_t>(k));
    const auto start = std::chrono::steady_clock::now();
    const auto stats = trainer.step(packed_batch(corpus, batch, max_len, rng));
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    LogLine line{k + 1, stats.ntp, stats.nip, stats.total, ms};
    lines.push_back(line);
    if (log) log(line);
  }
  return lines;
}

namespace {

std::pair<double, double> moments(const std::vector<double>& v) {
  double m = 0, m2 = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) m2 += (x - m) * (x - m);
  return {m, std::sqrt(m2 / static_cast<double>(v.size()))};
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& images) {
  std::vector<Tensor<T>> parts;
  for (const auto& im : images) {
    Shape s{1};
    s.insert(s.end(), im.shape().begin(), im.shape().end());
    parts.push_back(reshape(im, s));
  }
  return concat(parts, 0);
}

}  // namespace

BlobResult run_blob(const BlobConfig& config, std::int64_t samples, const LogFn& log) {
  DenoiserConfig dc;
  dc.image_size = config.image_size;
  dc.image_channels = config.channels;
  dc.base_channels = config.base_channels;
  dc.depth = 2;
  dc.cond_tokens = 1;
  dc.cond_dim = 8;
  dc.use_mmfs = false;
  ParamStore<float> store;
  const Philox root(config.seed);
  auto init = root.split(1);
  Denoiser<float> net(dc, store, "dec.", init);
  OptimizerConfig oc;
  oc.lr = oc.decoder_lr = config.lr;
  Optimizer<float> opt(oc, store);
  BlobResult result;
  for (std::int64_t step = 0; step < config.steps; ++step) {
    auto rng = root.split(1000 + static_cast<std::uint64_t>(step));
    std::vector<Tensor<float>> batch;
    for (std::int64_t b = 0; b < config.batch; ++b) batch.push_back(blob_image<float>(dc.image_size, dc.image_channels, rng));
    const auto start = std::chrono::steady_clock::now();
    const auto loss = net.nip_loss(stack(batch), net.null_conds(config.batch), {}, rng);
    loss.backward();
    opt.step();
    const double value = loss.item();
    result.losses.push_back(value);
    if (log) {
      const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      log({step + 1, 0.0, value, value, ms});
    }
  }
  for (std::size_t w = 0; w + 100 <= result.losses.size(); w += 100) {
    result.window_means.push_back(
        std::accumulate(result.losses.begin() + static_cast<std::ptrdiff_t>(w),
                        result.losses.begin() + static_cast<std::ptrdiff_t>(w + 100), 0.0) / 100.0);
  }
  if (samples > 0) {
    auto rng = root.split(2);
    std::vector<double> data, gen;
    for (std::int64_t i = 0; i < samples; ++i) {
      const auto image = blob_image<float>(dc.image_size, dc.image_channels, rng);
      for (float v : image.data()) data.push_back(v);
    }
    SampleOptions<float> so;
    so.guidance = 0.0;
    const auto x = net.sample(net.null_conds(samples), {}, so, rng);
    for (float v : x.data()) gen.push_back(v);
    std::tie(result.data_mean, result.data_std) = moments(data);
    std::tie(result.sample_mean, result.sample_std) = moments(gen);
  }
  result.params = export_params(store);
  return result;
}

CopyResult run_copy(const CopyConfig& config, const LogFn& log) {
  const Philox root(config.seed);
  ParamStore<float> store;
  const std::int64_t channels = 3, levels = 3;
  const auto scale = 64 / config.image_size;
  auto r_enc = root.split(1), r_cond = root.split(2), r_dec = root.split(3);
  PyramidEncoder<float> encoder({levels, config.feature_dim, channels}, store, "enc.", r_enc);
  Resampler<float> cond({config.feature_dim, config.feature_dim, config.cond_tokens, 1, 1, 2}, store, "cond.", r_cond);
  DenoiserConfig dc;
  dc.image_size = config.image_size;
  dc.image_channels = channels;
  dc.base_channels = config.base_channels;
  dc.depth = 2;
  dc.cond_tokens = config.cond_tokens;
  dc.cond_dim = config.feature_dim;
  dc.use_mmfs = config.mmfs;
  dc.mmfs_feature_dim = config.feature_dim;
  dc.mmfs_levels = levels;
  dc.mmfs_points = config.points;
  dc.mmfs_max_images = 1;
  Denoiser<float> net(dc, store, "dec.", r_dec);
  OptimizerConfig oc;
  oc.lr = oc.decoder_lr = config.lr;
  Optimizer<float> opt(oc, store);

  auto encode = [&](const Tensor<float>& image) {
    auto x = reshape(image, {1, config.image_size, config.image_size, channels});
    for (auto f = scale; f > 1; f /= 2) x = upsample2x(x);
    return encoder.encode(reshape(x, {64, 64, channels}));
  };

  CopyResult result;
  for (std::int64_t step = 0; step < config.steps; ++step) {
    auto rng = root.split(1000 + static_cast<std::uint64_t>(step));
    std::vector<Tensor<float>> images, conds;
    std::vector<ImagePyramid<float>> pyramids;
    pyramids.reserve(static_cast<std::size_t>(config.batch));
    std::vector<PyramidSet<float>> sets;
    for (std::int64_t b = 0; b < config.batch; ++b) {
      images.push_back(layout_image<float>(config.image_size, channels, config.cells, rng));
      pyramids.push_back(encode(images.back()));
      conds.push_back(cond(pyramids.back().flatten()));
      sets.push_back({&pyramids.back()});
    }
    const auto start = std::chrono::steady_clock::now();
    const auto loss = net.nip_loss(stack(images), conds, sets, rng);
    loss.backward();
    opt.step();
    result.losses.push_back(loss.item());
    if (log) {
      const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      log({step + 1, 0.0, loss.item(), loss.item(), ms});
    }
  }

  NoGradGuard no_grad;
  auto eval = root.split(7);  // same targets for both arms of a seed
  std::vector<Tensor<float>> targets, conds;
  std::vector<ImagePyramid<float>> pyramids;
  pyramids.reserve(static_cast<std::size_t>(config.eval_images));
  std::vector<PyramidSet<float>> sets;
  for (std::int64_t i = 0; i < config.eval_images; ++i) {
    targets.push_back(layout_image<float>(config.image_size, channels, config.cells, eval));
    pyramids.push_back(encode(targets.back()));
    conds.push_back(cond(pyramids.back().flatten()));
    sets.push_back({&pyramids.back()});
  }
  SampleOptions<float> so;
  so.guidance = 1.0;
  so.steps = config.sample_steps;
  const auto out = net.sample(conds, sets, so, eval);
  const auto want = stack(targets);
  double se = 0;
  for (std::size_t i = 0; i < want.data().size(); ++i) {
    const double g = std::clamp(static_cast<double>(out.data()[i]), -1.0, 1.0);
    se += (g - want.data()[i]) * (g - want.data()[i]);
  }
  result.mse = se / static_cast<double>(want.data().size());
  result.params = export_params(store);
  return result;
}

template Tensor<float> class_image(std::int64_t, std::int64_t, std::int64_t, double, Philox&);
template Tensor<double> class_image(std::int64_t, std::int64_t, std::int64_t, double, Philox&);
template std::vector<TrainContext<float>> lm_corpus(const ModelConfig&, std::int64_t, Philox&);
template std::vector<TrainContext<double>> lm_corpus(const ModelConfig&, std::int64_t, Philox&);
template std::vector<TrainContext<float>> story_corpus(const ModelConfig&, std::int64_t, Philox&);
template std::vector<TrainContext<double>> story_corpus(const ModelConfig&, std::int64_t, Philox&);
template std::vector<TrainContext<float>> corpus_for(const std::string&, const ModelConfig&, std::int64_t,
                                                     std::uint64_t);
template std::vector<TrainContext<double>> corpus_for(const std::string&, const ModelConfig&, std::int64_t,
                                                      std::uint64_t);
template Tensor<float> layout_image(std::int64_t, std::int64_t, std::int64_t, Philox&, std::int64_t);
template Tensor<double> layout_image(std::int64_t, std::int64_t, std::int64_t, Philox&, std::int64_t);
template Tensor<float> blob_image(std::int64_t, std::int64_t, Philox&);
template Tensor<double> blob_image(std::int64_t, std::int64_t, Philox&);
template std::vector<TrainContext<float>> packed_batch(const std::vector<TrainContext<float>>&, std::int64_t,
                                                       std::int64_t, Philox&);
template std::vector<TrainContext<double>> packed_batch(const std::vector<TrainContext<double>>&, std::int64_t,
                                                        std::int64_t, Philox&);
template std::vector<LogLine> train_corpus(Trainer<float>&, const std::vector<TrainContext<float>>&, std::int64_t,
                                           std::int64_t, std::int64_t, std::uint64_t, const LogFn&);
template std::vector<LogLine> train_corpus(Trainer<double>&, const std::vector<TrainContext<double>>&, std::int64_t,
                                           std::int64_t, std::int64_t, std::uint64_t, const LogFn&);

}  // namespace mmi::tasks
