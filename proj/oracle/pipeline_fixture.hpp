#pragma once

// Small end-to-end model and batches for pipeline tests.

#include <vector>

#include "mmi/pipeline.hpp"

namespace mmi::oracle {

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.llm.d_model = 16;
  c.llm.layers = 2;
  c.llm.heads = 2;
  c.llm.ffn_mult = 2;
  c.llm.text_vocab = 13;
  c.llm.mmfs_every = 2;
  c.llm.max_context = 96;
  c.llm.mmfs_points = 2;
  c.decoder.image_size = 8;
  c.decoder.image_channels = 3;
  c.decoder.base_channels = 8;
  c.decoder.depth = 2;
  c.decoder.cond_tokens = 3;
  c.decoder.cond_dim = 8;
  c.decoder.mmfs_points = 2;
  c.decoder.schedule_steps = 10;
  c.visual_tokens = 2;
  c.encoder_scale = 4;
  c.finalize();
  return c;
}

template <typename T>
Tensor<T> random_image(const ModelConfig& c, Philox& rng) {
  const auto s = c.decoder.image_size;
  return Tensor<T>::uniform({s, s, c.decoder.image_channels}, rng, -1, 1);
}

template <typename T>
TrainContext<T> make_context(const ModelConfig& c, const std::vector<Element>& elements, Philox& rng) {
  TrainContext<T> ctx{build(elements, c.visual_tokens, c.llm.vocab()), {}};
  for (std::size_t j = 0; j < ctx.seq.images.size(); ++j) ctx.images.push_back(random_image<T>(c, rng));
  return ctx;
}

}  // namespace mmi::oracle
