#pragma once

// Random interleaved inputs for the language model: layouts, visual tokens
// and pyramids, in either precision.

#include <vector>

#include "mmi/llm.hpp"

namespace mmi::oracle {

inline std::vector<Element> random_elements(Philox& rng, std::int64_t text_vocab, std::int64_t max_parts,
                                            std::int64_t& next_image) {
  std::vector<Element> elements;
  const auto parts = rng.uniform_int(1, max_parts + 1);
  for (std::int64_t i = 0; i < parts; ++i) {
    if (rng.bernoulli(0.45)) {
      elements.push_back(Element::img(next_image++));
    } else {
      std::vector<std::int64_t> ids(static_cast<std::size_t>(rng.uniform_int(1, 4)));
      for (auto& id : ids) id = rng.uniform_int(0, text_vocab);
      if (!elements.empty() && elements.back().kind == Element::Kind::Text) {
        elements.back().tokens.insert(elements.back().tokens.end(), ids.begin(), ids.end());
      } else {
        elements.push_back(Element::text(ids));
      }
    }
  }
  return elements;
}

template <typename T>
struct LLMInputs {
  PackedSequence seq;
  std::vector<Tensor<T>> visual;
  std::vector<ImagePyramid<T>> pyramids;

  [[nodiscard]] std::vector<const ImagePyramid<T>*> pointers() const {
    std::vector<const ImagePyramid<T>*> out;
    for (const auto& p : pyramids) out.push_back(&p);
    return out;
  }
};

// Random image data for every image of `seq`: N visual tokens of width C and
// a pyramid whose level l is (base >> l) square.
template <typename T>
LLMInputs<T> random_inputs(PackedSequence seq, const LLMConfig& cfg, std::int64_t base, Philox& rng) {
  LLMInputs<T> in;
  for (std::size_t j = 0; j < seq.images.size(); ++j) {
    in.visual.push_back(Tensor<T>::randn({seq.tokens_per_image, cfg.d_model}, rng));
    ImagePyramid<T> p;
    for (std::int64_t l = 0; l < cfg.mmfs_levels; ++l) {
      const auto s = std::max<std::int64_t>(base >> l, 1);
      p.levels.push_back(Tensor<T>::randn({s, s, cfg.d_model}, rng));
    }
    p.height = p.width = base * 8;
    in.pyramids.push_back(std::move(p));
  }
  in.seq = std::move(seq);
  return in;
}

// Redraws every parameter (gates and zero-initialized projections included)
// so that MMFS layers contribute.
template <typename T>
void randomize_params(ParamStore<T>& store, Philox& rng, double sigma = 0.2) {
  for (auto& [name, t] : store.items()) {
    auto h = t;
    const bool offsets = name.ends_with("mmfs.wp") || name.ends_with("mmfs.bp");
    const double s = offsets ? 0.02 : sigma;
    for (auto& v : h.data_mut()) v = static_cast<T>(v + s * rng.normal());
    if (name.ends_with("alpha")) h.data_mut()[0] = static_cast<T>(0.5 + 0.5 * rng.uniform());
  }
}

}  // namespace mmi::oracle
