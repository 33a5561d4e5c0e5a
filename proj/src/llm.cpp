#include "mmi/llm.hpp"

#include <cmath>

#include "mmi/ops.hpp"

namespace mmi {

void LLMConfig::validate() const {
  if (layers < 1) throw ConfigError("llm: layers must be at least 1");
  if (mmfs_every < 1) throw ConfigError("llm: mmfs_every must be at least 1");
  if (heads < 1 || d_model % heads != 0) throw ConfigError("llm: d_model must be divisible by heads");
  if (text_vocab < 1) throw ConfigError("llm: text_vocab must be positive");
  if (max_context < 2) throw ConfigError("llm: max_context must be at least 2");
}

namespace {


template <typename T>
Tensor<T> center_refs(std::int64_t rows) {
  return Tensor<T>::full({rows, 2}, T(0.5));
}

}  // namespace

template <typename T>
CausalLM<T>::CausalLM(const LLMConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng)
    : config_(config) {
  config_.validate();
  const auto c = config_.d_model, v = config_.vocab().size(), hidden = config_.ffn_mult * c;
  // Every sub-module draws from its own split so that toggling MMFS leaves
  // all other initial weights unchanged.
  auto embed_rng = rng.split(1);
  tokens_ = store.add(prefix + "tok", Tensor<T>::randn({v, c}, embed_rng, 0.02));
  positions_ = store.add(prefix + "pos", Tensor<T>::randn({config_.max_context, c}, embed_rng, 0.02));
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.layers));
  for (std::int64_t i = 0; i < config_.layers; ++i) {
    auto r = rng.split(100 + static_cast<std::uint64_t>(i));
    const auto p = prefix + "layer" + std::to_string(i) + ".";
    Block b;
    b.ln1_g = store.add(p + "ln1.g", Tensor<T>::full({c}, T(1)));
    b.ln1_b = store.add(p + "ln1.b", Tensor<T>::zeros({c}));
    b.wq = store.add(p + "wq", init_linear<T>(r, c, c));
    b.bq = store.add(p + "bq", Tensor<T>::zeros({c}));
    b.wk = store.add(p + "wk", init_linear<T>(r, c, c));
    b.bk = store.add(p + "bk", Tensor<T>::zeros({c}));
    b.wv = store.add(p + "wv", init_linear<T>(r, c, c));
    b.bv = store.add(p + "bv", Tensor<T>::zeros({c}));
    b.wo = store.add(p + "wo", init_linear<T>(r, c, c, out_gain));
    b.bo = store.add(p + "bo", Tensor<T>::zeros({c}));
    if (config_.is_mmfs_layer(i)) {
      auto mr = rng.split(500 + static_cast<std::uint64_t>(i));
      MMFSConfig mc{c, c, config_.mmfs_levels, config_.mmfs_points, config_.mmfs_max_images, config_.mmfs_heads,
                    config_.alpha_init, GateKind::Llm};
      b.mmfs = std::make_unique<MMFS<T>>(mc, store, p + "mmfs.", mr);
    }
    b.ln2_g = store.add(p + "ln2.g", Tensor<T>::full({c}, T(1)));
    b.ln2_b = store.add(p + "ln2.b", Tensor<T>::zeros({c}));
    b.w1 = store.add(p + "w1", init_linear<T>(r, hidden, c));
    b.b1 = store.add(p + "b1", Tensor<T>::zeros({hidden}));
    b.w2 = store.add(p + "w2", init_linear<T>(r, c, hidden, out_gain));
    b.b2 = store.add(p + "b2", Tensor<T>::zeros({c}));
    blocks_.push_back(std::move(b));
  }
  auto head_rng = rng.split(2);
  lnf_g_ = store.add(prefix + "lnf.g", Tensor<T>::full({c}, T(1)));
  lnf_b_ = store.add(prefix + "lnf.b", Tensor<T>::zeros({c}));
  head_ = store.add(prefix + "head", init_linear<T>(head_rng, v, c));
}

template <typename T>
Tensor<T> CausalLM<T>::embed(std::span<const Slot> slots, const std::vector<Tensor<T>>& visual_tokens) const {
  const Vocab vocab = config_.vocab();
  std::vector<Tensor<T>> parts;
  std::vector<std::int64_t> run;
  auto flush = [&] {
    if (!run.empty()) parts.push_back(embedding(tokens_, run));
    run.clear();
  };
  std::size_t i = 0;
  while (i < slots.size()) {
    const auto& s = slots[i];
    if (s.kind != SlotKind::Image) {
      switch (s.kind) {
        case SlotKind::BoS: run.push_back(vocab.bos()); break;
        case SlotKind::EoS: run.push_back(vocab.eos()); break;
        case SlotKind::BoI: run.push_back(vocab.boi()); break;
        default: run.push_back(s.value); break;
      }
      ++i;
      continue;
    }
    flush();
    const auto j = s.value;
    if (j < 0 || j >= static_cast<std::int64_t>(visual_tokens.size()) || !visual_tokens[j].defined()) {
      throw LookupError("llm: no visual tokens for image " + std::to_string(j));
    }
    const auto& tokens = visual_tokens[j];
    if (tokens.rank() != 2 || tokens.dim(1) != config_.d_model) {
      throw DimensionError("llm: visual tokens " + to_string(tokens.shape()) + " do not match d_model");
    }
    auto end = i;
    while (end < slots.size() && slots[end].kind == SlotKind::Image && slots[end].value == j &&
           slots[end].index == s.index + static_cast<std::int64_t>(end - i)) {
      ++end;
    }
    const auto first = s.index, last = s.index + static_cast<std::int64_t>(end - i);
    if (last > tokens.dim(0)) throw LookupError("llm: image " + std::to_string(j) + " has too few visual tokens");
    parts.push_back(first == 0 && last == tokens.dim(0) ? tokens : slice_rows(tokens, first, last));
    i = end;
  }
  flush();
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

template <typename T>
Tensor<T> CausalLM<T>::feed_forward(const Block& b, const Tensor<T>& x) const {
  const auto h = gelu(linear(layer_norm(x, b.ln2_g, b.ln2_b), b.w1, b.b1));
  return add(x, linear(h, b.w2, b.b2));
}

template <typename T>
LLMOutput<T> CausalLM<T>::forward(const PackedSequence& seq, const std::vector<Tensor<T>>& visual_tokens,
                                  std::span<const ImagePyramid<T>* const> pyramids) const {
  const auto n = seq.size();
  if (n == 0) throw EmptyInputError("llm: empty sequence");
  for (std::int64_t p = 0; p < n; ++p) {
    if (seq.position[p] >= config_.max_context) {
      throw LengthError("llm: position " + std::to_string(seq.position[p]) + " beyond max_context " +
                        std::to_string(config_.max_context));
    }
  }
  const auto visible = visibility(seq, config_.strict_visibility);
  for (std::size_t j = 0; j < seq.images.size(); ++j) {
    const bool has_pyramid = j < pyramids.size() && pyramids[j];
    if (config_.use_mmfs && !has_pyramid) throw LookupError("llm: no pyramid for image " + std::to_string(j));
  }
  std::vector<KeyRange> ranges(static_cast<std::size_t>(n));
  for (std::int64_t p = 0; p < n; ++p) ranges[p] = {seq.segment_start(p), p + 1};

  auto x = add(embed(seq.stream, visual_tokens), embedding(positions_, seq.position));
  const auto refs = center_refs<T>(n);
  for (const auto& b : blocks_) {
    const auto h = layer_norm(x, b.ln1_g, b.ln1_b);
    const auto att = attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv), config_.heads,
                               ranges);
    x = add(x, linear(att, b.wo, b.bo));
    if (b.mmfs) x = b.mmfs->apply_rows(x, refs, visible, pyramids);
    x = feed_forward(b, x);
  }
  LLMOutput<T> out;
  out.hidden = layer_norm(x, lnf_g_, lnf_b_);
  out.logits = linear(out.hidden, head_, Tensor<T>());
  return out;
}

template <typename T>
Tensor<T> CausalLM<T>::ntp_loss(const Tensor<T>& logits, const PackedSequence& seq) const {
  const auto t = ntp_targets(seq, config_.vocab());
  return cross_entropy(logits, t.targets, t.mask);
}

template <typename T>
KVCache<T> CausalLM<T>::new_cache() const {
  KVCache<T> cache;
  cache.keys.resize(blocks_.size());
  cache.values.resize(blocks_.size());
  return cache;
}

template <typename T>
LLMOutput<T> CausalLM<T>::step(KVCache<T>& cache, const Tensor<T>& inputs,
                               const std::vector<std::vector<std::int64_t>>& visible,
                               std::span<const ImagePyramid<T>* const> pyramids) const {
  NoGradGuard no_grad;
  const auto n = inputs.dim(0), c = config_.d_model;
  if (cache.length + n > config_.max_context) {
    throw LengthError("llm: context of " + std::to_string(cache.length + n) + " exceeds max_context " +
                      std::to_string(config_.max_context));
  }
  std::vector<std::int64_t> pos(static_cast<std::size_t>(n));
  std::vector<KeyRange> ranges(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    pos[i] = cache.length + i;
    ranges[i] = {0, cache.length + i + 1};
  }
  auto x = add(inputs, embedding(positions_, pos));
  const auto refs = center_refs<T>(n);
  const auto total = cache.length + n;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const auto h = layer_norm(x, b.ln1_g, b.ln1_b);
    const auto k = linear(h, b.wk, b.bk), v = linear(h, b.wv, b.bv);
    cache.keys[l].insert(cache.keys[l].end(), k.data().begin(), k.data().end());
    cache.values[l].insert(cache.values[l].end(), v.data().begin(), v.data().end());
    const auto keys = Tensor<T>::from({total, c}, cache.keys[l]);
    const auto values = Tensor<T>::from({total, c}, cache.values[l]);
    const auto att = attention(linear(h, b.wq, b.bq), keys, values, config_.heads, ranges);
    x = add(x, linear(att, b.wo, b.bo));
    if (b.mmfs) x = b.mmfs->apply_rows(x, refs, visible, pyramids);
    x = feed_forward(b, x);
  }
  cache.length = total;
  LLMOutput<T> out;
  out.hidden = layer_norm(x, lnf_g_, lnf_b_);
  out.logits = linear(out.hidden, head_, Tensor<T>());
  cache.hidden.insert(cache.hidden.end(), out.hidden.data().begin(), out.hidden.data().end());
  return out;
}

template class CausalLM<float>;
template class CausalLM<double>;

}  // namespace mmi
