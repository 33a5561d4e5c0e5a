#include "mmi/resampler.hpp"

#include "mmi/ops.hpp"

namespace mmi {

template <typename T>
Resampler<T>::Resampler(const ResamplerConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng)
    : config_(config) {
  if (config_.input_dim == 0) config_.input_dim = config_.width;
  const auto c = config_.width, d = config_.input_dim, hidden = config_.ffn_mult * c;
  if (config_.latents < 1) throw ConfigError("resampler: at least one latent is required");
  if (config_.depth < 0) throw ConfigError("resampler: depth must be non-negative");
  if (c % config_.heads != 0) throw ConfigError("resampler: width must be divisible by heads");
  latents_ = store.add(prefix + "latents", Tensor<T>::randn({config_.latents, c}, rng, 0.02));
  for (std::int64_t i = 0; i < config_.depth; ++i) {
    const auto p = prefix + "block" + std::to_string(i) + ".";
    Block b;
    b.ln_q_g = store.add(p + "ln_q.g", Tensor<T>::full({c}, T(1)));
    b.ln_q_b = store.add(p + "ln_q.b", Tensor<T>::zeros({c}));
    b.ln_kv_g = store.add(p + "ln_kv.g", Tensor<T>::full({d}, T(1)));
    b.ln_kv_b = store.add(p + "ln_kv.b", Tensor<T>::zeros({d}));
    b.wq = store.add(p + "wq", init_linear<T>(rng, c, c));
    b.wk = store.add(p + "wk", init_linear<T>(rng, c, d));
    b.wv = store.add(p + "wv", init_linear<T>(rng, c, d));
    b.wo = store.add(p + "wo", init_linear<T>(rng, c, c));
    b.ln_f_g = store.add(p + "ln_f.g", Tensor<T>::full({c}, T(1)));
    b.ln_f_b = store.add(p + "ln_f.b", Tensor<T>::zeros({c}));
    b.w1 = store.add(p + "w1", init_linear<T>(rng, hidden, c));
    b.b1 = store.add(p + "b1", Tensor<T>::zeros({hidden}));
    b.w2 = store.add(p + "w2", init_linear<T>(rng, c, hidden));
    b.b2 = store.add(p + "b2", Tensor<T>::zeros({c}));
    blocks_.push_back(std::move(b));
  }
}

template <typename T>
Tensor<T> Resampler<T>::operator()(const Tensor<T>& features) const {
  if (features.rank() != 2 || features.dim(1) != config_.input_dim) {
    throw DimensionError("resampler: features " + to_string(features.shape()) + ", expected [S, " +
                         std::to_string(config_.input_dim) + "]");
  }
  if (features.dim(0) == 0) throw EmptyInputError("resampler: empty feature set");
  auto z = latents_;
  for (const auto& b : blocks_) {
    const auto kv = layer_norm(features, b.ln_kv_g, b.ln_kv_b);
    const auto q = linear(layer_norm(z, b.ln_q_g, b.ln_q_b), b.wq, Tensor<T>());
    const auto att = attention(q, linear(kv, b.wk, Tensor<T>()), linear(kv, b.wv, Tensor<T>()), config_.heads);
    z = add(z, linear(att, b.wo, Tensor<T>()));
    const auto h = gelu(linear(layer_norm(z, b.ln_f_g, b.ln_f_b), b.w1, b.b1));
    z = add(z, linear(h, b.w2, b.b2));
  }
  return z;
}

template class Resampler<float>;
template class Resampler<double>;

}  // namespace mmi
