#pragma once

#include <vector>

#include "mmi/resampler.hpp"
#include "oracle/numcore_oracle.hpp"

namespace mmi::oracle {

// Loop re-implementation of Resampler<double>::operator(), reading the
// parameters straight out of the module.
inline Vec resample(const Resampler<double>& r, const Vec& x, std::int64_t s) {
  const auto& cfg = r.config();
  const auto c = cfg.width, d = cfg.input_dim, hidden = cfg.ffn_mult * c, n = cfg.latents;
  auto vec = [](const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); };
  Vec z = vec(r.latents());
  for (const auto& b : r.blocks()) {
    const Vec kv = layer_norm(x, s, d, vec(b.ln_kv_g), vec(b.ln_kv_b));
    const Vec zn = layer_norm(z, n, c, vec(b.ln_q_g), vec(b.ln_q_b));
    const Vec q = linear(zn, n, c, vec(b.wq), c, {});
    const Vec k = linear(kv, s, d, vec(b.wk), c, {});
    const Vec v = linear(kv, s, d, vec(b.wv), c, {});
    const Vec att = attention(q, k, v, n, c, cfg.heads, std::vector<std::int64_t>(n, 0), std::vector<std::int64_t>(n, s));
    const Vec o = linear(att, n, c, vec(b.wo), c, {});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += o[i];
    Vec h = linear(layer_norm(z, n, c, vec(b.ln_f_g), vec(b.ln_f_b)), n, c, vec(b.w1), hidden, vec(b.b1));
    for (double& e : h) e = gelu(e);
    const Vec f = linear(h, n, hidden, vec(b.w2), c, vec(b.b2));
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += f[i];
  }
  return z;
}

}  // namespace mmi::oracle
