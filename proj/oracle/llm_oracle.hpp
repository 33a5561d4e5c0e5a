#pragma once

#include <cmath>
#include <vector>

#include "mmi/llm.hpp"
#include "oracle/mmfs_oracle.hpp"
#include "oracle/numcore_oracle.hpp"

namespace mmi::oracle {

inline MMFSWeights weights_of(const MMFS<double>& m) {
  auto vec = [](const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); };
  const auto& c = m.config();
  return {vec(m.wq()), vec(m.bq()), vec(m.wp()), vec(m.bp()), vec(m.wa()), vec(m.ba()), vec(m.pos()),
          c.query_dim, c.feature_dim, c.heads, c.levels, c.points};
}

inline std::vector<Map> maps_of(const ImagePyramid<double>& p) {
  std::vector<Map> out;
  for (const auto& l : p.levels) out.push_back({Vec(l.data().begin(), l.data().end()), l.dim(0), l.dim(1)});
  return out;
}

// Position-by-position re-implementation of CausalLM<double>::forward;
// returns the logits [T, V].
inline Vec llm_logits(const CausalLM<double>& lm, const PackedSequence& seq, const std::vector<Tensor<double>>& visual,
                      const std::vector<const ImagePyramid<double>*>& pyramids) {
  const auto& cfg = lm.config();
  const auto c = cfg.d_model, n = seq.size(), hidden = cfg.ffn_mult * c, vocab = cfg.vocab().size();
  auto vec = [](const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); };
  const Vec tok = vec(lm.token_table()), pos = vec(lm.position_table());
  const auto ids = seq.token_ids(cfg.vocab());
  Vec x(static_cast<std::size_t>(n * c));
  for (std::int64_t p = 0; p < n; ++p) {
    for (std::int64_t j = 0; j < c; ++j) {
      const auto& s = seq.stream[p];
      const double in = s.kind == SlotKind::Image ? visual[s.value][s.index * c + j] : tok[ids[p] * c + j];
      x[p * c + j] = in + pos[seq.position[p] * c + j];
    }
  }
  std::vector<std::int64_t> lo(n), hi(n);
  for (std::int64_t p = 0; p < n; ++p) {
    lo[p] = p - seq.position[p];
    hi[p] = p + 1;
  }
  const auto visible = visibility(seq, cfg.strict_visibility);
  for (const auto& b : lm.blocks()) {
    const Vec h = layer_norm(x, n, c, vec(b.ln1_g), vec(b.ln1_b));
    const Vec q = linear(h, n, c, vec(b.wq), c, vec(b.bq));
    const Vec k = linear(h, n, c, vec(b.wk), c, vec(b.bk));
    const Vec v = linear(h, n, c, vec(b.wv), c, vec(b.bv));
    const Vec att = attention(q, k, v, n, c, cfg.heads, lo, hi);
    const Vec o = linear(att, n, c, vec(b.wo), c, vec(b.bo));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    if (b.mmfs) {
      const auto w = weights_of(*b.mmfs);
      const double gate = std::tanh(b.mmfs->alpha()[0]);
      const auto cap = b.mmfs->config().max_images;
      for (std::int64_t p = 0; p < n; ++p) {
        if (visible[p].empty()) continue;
        const auto first = visible[p].size() > static_cast<std::size_t>(cap) ? visible[p].size() - cap : 0;
        std::vector<std::vector<Map>> imgs;
        for (auto i = first; i < visible[p].size(); ++i) imgs.push_back(maps_of(*pyramids[visible[p][i]]));
        const Vec fq(x.begin() + p * c, x.begin() + (p + 1) * c);
        const auto plan = mmfs_plan(w, fq, 0.5, 0.5, static_cast<std::int64_t>(imgs.size()));
        const Vec fo = mmfs_sample(imgs, c, w.heads, w.points, plan);
        for (std::int64_t j = 0; j < c; ++j) x[p * c + j] += gate * fo[j];
      }
    }
    Vec f = linear(layer_norm(x, n, c, vec(b.ln2_g), vec(b.ln2_b)), n, c, vec(b.w1), hidden, vec(b.b1));
    for (double& e : f) e = gelu(e);
    const Vec y = linear(f, n, hidden, vec(b.w2), c, vec(b.b2));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
  }
  const Vec hf = layer_norm(x, n, c, vec(lm.final_g()), vec(lm.final_b()));
  return linear(hf, n, c, vec(lm.head()), vocab, {});
}

}  // namespace mmi::oracle
