#pragma once

// Loop-level re-implementation of Denoiser<double>::denoise, one batch
// element at a time, reading parameters by name from the store.

#include <cmath>
#include <string>
#include <vector>

#include "mmi/imgdec.hpp"
#include "oracle/mmfs_oracle.hpp"
#include "oracle/numcore_oracle.hpp"

namespace mmi::oracle {

struct Img {
  Vec v;
  std::int64_t h = 0, w = 0, c = 0;
};

class DenoiserOracle {
 public:
  DenoiserOracle(const ParamStore<double>& store, std::string prefix, DenoiserConfig cfg)
      : store_(store), prefix_(std::move(prefix)), cfg_(cfg) {}

  // Returns ε̂ for one element: x [H, W, ch].
  Vec operator()(const Vec& x, std::int64_t t, const Tensor<double>& cond,
                 const std::vector<const ImagePyramid<double>*>& pyramids) const {
    const Vec condv(cond.data().begin(), cond.data().end());
    const auto nc = cond.dim(0);
    Vec temb = timestep_embedding(t, cfg_.base_channels);
    temb = linear(temb, 1, cfg_.base_channels, p("time.w1"), cfg_.time_dim(), p("time.b1"));
    for (auto& v : temb) v = silu(v);
    temb = linear(temb, 1, cfg_.time_dim(), p("time.w2"), cfg_.time_dim(), p("time.b2"));
    for (auto& v : temb) v = silu(v);

    Img h = conv({x, cfg_.image_size, cfg_.image_size, cfg_.image_channels}, "conv_in", cfg_.base_channels, 1, 1);
    std::vector<Img> skips;
    for (std::int64_t s = 0; s < cfg_.depth; ++s) {
      const auto pre = "down" + std::to_string(s) + ".";
      h = xattn(res(h, pre + "res.", cfg_.stage_channels(s), temb), pre + "xattn.", condv, nc);
      skips.push_back(h);
      h = conv(h, pre + "down", h.c, 2, 1);
      if (cfg_.use_mmfs && !pyramids.empty()) h = mmfs(h, pre + "mmfs.", pyramids);
    }
    h = res(h, "mid.", h.c, temb);
    for (auto s = cfg_.depth - 1; s >= 0; --s) {
      const auto pre = "up" + std::to_string(s) + ".";
      h = conv(upsample(h), pre + "up", cfg_.stage_channels(s), 1, 1);
      const Img& skip = skips[static_cast<std::size_t>(s)];
      Img cat{Vec(static_cast<std::size_t>(h.h * h.w * 2 * h.c)), h.h, h.w, 2 * h.c};
      for (std::int64_t i = 0; i < h.h * h.w; ++i) {
        for (std::int64_t k = 0; k < h.c; ++k) {
          cat.v[i * cat.c + k] = h.v[i * h.c + k];
          cat.v[i * cat.c + h.c + k] = skip.v[i * h.c + k];
        }
      }
      h = xattn(res(cat, pre + "res.", cfg_.stage_channels(s), temb), pre + "xattn.", condv, nc);
    }
    Img o{layer_norm(h.v, h.h * h.w, h.c, p("out.ln.g"), p("out.ln.b")), h.h, h.w, h.c};
    for (auto& v : o.v) v = silu(v);
    return conv(o, "out", cfg_.image_channels, 1, 1).v;
  }

 private:
  static double silu(double v) { return v / (1.0 + std::exp(-v)); }

  Vec p(const std::string& name) const {
    const auto& t = store_.at(prefix_ + name);
    return Vec(t.data().begin(), t.data().end());
  }

  // Weight [cout, k, k, cin] under name + ".w" / ".b".
  Img conv(const Img& x, const std::string& name, std::int64_t cout, std::int64_t stride, std::int64_t pad) const {
    const auto& wt = store_.at(prefix_ + name + ".w");
    const auto k = wt.dim(1);
    const Vec w = p(name + ".w"), b = p(name + ".b");
    const auto oh = (x.h + 2 * pad - k) / stride + 1, ow = (x.w + 2 * pad - k) / stride + 1;
    Img y{Vec(static_cast<std::size_t>(oh * ow * cout)), oh, ow, cout};
    for (std::int64_t yy = 0; yy < oh; ++yy) {
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        for (std::int64_t o = 0; o < cout; ++o) {
          double acc = b[o];
          for (std::int64_t dy = 0; dy < k; ++dy) {
            for (std::int64_t dx = 0; dx < k; ++dx) {
              const auto iy = yy * stride - pad + dy, ix = xx * stride - pad + dx;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              for (std::int64_t c = 0; c < x.c; ++c) {
                acc += w[((o * k + dy) * k + dx) * x.c + c] * x.v[(iy * x.w + ix) * x.c + c];
              }
            }
          }
          y.v[(yy * ow + xx) * cout + o] = acc;
        }
      }
    }
    return y;
  }

  Img res(const Img& x, const std::string& pre, std::int64_t cout, const Vec& temb) const {
    Img a{layer_norm(x.v, x.h * x.w, x.c, p(pre + "ln1.g"), p(pre + "ln1.b")), x.h, x.w, x.c};
    for (auto& v : a.v) v = silu(v);
    Img h = conv(a, pre + "conv1", cout, 1, 1);
    const Vec e = linear(temb, 1, cfg_.time_dim(), p(pre + "temb.w"), cout, p(pre + "temb.b"));
    for (std::int64_t i = 0; i < h.h * h.w; ++i) {
      for (std::int64_t c = 0; c < cout; ++c) h.v[i * cout + c] += e[c];
    }
    Img b{layer_norm(h.v, h.h * h.w, cout, p(pre + "ln2.g"), p(pre + "ln2.b")), h.h, h.w, cout};
    for (auto& v : b.v) v = silu(v);
    Img out = conv(b, pre + "conv2", cout, 1, 1);
    const Img skip = x.c == cout ? x : conv(x, pre + "skip", cout, 1, 0);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += skip.v[i];
    return out;
  }

  Img xattn(const Img& x, const std::string& pre, const Vec& cond, std::int64_t nc) const {
    const auto n = x.h * x.w, c = x.c;
    const Vec q = linear(layer_norm(x.v, n, c, p(pre + "ln.g"), p(pre + "ln.b")), n, c, p(pre + "wq"), c, {});
    const Vec k = linear(cond, nc, cfg_.cond_dim, p(pre + "wk"), c, {});
    const Vec v = linear(cond, nc, cfg_.cond_dim, p(pre + "wv"), c, {});
    const Vec a = attention(q, k, v, n, c, cfg_.attn_heads, std::vector<std::int64_t>(n, 0),
                            std::vector<std::int64_t>(n, nc));
    const Vec o = linear(a, n, c, p(pre + "wo"), c, {});
    Img y = x;
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += o[i];
    return y;
  }

  static Img upsample(const Img& x) {
    Img y{Vec(static_cast<std::size_t>(4 * x.h * x.w * x.c)), 2 * x.h, 2 * x.w, x.c};
    for (std::int64_t yy = 0; yy < y.h; ++yy) {
      for (std::int64_t xx = 0; xx < y.w; ++xx) {
        for (std::int64_t c = 0; c < x.c; ++c) y.v[(yy * y.w + xx) * x.c + c] = x.v[((yy / 2) * x.w + xx / 2) * x.c + c];
      }
    }
    return y;
  }

  Img mmfs(const Img& x, const std::string& pre, const std::vector<const ImagePyramid<double>*>& pyramids) const {
    MMFSWeights w{p(pre + "wq"), p(pre + "bq"), p(pre + "wp"), p(pre + "bp"), p(pre + "wa"), p(pre + "ba"),
                  p(pre + "pos"), x.c, cfg_.mmfs_feature_dim, cfg_.mmfs_heads, cfg_.mmfs_levels, cfg_.mmfs_points};
    const auto first = pyramids.size() > static_cast<std::size_t>(cfg_.mmfs_max_images)
                           ? pyramids.size() - static_cast<std::size_t>(cfg_.mmfs_max_images)
                           : 0;
    std::vector<std::vector<Map>> maps;
    for (auto i = first; i < pyramids.size(); ++i) {
      std::vector<Map> levels;
      for (const auto& l : pyramids[i]->levels) levels.push_back({Vec(l.data().begin(), l.data().end()), l.dim(0), l.dim(1)});
      maps.push_back(std::move(levels));
    }
    const Vec gw = p(pre + "gate.w"), gb = p(pre + "gate.b");
    const auto f = cfg_.mmfs_feature_dim;
    Img y = x;
    for (std::int64_t yy = 0; yy < x.h; ++yy) {
      for (std::int64_t xx = 0; xx < x.w; ++xx) {
        const auto i = yy * x.w + xx;
        const Vec fq(x.v.begin() + i * x.c, x.v.begin() + (i + 1) * x.c);
        const double u = (static_cast<double>(xx) + 0.5) / static_cast<double>(x.w);
        const double v = (static_cast<double>(yy) + 0.5) / static_cast<double>(x.h);
        const Plan plan = mmfs_plan(w, fq, u, v, static_cast<std::int64_t>(maps.size()));
        const Vec fo = mmfs_sample(maps, f, cfg_.mmfs_heads, cfg_.mmfs_points, plan);
        for (std::int64_t o = 0; o < x.c; ++o) {
          double acc = gb[o];
          for (std::int64_t j = 0; j < f; ++j) acc += gw[o * f + j] * fo[j];
          y.v[i * x.c + o] += acc;
        }
      }
    }
    return y;
  }

  const ParamStore<double>& store_;
  std::string prefix_;
  DenoiserConfig cfg_;
};

}  // namespace mmi::oracle
