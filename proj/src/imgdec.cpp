#include "mmi/imgdec.hpp"

#include <algorithm>
#include <cmath>

#include "mmi/ops.hpp"

namespace mmi {

NoiseSchedule::NoiseSchedule(std::int64_t steps, double beta_first, double beta_last) {
  if (steps < 1) throw ScheduleError("noise schedule needs at least one step");
  if (!(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0)) {
    throw ScheduleError("noise schedule needs 0 < beta_first <= beta_last < 1");
  }
  double bar = 1.0;
  for (std::int64_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const double beta = beta_first + (beta_last - beta_first) * frac;
    bar *= 1.0 - beta;
    betas_.push_back(beta);
    alpha_bars_.push_back(bar);
  }
}

void NoiseSchedule::check(std::int64_t t) const {
  if (t < 1 || t > steps()) {
    throw ScheduleError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::beta(std::int64_t t) const {
  check(t);
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(std::int64_t t) const {
  if (t == 0) return 1.0;
  check(t);
  return alpha_bars_[static_cast<std::size_t>(t - 1)];
}

template <typename T>
Tensor<T> NoiseSchedule::noise(const Tensor<T>& x0, std::int64_t t, const Tensor<T>& eps) const {
  check(t);
  const double bar = alpha_bar(t);
  if (x0.shape() != eps.shape()) {
    throw DimensionError("noise: x0 " + to_string(x0.shape()) + " vs eps " + to_string(eps.shape()));
  }
  return add(scale(x0, static_cast<T>(std::sqrt(bar))), scale(eps, static_cast<T>(std::sqrt(1.0 - bar))));
}

template Tensor<float> NoiseSchedule::noise(const Tensor<float>&, std::int64_t, const Tensor<float>&) const;
template Tensor<double> NoiseSchedule::noise(const Tensor<double>&, std::int64_t, const Tensor<double>&) const;

std::vector<std::int64_t> NoiseSchedule::respaced(std::int64_t count) const {
  if (count < 1 || count > steps()) {
    throw ScheduleError("cannot sample with " + std::to_string(count) + " steps from a " + std::to_string(steps()) +
                        "-step schedule");
  }
  std::vector<std::int64_t> out;
  for (std::int64_t i = 1; i <= count; ++i) {
    out.push_back(static_cast<std::int64_t>(std::llround(static_cast<double>(i * steps()) / static_cast<double>(count))));
  }
  return out;
}

void DenoiserConfig::validate() const {
  if (depth < 1) throw ConfigError("denoiser: depth must be at least 1");
  if (image_size < 1 || image_size % (std::int64_t{1} << depth) != 0) {
    throw ConfigError("denoiser: image_size must be divisible by 2^depth");
  }
  if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("denoiser: base_channels must be even");
  if (attn_heads < 1 || base_channels % attn_heads != 0) {
    throw ConfigError("denoiser: base_channels must be divisible by attn_heads");
  }
  if (cond_tokens < 1 || cond_dim < 1) throw ConfigError("denoiser: condition shape must be positive");
}

std::vector<double> timestep_embedding(std::int64_t t, std::int64_t dim) {
  const auto half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
  for (std::int64_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(t) * f);
    out[half + i] = std::cos(static_cast<double>(t) * f);
  }
  return out;
}

template <typename T>
Tensor<T> pixel_refs(std::int64_t height, std::int64_t width) {
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(height * width * 2));
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      v.push_back(static_cast<T>((static_cast<double>(x) + 0.5) / static_cast<double>(width)));
      v.push_back(static_cast<T>((static_cast<double>(y) + 0.5) / static_cast<double>(height)));
    }
  }
  return Tensor<T>::from({height * width, 2}, std::move(v));
}

template <typename T>
Tensor<T> to_diffusion(const RawImage& image) {
  std::vector<T> v;
  v.reserve(image.pixels.size());
  for (float p : image.pixels) v.push_back(static_cast<T>(2.0 * p - 1.0));
  return Tensor<T>::from({image.height, image.width, image.channels}, std::move(v));
}

template <typename T>
RawImage from_diffusion(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("from_diffusion: expected [H, W, C], got " + to_string(x.shape()));
  RawImage img{x.dim(0), x.dim(1), x.dim(2), {}};
  for (T v : x.data()) img.pixels.push_back(static_cast<float>(std::clamp((static_cast<double>(v) + 1.0) / 2.0, 0.0, 1.0)));
  return img;
}

template Tensor<float> pixel_refs(std::int64_t, std::int64_t);
template Tensor<double> pixel_refs(std::int64_t, std::int64_t);
template Tensor<float> to_diffusion(const RawImage&);
template Tensor<double> to_diffusion(const RawImage&);
template RawImage from_diffusion(const Tensor<float>&);
template RawImage from_diffusion(const Tensor<double>&);

namespace {

template <typename T>
Tensor<T> conv_init(Philox& rng, std::int64_t cout, std::int64_t k, std::int64_t cin, double gain = 1.0) {
  const auto flat = init_linear<T>(rng, cout, k * k * cin, gain);
  return Tensor<T>::from({cout, k, k, cin}, std::vector<T>(flat.data().begin(), flat.data().end()));
}

template <typename T>
typename Denoiser<T>::ResBlock make_res(ParamStore<T>& store, const std::string& p, Philox& rng, std::int64_t cin,
                                        std::int64_t cout, std::int64_t temb) {
  typename Denoiser<T>::ResBlock b;
  b.ln1_g = store.add(p + "ln1.g", Tensor<T>::full({cin}, T(1)));
  b.ln1_b = store.add(p + "ln1.b", Tensor<T>::zeros({cin}));
  b.conv1_w = store.add(p + "conv1.w", conv_init<T>(rng, cout, 3, cin));
  b.conv1_b = store.add(p + "conv1.b", Tensor<T>::zeros({cout}));
  b.temb_w = store.add(p + "temb.w", init_linear<T>(rng, cout, temb));
  b.temb_b = store.add(p + "temb.b", Tensor<T>::zeros({cout}));
  b.ln2_g = store.add(p + "ln2.g", Tensor<T>::full({cout}, T(1)));
  b.ln2_b = store.add(p + "ln2.b", Tensor<T>::zeros({cout}));
  b.conv2_w = store.add(p + "conv2.w", conv_init<T>(rng, cout, 3, cout, 0.5));
  b.conv2_b = store.add(p + "conv2.b", Tensor<T>::zeros({cout}));
  if (cin != cout) {
    b.skip_w = store.add(p + "skip.w", conv_init<T>(rng, cout, 1, cin));
    b.skip_b = store.add(p + "skip.b", Tensor<T>::zeros({cout}));
  }
  return b;
}

template <typename T>
typename Denoiser<T>::CrossAttn make_xattn(ParamStore<T>& store, const std::string& p, Philox& rng, std::int64_t c,
                                           std::int64_t cond_dim) {
  typename Denoiser<T>::CrossAttn a;
  a.ln_g = store.add(p + "ln.g", Tensor<T>::full({c}, T(1)));
  a.ln_b = store.add(p + "ln.b", Tensor<T>::zeros({c}));
  a.wq = store.add(p + "wq", init_linear<T>(rng, c, c));
  a.wk = store.add(p + "wk", init_linear<T>(rng, c, cond_dim));
  a.wv = store.add(p + "wv", init_linear<T>(rng, c, cond_dim));
  a.wo = store.add(p + "wo", init_linear<T>(rng, c, c, 0.5));
  return a;
}

}  // namespace

template <typename T>
Denoiser<T>::Denoiser(const DenoiserConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng)
    : config_(config), schedule_(config.schedule_steps, config.beta_first, config.beta_last) {
  config_.validate();
  const auto base = config_.base_channels, temb = config_.time_dim(), ch = config_.image_channels;
  auto r = rng.split(1);
  conv_in_w_ = store.add(prefix + "conv_in.w", conv_init<T>(r, base, 3, ch));
  conv_in_b_ = store.add(prefix + "conv_in.b", Tensor<T>::zeros({base}));
  time_w1_ = store.add(prefix + "time.w1", init_linear<T>(r, temb, base));
  time_b1_ = store.add(prefix + "time.b1", Tensor<T>::zeros({temb}));
  time_w2_ = store.add(prefix + "time.w2", init_linear<T>(r, temb, temb));
  time_b2_ = store.add(prefix + "time.b2", Tensor<T>::zeros({temb}));

  std::int64_t cin = base;
  for (std::int64_t s = 0; s < config_.depth; ++s) {
    auto sr = rng.split(100 + static_cast<std::uint64_t>(s));
    const auto c = config_.stage_channels(s);
    const auto p = prefix + "down" + std::to_string(s) + ".";
    Down d;
    d.res = make_res<T>(store, p + "res.", sr, cin, c, temb);
    d.xattn = make_xattn<T>(store, p + "xattn.", sr, c, config_.cond_dim);
    d.down_w = store.add(p + "down.w", conv_init<T>(sr, c, 3, c));
    d.down_b = store.add(p + "down.b", Tensor<T>::zeros({c}));
    if (config_.use_mmfs) {
      auto mr = rng.split(500 + static_cast<std::uint64_t>(s));
      MMFSConfig mc{c, config_.mmfs_feature_dim, config_.mmfs_levels, config_.mmfs_points,
                    config_.mmfs_max_images, config_.mmfs_heads, 0.0, GateKind::Decoder};
      d.mmfs = std::make_unique<MMFS<T>>(mc, store, p + "mmfs.", mr);
    }
    downs_.push_back(std::move(d));
    cin = c;
  }
  auto mr = rng.split(2);
  mid_ = make_res<T>(store, prefix + "mid.", mr, cin, cin, temb);
  ups_.resize(static_cast<std::size_t>(config_.depth));
  for (std::int64_t s = config_.depth - 1; s >= 0; --s) {
    auto sr = rng.split(200 + static_cast<std::uint64_t>(s));
    const auto c = config_.stage_channels(s);
    const auto p = prefix + "up" + std::to_string(s) + ".";
    Up& u = ups_[static_cast<std::size_t>(s)];
    u.up_w = store.add(p + "up.w", conv_init<T>(sr, c, 3, cin));
    u.up_b = store.add(p + "up.b", Tensor<T>::zeros({c}));
    u.res = make_res<T>(store, p + "res.", sr, 2 * c, c, temb);
    u.xattn = make_xattn<T>(store, p + "xattn.", sr, c, config_.cond_dim);
    cin = c;
  }
  auto orng = rng.split(3);
  out_g_ = store.add(prefix + "out.ln.g", Tensor<T>::full({base}, T(1)));
  out_b_ = store.add(prefix + "out.ln.b", Tensor<T>::zeros({base}));
  out_w_ = store.add(prefix + "out.w", conv_init<T>(orng, ch, 3, base));
  out_bias_ = store.add(prefix + "out.b", Tensor<T>::zeros({ch}));
  null_cond_ = store.add(prefix + "null_cond", Tensor<T>::randn({config_.cond_tokens, config_.cond_dim}, orng, 0.5));
}

template <typename T>
Tensor<T> Denoiser<T>::res_block(const ResBlock& b, const Tensor<T>& x, const Tensor<T>& temb) const {
  auto h = conv2d(silu(layer_norm(x, b.ln1_g, b.ln1_b)), b.conv1_w, b.conv1_b, 1, 1);
  h = add_per_sample(h, linear(temb, b.temb_w, b.temb_b));
  h = conv2d(silu(layer_norm(h, b.ln2_g, b.ln2_b)), b.conv2_w, b.conv2_b, 1, 1);
  const auto skip = b.skip_w.defined() ? conv2d(x, b.skip_w, b.skip_b, 1, 0) : x;
  return add(skip, h);
}

template <typename T>
Tensor<T> Denoiser<T>::cross_attn(const CrossAttn& a, const Tensor<T>& x, const std::vector<Tensor<T>>& conds) const {
  const auto batch = x.dim(0), height = x.dim(1), width = x.dim(2), c = x.dim(3);
  std::vector<Tensor<T>> rows;
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto xb = reshape(slice_rows(x, b, b + 1), {height * width, c});
    const auto& cond = conds[static_cast<std::size_t>(b)];
    const auto q = linear(layer_norm(xb, a.ln_g, a.ln_b), a.wq, Tensor<T>());
    const auto k = linear(cond, a.wk, Tensor<T>());
    const auto v = linear(cond, a.wv, Tensor<T>());
    rows.push_back(add(xb, linear(attention(q, k, v, config_.attn_heads), a.wo, Tensor<T>())));
  }
  return reshape(concat(rows, 0), x.shape());
}

template <typename T>
Tensor<T> Denoiser<T>::synchronize(const MMFS<T>& m, const Tensor<T>& x,
                                   const std::vector<PyramidSet<T>>& pyramids) const {
  const auto batch = x.dim(0), height = x.dim(1), width = x.dim(2), c = x.dim(3);
  bool any = false;
  for (const auto& set : pyramids) any = any || !set.empty();
  if (!any) return x;
  const auto refs = pixel_refs<T>(height, width);
  std::vector<Tensor<T>> rows;
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto xb = reshape(slice_rows(x, b, b + 1), {height * width, c});
    const auto& set = pyramids[static_cast<std::size_t>(b)];
    rows.push_back(m.apply(xb, refs, std::span<const ImagePyramid<T>* const>(set.data(), set.size())));
  }
  return reshape(concat(rows, 0), x.shape());
}

template <typename T>
Tensor<T> Denoiser<T>::denoise(const Tensor<T>& x_t, std::span<const std::int64_t> t,
                               const std::vector<Tensor<T>>& conds,
                               const std::vector<PyramidSet<T>>& pyramids) const {
  const auto size = config_.image_size;
  if (x_t.rank() != 4 || x_t.dim(1) != size || x_t.dim(2) != size || x_t.dim(3) != config_.image_channels) {
    throw DimensionError("denoise: expected [B, " + std::to_string(size) + ", " + std::to_string(size) + ", " +
                         std::to_string(config_.image_channels) + "], got " + to_string(x_t.shape()));
  }
  const auto batch = x_t.dim(0);
  if (static_cast<std::int64_t>(t.size()) != batch || static_cast<std::int64_t>(conds.size()) != batch) {
    throw DimensionError("denoise: need one timestep and one condition per batch element");
  }
  if (!pyramids.empty() && static_cast<std::int64_t>(pyramids.size()) != batch) {
    throw DimensionError("denoise: pyramid sets must be empty or one per batch element");
  }
  for (const auto& c : conds) {
    if (c.rank() != 2 || c.dim(1) != config_.cond_dim || c.dim(0) < 1) {
      throw DimensionError("denoise: condition must be [N, " + std::to_string(config_.cond_dim) + "], got " +
                           to_string(c.shape()));
    }
  }
  const std::vector<PyramidSet<T>> none(static_cast<std::size_t>(batch));
  const auto& sets = pyramids.empty() ? none : pyramids;

  std::vector<T> sinus;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (double v : timestep_embedding(t[b], config_.base_channels)) sinus.push_back(static_cast<T>(v));
  }
  auto temb = linear(Tensor<T>::from({batch, config_.base_channels}, std::move(sinus)), time_w1_, time_b1_);
  temb = linear(silu(temb), time_w2_, time_b2_);
  const auto temb_act = silu(temb);

  auto h = conv2d(x_t, conv_in_w_, conv_in_b_, 1, 1);
  std::vector<Tensor<T>> skips;
  for (const auto& d : downs_) {
    h = cross_attn(d.xattn, res_block(d.res, h, temb_act), conds);
    skips.push_back(h);
    h = conv2d(h, d.down_w, d.down_b, 2, 1);
    if (d.mmfs) h = synchronize(*d.mmfs, h, sets);
  }
  h = res_block(mid_, h, temb_act);
  for (auto s = config_.depth - 1; s >= 0; --s) {
    const auto& u = ups_[static_cast<std::size_t>(s)];
    h = conv2d(upsample2x(h), u.up_w, u.up_b, 1, 1);
    h = concat(std::vector<Tensor<T>>{h, skips[static_cast<std::size_t>(s)]}, 3);
    h = cross_attn(u.xattn, res_block(u.res, h, temb_act), conds);
  }
  return conv2d(silu(layer_norm(h, out_g_, out_b_)), out_w_, out_bias_, 1, 1);
}

template <typename T>
NipDraw<T> Denoiser<T>::draw(const Shape& shape, Philox& rng) const {
  NipDraw<T> d;
  for (std::int64_t b = 0; b < shape.at(0); ++b) d.t.push_back(rng.uniform_int(1, schedule_.steps() + 1));
  d.eps = Tensor<T>::randn(shape, rng);
  return d;
}

template <typename T>
Tensor<T> Denoiser<T>::nip_loss(const Tensor<T>& x0, const std::vector<Tensor<T>>& conds,
                                const std::vector<PyramidSet<T>>& pyramids, const NipDraw<T>& draw) const {
  if (x0.shape() != draw.eps.shape() || x0.rank() != 4 || static_cast<std::int64_t>(draw.t.size()) != x0.dim(0)) {
    throw DimensionError("nip_loss: draw does not match x0 " + to_string(x0.shape()));
  }
  const auto batch = x0.dim(0), inner = x0.numel() / batch;
  std::vector<T> xt(static_cast<std::size_t>(x0.numel()));
  const auto xv = x0.data(), ev = draw.eps.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const double bar = schedule_.alpha_bar(draw.t[b]);
    const double a = std::sqrt(bar), s = std::sqrt(1.0 - bar);
    for (std::int64_t i = b * inner; i < (b + 1) * inner; ++i) xt[i] = static_cast<T>(a * xv[i] + s * ev[i]);
  }
  const auto pred = denoise(Tensor<T>::from(x0.shape(), std::move(xt)), draw.t, conds, pyramids);
  return mse(pred, draw.eps);
}

template <typename T>
Tensor<T> Denoiser<T>::nip_loss(const Tensor<T>& x0, const std::vector<Tensor<T>>& conds,
                                const std::vector<PyramidSet<T>>& pyramids, Philox& rng) const {
  return nip_loss(x0, conds, pyramids, draw(x0.shape(), rng));
}

template <typename T>
std::vector<Tensor<T>> Denoiser<T>::null_conds(std::int64_t batch) const {
  return std::vector<Tensor<T>>(static_cast<std::size_t>(batch), null_cond_);
}

template <typename T>
Tensor<T> Denoiser<T>::sample(const std::vector<Tensor<T>>& conds, const std::vector<PyramidSet<T>>& pyramids,
                              const SampleOptions<T>& options, Philox& rng) const {
  if (options.guidance < 0.0) throw ConfigError("sample: guidance scale must be non-negative");
  const auto steps = options.steps == 0 ? schedule_.steps() : options.steps;
  const auto taus = schedule_.respaced(steps);
  NoGradGuard no_grad;
  const auto batch = static_cast<std::int64_t>(conds.size());
  const auto size = config_.image_size;
  const Shape shape{batch, size, size, config_.image_channels};
  auto x = Tensor<T>::randn(shape, rng);
  const auto nulls = null_conds(batch);
  const double s = options.guidance;
  for (auto i = static_cast<std::int64_t>(taus.size()); i >= 1; --i) {
    const auto t = taus[static_cast<std::size_t>(i - 1)];
    const auto prev = i == 1 ? 0 : taus[static_cast<std::size_t>(i - 2)];
    const std::vector<std::int64_t> ts(static_cast<std::size_t>(batch), t);
    const auto uncond = denoise(x, ts, nulls, pyramids);
    std::vector<T> eps(uncond.data().begin(), uncond.data().end());
    if (s != 0.0) {
      const auto cond = denoise(x, ts, conds, pyramids);
      const auto cv = cond.data();
      for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = static_cast<T>(eps[k] + s * (cv[k] - eps[k]));
    }
    const double bar = schedule_.alpha_bar(t), bar_prev = schedule_.alpha_bar(prev);
    const double alpha = bar / bar_prev, beta = 1.0 - alpha;
    const double coef = beta / std::sqrt(1.0 - bar), inv = 1.0 / std::sqrt(alpha);
    const double sigma = i > 1 ? std::sqrt(beta * (1.0 - bar_prev) / (1.0 - bar)) : 0.0;
    std::vector<T> next(eps.size());
    const auto xv = x.data();
    for (std::size_t k = 0; k < next.size(); ++k) {
      double v = inv * (xv[k] - coef * eps[k]);
      if (i > 1) v += sigma * rng.normal();
      next[k] = static_cast<T>(v);
    }
    x = Tensor<T>::from(shape, std::move(next));
    if (options.trace) options.trace(static_cast<std::int64_t>(taus.size()) - i + 1, x);
  }
  return x;
}

template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace mmi
