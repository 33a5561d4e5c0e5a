#include "mmi/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <iterator>
#include <limits>

#include "json.hpp"

#include "mmi/ops.hpp"

namespace mmi {

void ModelConfig::finalize() {
  decoder.mmfs_feature_dim = llm.d_model;
  decoder.mmfs_levels = llm.mmfs_levels;
  decoder.mmfs_max_images = llm.mmfs_max_images;
}

void ModelConfig::validate() const {
  llm.validate();
  decoder.validate();
  if (visual_tokens < 1) throw ConfigError("model: visual_tokens must be at least 1");
  if (resampler_depth < 1) throw ConfigError("model: resampler_depth must be at least 1");
  if (encoder_scale < 1 || !std::has_single_bit(static_cast<std::uint64_t>(encoder_scale))) {
    throw ConfigError("model: encoder_scale must be a power of two");
  }
  const auto coarsest = std::int64_t{8} << (llm.mmfs_levels - 1);
  if (encoder_input() % coarsest != 0) {
    throw ConfigError("model: image_size * encoder_scale = " + std::to_string(encoder_input()) +
                      " must be divisible by " + std::to_string(coarsest) + " for " +
                      std::to_string(llm.mmfs_levels) + " pyramid levels");
  }
  if (decoder.mmfs_feature_dim != llm.d_model || decoder.mmfs_levels != llm.mmfs_levels) {
    throw ConfigError("model: call finalize() to tie decoder MMFS widths to the LLM");
  }
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.finalize();
  config_.validate();
  const auto d = config_.llm.d_model;
  const Philox root(seed);
  auto r_enc = root.split(10), r_vis = root.split(11), r_llm = root.split(12), r_cond = root.split(13),
       r_dec = root.split(14);
  encoder_ = std::make_unique<PyramidEncoder<T>>(
      PyramidConfig{config_.llm.mmfs_levels, d, config_.decoder.image_channels}, store_, "enc.", r_enc);
  visual_ = std::make_unique<Resampler<T>>(ResamplerConfig{d, d, config_.visual_tokens, config_.resampler_depth, 1, 2},
                                           store_, "vis.", r_vis);
  llm_ = std::make_unique<CausalLM<T>>(config_.llm, store_, "llm.", r_llm);
  cond_ = std::make_unique<Resampler<T>>(
      ResamplerConfig{config_.decoder.cond_dim, d, config_.decoder.cond_tokens, config_.resampler_depth, 1, 2}, store_,
      "cond.", r_cond);
  decoder_ = std::make_unique<Denoiser<T>>(config_.decoder, store_, "dec.", r_dec);
}

template <typename T>
ImagePyramid<T> Model<T>::pyramid(const Tensor<T>& image) const {
  const auto s = config_.decoder.image_size, ch = config_.decoder.image_channels;
  if (image.shape() != Shape{s, s, ch}) {
    throw DimensionError("model: expected image [" + std::to_string(s) + ", " + std::to_string(s) + ", " +
                         std::to_string(ch) + "], got " + to_string(image.shape()));
  }
  auto x = reshape(image, {1, s, s, ch});
  for (auto f = config_.encoder_scale; f > 1; f /= 2) x = upsample2x(x);
  const auto big = config_.encoder_input();
  return encoder_->encode(reshape(x, {big, big, ch}));
}

template <typename T>
Tensor<T> Model<T>::visual_tokens(const ImagePyramid<T>& pyramid) const {
  return (*visual_)(pyramid.flatten());
}

template <typename T>
Tensor<T> Model<T>::condition(const Tensor<T>& hidden, std::int64_t begin, std::int64_t end) const {
  return (*cond_)(slice_rows(hidden, begin, end));
}

template class Model<float>;
template class Model<double>;

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be non-negative");
  if (!(dropout >= 0.0 && dropout <= 1.0)) throw ConfigError("train: dropout must lie in [0, 1]");
  if (!(optimizer.lr >= 0.0 && optimizer.decoder_lr >= 0.0)) throw ConfigError("train: learning rates must be >= 0");
}

template <typename T>
Optimizer<T>::Optimizer(const OptimizerConfig& config, ParamStore<T>& store, std::string decoder_prefix)
    : config_(config), store_(store), decoder_prefix_(std::move(decoder_prefix)) {
  for (const auto& [name, t] : store_.items()) {
    m_.emplace_back(static_cast<std::size_t>(t.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(t.numel()), T(0));
  }
}

template <typename T>
void Optimizer<T>::step() {
  ++steps_;
  double clip = 1.0;
  if (config_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, t] : store_.items()) {
      for (T g : t.node()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) clip = config_.grad_clip / norm;
  }
  const bool adam = config_.kind == OptimizerConfig::Kind::Adam;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto& items = store_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto t = items[i].second;
    const double lr = items[i].first.starts_with(decoder_prefix_) ? config_.decoder_lr : config_.lr;
    const auto& grad = t.node()->grad;
    auto value = t.data_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad.empty() ? 0.0 : clip * static_cast<double>(grad[k]);
      if (!adam) {
        value[k] = static_cast<T>(value[k] - lr * g);
        continue;
      }
      m[k] = static_cast<T>(config_.beta1 * m[k] + (1.0 - config_.beta1) * g);
      v[k] = static_cast<T>(config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g);
      const double mh = m[k] / c1, vh = v[k] / c2;
      value[k] = static_cast<T>(value[k] - lr * mh / (std::sqrt(vh) + config_.eps));
    }
  }
  store_.zero_grad();
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Optimizer<T>::state() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  const auto& items = store_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.emplace_back("opt.m." + items[i].first, Tensor<T>::from(items[i].second.shape(), m_[i]));
    out.emplace_back("opt.v." + items[i].first, Tensor<T>::from(items[i].second.shape(), v_[i]));
  }
  out.emplace_back("opt.step", Tensor<T>::full({1}, static_cast<T>(steps_)));
  return out;
}

template <typename T>
void Optimizer<T>::load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state) {
  const auto& items = store_.items();
  for (const auto& [name, t] : state) {
    if (name == "opt.step") {
      steps_ = static_cast<std::int64_t>(std::llround(static_cast<double>(t.item())));
      continue;
    }
    const bool first = name.starts_with("opt.m.");
    if (!first && !name.starts_with("opt.v.")) continue;
    const auto param = name.substr(6);
    const auto it = std::find_if(items.begin(), items.end(), [&](const auto& e) { return e.first == param; });
    if (it == items.end()) throw LookupError("optimizer state for unknown parameter: " + param);
    if (t.shape() != it->second.shape()) throw DimensionError("optimizer state shape mismatch for " + param);
    auto& dst = first ? m_[static_cast<std::size_t>(it - items.begin())] : v_[static_cast<std::size_t>(it - items.begin())];
    dst.assign(t.data().begin(), t.data().end());
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

template <typename T>
Losses<T> compute_losses(const Model<T>& model, const std::vector<TrainContext<T>>& batch, double lambda,
                         double dropout, Philox& rng) {
  const auto& cfg = model.config();
  const auto vocab = cfg.llm.vocab();
  const auto s = cfg.decoder.image_size, ch = cfg.decoder.image_channels;
  std::vector<Tensor<T>> logits;
  std::vector<std::int64_t> targets;
  std::vector<std::uint8_t> mask;
  std::vector<Tensor<T>> x0s, conds;
  std::vector<PyramidSet<T>> sets;
  std::deque<ImagePyramid<T>> pyramids;  // stable addresses for the sets

  for (const auto& ctx : batch) {
    const auto& seq = ctx.seq;
    if (ctx.images.size() < seq.images.size()) {
      throw LookupError("train batch: context references " + std::to_string(seq.images.size()) +
                        " images but provides " + std::to_string(ctx.images.size()));
    }
    std::vector<const ImagePyramid<T>*> ptrs;
    std::vector<Tensor<T>> visual;
    for (std::size_t j = 0; j < seq.images.size(); ++j) {
      pyramids.push_back(model.pyramid(ctx.images[j]));
      ptrs.push_back(&pyramids.back());
      visual.push_back(model.visual_tokens(pyramids.back()));
    }
    const auto out = model.llm().forward(seq, visual, ptrs);
    const auto t = ntp_targets(seq, vocab);
    logits.push_back(out.logits);
    targets.insert(targets.end(), t.targets.begin(), t.targets.end());
    mask.insert(mask.end(), t.mask.begin(), t.mask.end());

    for (std::size_t j = 0; j < seq.images.size(); ++j) {
      const auto boi = seq.boi_position(static_cast<std::int64_t>(j));
      const auto start = seq.segment_start(boi);
      if (boi == start + 1) continue;  // first element of its sample
      const bool drop = rng.bernoulli(dropout);
      conds.push_back(drop ? model.decoder().null_cond() : model.condition(out.hidden, start, boi + 1));
      PyramidSet<T> set;
      for (std::size_t k = 0; k < j; ++k) {
        if (seq.segment_start(seq.boi_position(static_cast<std::int64_t>(k))) == start) set.push_back(ptrs[k]);
      }
      sets.push_back(std::move(set));
      x0s.push_back(reshape(ctx.images[j], {1, s, s, ch}));
    }
  }

  Losses<T> losses;
  losses.ntp_positions = std::count(mask.begin(), mask.end(), std::uint8_t{1});
  losses.nip_images = static_cast<std::int64_t>(x0s.size());
  if (losses.ntp_positions == 0 && losses.nip_images == 0) {
    throw EmptyInputError("train batch has no next-token targets and no eligible images");
  }
  losses.ntp = losses.ntp_positions > 0 ? cross_entropy(concat(logits, 0), targets, mask) : Tensor<T>::zeros({1});
  losses.nip = losses.nip_images > 0 ? model.decoder().nip_loss(concat(x0s, 0), conds, sets, rng)
                                     : Tensor<T>::zeros({1});
  losses.total = add(losses.ntp, scale(losses.nip, static_cast<T>(lambda)));
  return losses;
}

template Losses<float> compute_losses(const Model<float>&, const std::vector<TrainContext<float>>&, double, double,
                                      Philox&);
template Losses<double> compute_losses(const Model<double>&, const std::vector<TrainContext<double>>&, double, double,
                                       Philox&);

template <typename T>
Trainer<T>::Trainer(Model<T>& model, const TrainConfig& config)
    : model_(model), config_(config), optimizer_(config.optimizer, model.params()), rng_(config.seed) {
  config_.validate();
}

template <typename T>
StepStats Trainer<T>::step(const std::vector<TrainContext<T>>& batch) {
  // The draws of step k depend only on (seed, k), so a resumed run replays
  // the same noise and dropout as an uninterrupted one.
  auto step_rng = rng_.split(static_cast<std::uint64_t>(optimizer_.steps()));
  model_.params().zero_grad();
  const auto losses = compute_losses(model_, batch, config_.lambda, config_.dropout, step_rng);
  losses.total.backward();
  optimizer_.step();
  return {static_cast<double>(losses.ntp.item()), static_cast<double>(losses.nip.item()),
          static_cast<double>(losses.total.item())};
}

template class Trainer<float>;
template class Trainer<double>;

namespace {

template <typename T>
std::int64_t choose_token(std::vector<double>& logits, const Vocab& vocab, double temperature, Philox& rng) {
  logits[static_cast<std::size_t>(vocab.bos())] = -std::numeric_limits<double>::infinity();
  if (temperature <= 0.0) {
    return static_cast<std::int64_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp((logits[i] - peak) / temperature));
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if ((u -= p[i]) < 0.0) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

void append_slot(PackedSequence& seq, Slot slot) {
  seq.position.push_back(static_cast<std::int64_t>(seq.stream.size()));
  seq.segment.push_back(0);
  seq.stream.push_back(slot);
}

}  // namespace

template <typename T>
GenerationResult<T> generate(const Model<T>& model, const std::vector<Element>& prompt,
                             const std::vector<Tensor<T>>& prompt_images, const GenerateConfig& config) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const auto& lm = model.llm();
  const auto vocab = cfg.llm.vocab();
  const auto n = cfg.visual_tokens, s = cfg.decoder.image_size, ch = cfg.decoder.image_channels;
  const auto context = cfg.llm.max_context;
  Philox rng(config.seed);

  auto seq = build(prompt, n, vocab, false);
  if (seq.size() > context) {
    throw LengthError("prompt of " + std::to_string(seq.size()) + " slots exceeds the context of " +
                      std::to_string(context));
  }
  std::deque<ImagePyramid<T>> pyramids;
  std::vector<const ImagePyramid<T>*> ptrs;
  std::vector<Tensor<T>> visual;
  auto add_image = [&](const Tensor<T>& image) {
    pyramids.push_back(model.pyramid(image));
    ptrs.push_back(&pyramids.back());
    visual.push_back(model.visual_tokens(pyramids.back()));
  };
  for (auto id : seq.images) {
    if (id < 0 || id >= static_cast<std::int64_t>(prompt_images.size())) {
      throw LookupError("prompt image " + std::to_string(id) + " was not provided");
    }
    add_image(prompt_images[static_cast<std::size_t>(id)]);
  }

  auto cache = lm.new_cache();
  auto feed = [&](std::int64_t from) {
    const auto vis = visibility(seq, cfg.llm.strict_visibility);
    const std::span<const Slot> slots(seq.stream.data() + from, static_cast<std::size_t>(seq.size() - from));
    const std::vector<std::vector<std::int64_t>> rows(vis.begin() + from, vis.end());
    return lm.step(cache, lm.embed(slots, visual), rows, ptrs);
  };
  auto out = feed(0);

  GenerationResult<T> result;
  const auto v = vocab.size();
  for (std::int64_t step = 0; step < config.max_new; ++step) {
    const auto last = out.logits.data().subspan(static_cast<std::size_t>((out.logits.dim(0) - 1) * v),
                                                static_cast<std::size_t>(v));
    std::vector<double> logits(last.begin(), last.end());
    if (config.logits_hook) config.logits_hook(step, logits);
    const auto token = choose_token<T>(logits, vocab, config.temperature, rng);
    if (token == vocab.eos()) break;
    if (token == vocab.boi()) {
      if (seq.size() + 1 + n > context) throw LengthError("generated image would overflow the context");
      const auto local = static_cast<std::int64_t>(seq.images.size());
      const auto id = static_cast<std::int64_t>(prompt_images.size() + result.images.size());
      const auto boi = seq.size();
      append_slot(seq, {SlotKind::BoI, local, 0});
      seq.images.push_back(id);
      out = feed(boi);
      const auto hidden = Tensor<T>::from({cache.length, cfg.llm.d_model}, cache.hidden);
      const auto cond = model.condition(hidden, 0, boi + 1);
      SampleOptions<T> options;
      options.guidance = config.guidance;
      options.steps = config.diffusion_steps;
      if (config.sample_trace) {
        const auto index = static_cast<std::int64_t>(result.images.size());
        options.trace = [&, index](std::int64_t step, const Tensor<T>& x) {
          double sum = 0, sq = 0;
          for (const auto v : x.data()) sum += static_cast<double>(v);
          const double mean = sum / static_cast<double>(x.numel());
          for (const auto v : x.data()) sq += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
          config.sample_trace(index, step, mean, std::sqrt(sq / static_cast<double>(x.numel())));
        };
      }
      const std::vector<PyramidSet<T>> sets{PyramidSet<T>(ptrs.begin(), ptrs.end())};
      const auto image = reshape(model.decoder().sample({cond}, sets, options, rng), {s, s, ch});
      add_image(image);
      for (std::int64_t k = 0; k < n; ++k) append_slot(seq, {SlotKind::Image, local, k});
      out = feed(boi + 1);
      result.images.push_back(image);
      result.elements.push_back(Element::img(id));
      continue;
    }
    if (seq.size() + 1 > context) throw LengthError("generated text would overflow the context");
    append_slot(seq, {SlotKind::Text, token, 0});
    out = feed(seq.size() - 1);
    if (result.elements.empty() || result.elements.back().kind != Element::Kind::Text) {
      result.elements.push_back(Element::text({}));
    }
    result.elements.back().tokens.push_back(token);
  }
  return result;
}

template GenerationResult<float> generate(const Model<float>&, const std::vector<Element>&,
                                          const std::vector<Tensor<float>>&, const GenerateConfig&);
template GenerationResult<double> generate(const Model<double>&, const std::vector<Element>&,
                                           const std::vector<Tensor<double>>&, const GenerateConfig&);

namespace {

constexpr char kMagic[8] = {'M', 'M', 'I', 'V', '1', 0, 0, 0};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  nlohmann::json manifest;
  manifest["format"] = "MMIV1";
  manifest["config"] = checkpoint.config;
  manifest["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : checkpoint.tensors) {
    const auto offset = payload.size();
    for (float v : t.data()) put_u32(payload, std::bit_cast<std::uint32_t>(v));
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", payload.size() - offset}});
  }
  const auto text = manifest.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write checkpoint " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write to checkpoint " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot read checkpoint " + path);
  const std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (data.size() < 12) throw FormatError(path + ": truncated header");
  if (std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) throw FormatError(path + ": bad magic, not an MMIV1 checkpoint");
  const auto len = get_u32(data.data() + 8);
  if (data.size() < 12 + static_cast<std::size_t>(len)) throw FormatError(path + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(data.begin() + 12, data.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed manifest: " + e.what());
  }
  const char* payload = data.data() + 12 + len;
  const auto available = data.size() - 12 - len;
  Checkpoint ckpt;
  try {
    if (manifest.at("format") != "MMIV1") throw FormatError(path + ": unknown format tag");
    for (const auto& [key, value] : manifest.at("config").items()) ckpt.config[key] = value.get<std::string>();
    std::size_t expected = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (entry.at("dtype") != "f32") throw FormatError(path + ": tensor " + name + " has unsupported dtype");
      if (nbytes != 4 * static_cast<std::size_t>(numel(shape)) || offset != expected) {
        throw FormatError(path + ": inconsistent manifest entry for " + name);
      }
      if (offset + nbytes > available) throw FormatError(path + ": truncated payload at tensor " + name);
      std::vector<float> values(static_cast<std::size_t>(numel(shape)));
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<float>(get_u32(payload + offset + 4 * i));
      ckpt.tensors.emplace_back(name, Tensor<float>::from(shape, std::move(values)));
      expected += nbytes;
    }
    if (expected != available) throw FormatError(path + ": payload size does not match the manifest");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed manifest: " + e.what());
  }
  return ckpt;
}

template <typename T>
void load_params(const Checkpoint& checkpoint, ParamStore<T>& store) {
  std::vector<std::string> unknown;
  for (const auto& [name, t] : checkpoint.tensors) {
    if (name.starts_with("opt.")) continue;
    if (!store.find(name)) unknown.push_back(name);
  }
  auto join = [](const std::vector<std::string>& names) {
    std::string s;
    for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
    return s;
  };
  if (!unknown.empty()) throw LookupError("checkpoint tensors not in the model: " + join(unknown));
  std::vector<std::string> missing;
  for (const auto& [name, t] : store.items()) {
    const auto it = std::find_if(checkpoint.tensors.begin(), checkpoint.tensors.end(),
                                 [&](const auto& e) { return e.first == name; });
    if (it == checkpoint.tensors.end()) {
      missing.push_back(name);
      continue;
    }
    if (it->second.shape() != t.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " + to_string(it->second.shape()) +
                           ", model expects " + to_string(t.shape()));
    }
    auto dst = t;
    const auto src = it->second.data();
    std::transform(src.begin(), src.end(), dst.data_mut().begin(), [](float v) { return static_cast<T>(v); });
  }
  if (!missing.empty()) throw LookupError("model parameters missing from checkpoint: " + join(missing));
}

template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> export_params(const ParamStore<T>& store) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (const auto& [name, t] : store.items()) out.emplace_back(name, t.template cast<float>().detach());
  return out;
}

template void load_params(const Checkpoint&, ParamStore<float>&);
template void load_params(const Checkpoint&, ParamStore<double>&);
template std::vector<std::pair<std::string, Tensor<float>>> export_params(const ParamStore<float>&);
template std::vector<std::pair<std::string, Tensor<float>>> export_params(const ParamStore<double>&);

}  // namespace mmi
