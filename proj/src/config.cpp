#include "mmi/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace mmi {

namespace {

using Type = RunConfig::Type;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_float(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  in >> out;
  return !in.fail() && in.eof();
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

const RunConfig::Key* find_key(const std::string& name) {
  const auto& keys = RunConfig::schema();
  const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == name; });
  return it == keys.end() ? nullptr : &*it;
}

// Keys that define the architecture; checkpoints echo these.
constexpr const char* kModelKeys[] = {
    "d_model",       "layers",         "heads",          "ffn_mult",        "text_vocab",   "mmfs_every",
    "max_context",   "llm_mmfs",       "mmfs_levels",    "mmfs_points",     "mmfs_max_images", "mmfs_heads",
    "alpha_init",    "strict_visibility", "visual_tokens", "resampler_depth", "encoder_scale", "image_size",
    "image_channels", "dec_base_channels", "dec_depth",   "cond_tokens",     "cond_dim",     "dec_mmfs",
    "dec_mmfs_points", "dec_mmfs_heads", "schedule_steps", "beta_first",     "beta_last"};

}  // namespace

const std::vector<RunConfig::Key>& RunConfig::schema() {
  static const std::vector<Key> keys = {
      {"seed", Type::Int, "0", "root seed of every random stream", {}},
      {"task", Type::String, "lm", "training task", {"lm", "copy", "story", "blob"}},
      {"d_model", Type::Int, "32", "LLM width C (also pyramid channels)", {}},
      {"layers", Type::Int, "2", "LLM blocks", {}},
      {"heads", Type::Int, "2", "LLM attention heads", {}},
      {"ffn_mult", Type::Int, "2", "feed-forward expansion", {}},
      {"text_vocab", Type::Int, "32", "text token ids [0, text_vocab)", {}},
      {"mmfs_every", Type::Int, "2", "MMFS in LLM layer i when (i+1) % mmfs_every == 0", {}},
      {"max_context", Type::Int, "192", "slots per packed context", {}},
      {"llm_mmfs", Type::Bool, "true", "MMFS layers in the LLM", {}},
      {"mmfs_levels", Type::Int, "3", "pyramid levels L", {}},
      {"mmfs_points", Type::Int, "4", "LLM sampling points K", {}},
      {"mmfs_max_images", Type::Int, "4", "reference image cap M-bar", {}},
      {"mmfs_heads", Type::Int, "1", "LLM MMFS heads", {}},
      {"alpha_init", Type::Float, "0", "initial LLM gate alpha", {}},
      {"strict_visibility", Type::Bool, "false", "hide an image until after its last slot", {}},
      {"visual_tokens", Type::Int, "4", "visual tokens N per image", {}},
      {"resampler_depth", Type::Int, "1", "blocks in both resamplers", {}},
      {"encoder_scale", Type::Int, "4", "nearest upscale before the pyramid encoder", {}},
      {"image_size", Type::Int, "16", "decoder image side", {}},
      {"image_channels", Type::Int, "3", "image channels", {}},
      {"dec_base_channels", Type::Int, "16", "decoder base channels", {}},
      {"dec_depth", Type::Int, "2", "decoder down/up stages", {}},
      {"cond_tokens", Type::Int, "16", "condition tokens N_c", {}},
      {"cond_dim", Type::Int, "32", "condition token width", {}},
      {"dec_mmfs", Type::Bool, "true", "MMFS after each decoder downsampling", {}},
      {"dec_mmfs_points", Type::Int, "4", "decoder sampling points K", {}},
      {"dec_mmfs_heads", Type::Int, "1", "decoder MMFS heads", {}},
      {"schedule_steps", Type::Int, "100", "diffusion steps T", {}},
      {"beta_first", Type::Float, "0.0001", "beta_1", {}},
      {"beta_last", Type::Float, "0.02", "beta_T", {}},
      {"steps", Type::Int, "500", "optimizer steps", {}},
      {"batch_size", Type::Int, "8", "samples per step", {}},
      {"samples", Type::Int, "64", "synthetic corpus size", {}},
      {"lambda", Type::Float, "10", "NIP loss weight", {}},
      {"dropout", Type::Float, "0.1", "condition dropout probability", {}},
      {"optimizer", Type::String, "adam", "update rule", {"adam", "sgd"}},
      {"lr", Type::Float, "0.003", "learning rate (non-decoder)", {}},
      {"decoder_lr", Type::Float, "0.003", "learning rate (decoder)", {}},
      {"beta1", Type::Float, "0.9", "Adam beta1", {}},
      {"beta2", Type::Float, "0.995", "Adam beta2", {}},
      {"adam_eps", Type::Float, "1e-06", "Adam epsilon", {}},
      {"grad_clip", Type::Float, "1", "global gradient norm clip, 0 disables", {}},
      {"log_every", Type::Int, "10", "steps between log lines", {}},
      {"max_new", Type::Int, "32", "generation budget", {}},
      {"temperature", Type::Float, "0", "sampling temperature, 0 is greedy", {}},
      {"guidance", Type::Float, "3.5", "classifier-free guidance scale", {}},
      {"sample_steps", Type::Int, "0", "diffusion sampling steps, 0 uses all", {}},
      {"corpus", Type::String, "", "JSON-lines corpus (empty: synthetic)", {}},
      {"out_dir", Type::String, "runs", "artifact directory", {}},
      {"checkpoint", Type::String, "", "checkpoint to resume from or generate with", {}},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.name] = k.fallback;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream text;
  text << in.rdbuf();
  RunConfig cfg;
  cfg.merge_text(text.str(), path);
  return cfg;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    try {
      set_assignment(body);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  std::int64_t i = 0;
  double f = 0;
  bool b = false;
  bool ok = true;
  switch (spec->type) {
    case Type::Int: ok = parse_int(value, i); break;
    case Type::Float: ok = parse_float(value, f); break;
    case Type::Bool: ok = parse_bool(value, b); break;
    case Type::String:
      ok = spec->choices.empty() || std::find(spec->choices.begin(), spec->choices.end(), value) != spec->choices.end();
      break;
  }
  if (!ok) throw ConfigError("invalid value '" + value + "' for config key '" + key + "'");
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  std::int64_t v = 0;
  if (!parse_int(get(key), v)) throw ConfigError("config key '" + key + "' is not an integer");
  return v;
}

double RunConfig::get_float(const std::string& key) const {
  double v = 0;
  if (!parse_float(get(key), v)) throw ConfigError("config key '" + key + "' is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(get(key), v)) throw ConfigError("config key '" + key + "' is not a boolean");
  return v;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  auto& l = m.llm;
  l.d_model = get_int("d_model");
  l.layers = get_int("layers");
  l.heads = get_int("heads");
  l.ffn_mult = get_int("ffn_mult");
  l.text_vocab = get_int("text_vocab");
  l.mmfs_every = get_int("mmfs_every");
  l.max_context = get_int("max_context");
  l.use_mmfs = get_bool("llm_mmfs");
  l.mmfs_levels = get_int("mmfs_levels");
  l.mmfs_points = get_int("mmfs_points");
  l.mmfs_max_images = get_int("mmfs_max_images");
  l.mmfs_heads = get_int("mmfs_heads");
  l.alpha_init = get_float("alpha_init");
  l.strict_visibility = get_bool("strict_visibility");
  auto& d = m.decoder;
  d.image_size = get_int("image_size");
  d.image_channels = get_int("image_channels");
  d.base_channels = get_int("dec_base_channels");
  d.depth = get_int("dec_depth");
  d.cond_tokens = get_int("cond_tokens");
  d.cond_dim = get_int("cond_dim");
  d.use_mmfs = get_bool("dec_mmfs");
  d.mmfs_points = get_int("dec_mmfs_points");
  d.mmfs_heads = get_int("dec_mmfs_heads");
  d.schedule_steps = get_int("schedule_steps");
  d.beta_first = get_float("beta_first");
  d.beta_last = get_float("beta_last");
  m.visual_tokens = get_int("visual_tokens");
  m.resampler_depth = get_int("resampler_depth");
  m.encoder_scale = get_int("encoder_scale");
  m.finalize();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.lambda = get_float("lambda");
  t.dropout = get_float("dropout");
  t.seed = static_cast<std::uint64_t>(get_int("seed"));
  auto& o = t.optimizer;
  o.kind = get("optimizer") == "sgd" ? OptimizerConfig::Kind::Sgd : OptimizerConfig::Kind::Adam;
  o.lr = get_float("lr");
  o.decoder_lr = get_float("decoder_lr");
  o.beta1 = get_float("beta1");
  o.beta2 = get_float("beta2");
  o.eps = get_float("adam_eps");
  o.grad_clip = get_float("grad_clip");
  return t;
}

GenerateConfig RunConfig::generation() const {
  GenerateConfig g;
  g.max_new = get_int("max_new");
  g.temperature = get_float("temperature");
  g.guidance = get_float("guidance");
  g.diffusion_steps = get_int("sample_steps");
  g.seed = static_cast<std::uint64_t>(get_int("seed"));
  return g;
}

std::map<std::string, std::string> RunConfig::model_keys() const {
  std::map<std::string, std::string> out;
  for (const char* k : kModelKeys) out[k] = get(k);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : schema()) out += k.name + "=" + get(k.name) + "\n";
  return out;
}

}  // namespace mmi
