#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmi/bench.hpp"
#include "mmi/config.hpp"
#include "mmi/errors.hpp"
#include "mmi/imgdec.hpp"
#include "mmi/ops.hpp"
#include "mmi/pipeline.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/sequence.hpp"
#include "mmi/tasks.hpp"
#include "oracle/checks.hpp"

namespace py = pybind11;
using namespace mmi;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<double> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  auto* dst = out.mutable_data();
  const auto src = t.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
  return out;
}

std::vector<Element> parse_elements(const py::list& items) {
  // Each item is a list of token ids (text) or an int (image id).
  std::vector<Element> out;
  for (const auto& item : items) {
    if (py::isinstance<py::int_>(item)) {
      out.push_back(Element::img(item.cast<std::int64_t>()));
    } else {
      out.push_back(Element::text(item.cast<std::vector<std::int64_t>>()));
    }
  }
  return out;
}

py::list element_list(const std::vector<Element>& elements) {
  py::list out;
  for (const auto& e : elements) {
    if (e.kind == Element::Kind::Text) {
      out.append(py::cast(e.tokens));
    } else {
      out.append(py::int_(e.image));
    }
  }
  return out;
}

const char* slot_name(SlotKind k) {
  switch (k) {
    case SlotKind::BoS: return "bos";
    case SlotKind::EoS: return "eos";
    case SlotKind::BoI: return "boi";
    case SlotKind::Text: return "text";
    case SlotKind::Image: return "image";
  }
  return "?";
}

py::dict sequence_dict(const PackedSequence& seq, const Vocab& vocab) {
  py::list kinds, values;
  for (const auto& s : seq.stream) {
    kinds.append(slot_name(s.kind));
    values.append(s.value);
  }
  py::dict d;
  d["kinds"] = kinds;
  d["values"] = values;
  d["token_ids"] = seq.token_ids(vocab);
  d["images"] = seq.images;
  d["segment"] = seq.segment;
  d["position"] = seq.position;
  d["visibility"] = visibility(seq);
  return d;
}

bench::CostScenario scenario_from(const py::dict& d) {
  bench::CostScenario s;
  for (const auto& [k, v] : d) {
    const auto key = k.cast<std::string>();
    if (key == "variant") s.variant = v.cast<std::string>();
    else if (key == "d_model") s.d_model = v.cast<std::int64_t>();
    else if (key == "layers") s.layers = v.cast<std::int64_t>();
    else if (key == "vocab") s.vocab = v.cast<std::int64_t>();
    else if (key == "visual_tokens") s.visual_tokens = v.cast<std::int64_t>();
    else if (key == "images") s.images = v.cast<std::int64_t>();
    else if (key == "text_tokens") s.text_tokens = v.cast<std::int64_t>();
    else if (key == "mmfs") s.mmfs = v.cast<bool>();
    else if (key == "dense_cross_attn") s.dense_cross_attn = v.cast<bool>();
    else if (key == "max_images") s.max_images = v.cast<std::int64_t>();
    else if (key == "levels") s.levels = v.cast<std::int64_t>();
    else if (key == "points") s.points = v.cast<std::int64_t>();
    else if (key == "period") s.period = v.cast<std::int64_t>();
    else if (key == "pyramid_cells") s.pyramid_cells = v.cast<std::int64_t>();
    else if (key == "context") s.context = v.cast<std::int64_t>();
    else throw ConfigError("unknown scenario field '" + key + "'");
  }
  return s;
}

py::dict flops_dict(const bench::FlopBreakdown& f) {
  py::dict d;
  d["self_attn"] = f.self_attn;
  d["ffn"] = f.ffn;
  d["mmfs"] = f.mmfs;
  d["cross_attn"] = f.cross_attn;
  d["head"] = f.head;
  d["llm"] = f.llm();
  d["total"] = f.total();
  d["tokens"] = f.tokens;
  d["overflow"] = f.overflow;
  return d;
}

RunConfig config_from(const py::dict& values) {
  RunConfig c;
  for (const auto& [k, v] : values) c.set(k.cast<std::string>(), py::str(v).cast<std::string>());
  return c;
}

// Float model loaded from a checkpoint or built from config values.
class PyModel {
 public:
  explicit PyModel(const py::dict& values) : config_(config_from(values)), model_(make(config_)) {}

  static std::unique_ptr<PyModel> load(const std::string& path) {
    const auto ckpt = read_checkpoint(path);
    py::dict values;
    for (const auto& [k, v] : ckpt.config) values[py::str(k)] = v;
    auto m = std::make_unique<PyModel>(values);
    load_params(ckpt, m->model_->params());
    return m;
  }

  [[nodiscard]] std::size_t num_tensors() const { return model_->params().size(); }
  [[nodiscard]] std::int64_t num_parameters() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : model_->params().items()) n += t.numel();
    return n;
  }
  [[nodiscard]] py::dict config() const {
    py::dict d;
    for (const auto& [k, v] : config_.values()) d[py::str(k)] = v;
    return d;
  }

  py::dict generate(const py::list& prompt, const std::vector<Array>& images, std::int64_t max_new, double temperature,
                    double guidance, std::int64_t diffusion_steps, std::uint64_t seed) {
    GenerateConfig g;
    g.max_new = max_new;
    g.temperature = temperature;
    g.guidance = guidance;
    g.diffusion_steps = diffusion_steps;
    g.seed = seed;
    std::vector<Tensor<float>> prompt_images;
    for (const auto& a : images) prompt_images.push_back(to_tensor(a).cast<float>());
    const auto r = mmi::generate(*model_, parse_elements(prompt), prompt_images, g);
    py::list out_images;
    for (const auto& im : r.images) out_images.append(to_array(im));
    py::dict d;
    d["elements"] = element_list(r.elements);
    d["images"] = out_images;
    return d;
  }

  std::vector<py::dict> train(const std::string& task, std::int64_t steps) {
    if (!trainer_) trainer_ = std::make_unique<Trainer<float>>(*model_, config_.train());
    const auto seed = static_cast<std::uint64_t>(config_.get_int("seed"));
    const auto corpus = tasks::corpus_for<float>(task, config_.model(), config_.get_int("samples"), seed);
    std::vector<py::dict> out;
    for (const auto& l : tasks::train_corpus(*trainer_, corpus, steps, config_.get_int("batch_size"),
                                             config_.model().llm.max_context, seed)) {
      py::dict d;
      d["step"] = l.step;
      d["ntp"] = l.ntp;
      d["nip"] = l.nip;
      d["total"] = l.total;
      d["wall_ms"] = l.wall_ms;
      out.push_back(d);
    }
    return out;
  }

  void save(const std::string& path) const {
    write_checkpoint(path, {config_.values(), export_params(model_->params())});
  }

 private:
  static std::unique_ptr<Model<float>> make(const RunConfig& c) {
    return std::make_unique<Model<float>>(c.model(), static_cast<std::uint64_t>(c.get_int("seed")));
  }
  RunConfig config_;
  std::unique_ptr<Model<float>> model_;
  std::unique_ptr<Trainer<float>> trainer_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Interleaved image-text toy model: MMFS sampling, sequences, FLOPs model, training and generation.";

  const auto& base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<FormatError>(m, "FormatError", base);

  m.def(
      "bilinear_sample",
      [](const Array& map, const Array& points) {
        NoGradGuard guard;
        return to_array(bilinear_sample(to_tensor(map), to_tensor(points)));
      },
      py::arg("map"), py::arg("points"), "Sample map[H, W, C] at normalized (u, v) points[P, 2].");

  m.def(
      "deform_attn",
      [](const std::vector<std::vector<Array>>& levels, const Array& locations, const Array& weights) {
        NoGradGuard guard;
        std::vector<std::vector<Tensor<double>>> maps;
        for (const auto& image : levels) {
          std::vector<Tensor<double>> ls;
          for (const auto& l : image) ls.push_back(to_tensor(l));
          maps.push_back(std::move(ls));
        }
        return to_array(deform_attn(maps, to_tensor(locations), to_tensor(weights)));
      },
      py::arg("levels"), py::arg("locations"), py::arg("weights"),
      "Multi-image multi-scale deformable aggregation: levels[m][l] is [H, W, C], locations "
      "[Q, M, heads, K, 2], weights [Q, heads, M, L, K].");

  m.def(
      "build_sequence",
      [](const py::list& elements, std::int64_t tokens_per_image, std::int64_t text_vocab) {
        const Vocab vocab{text_vocab};
        return sequence_dict(build(parse_elements(elements), tokens_per_image, vocab), vocab);
      },
      py::arg("elements"), py::arg("tokens_per_image"), py::arg("text_vocab"),
      "Elements are token-id lists (text) or ints (image ids).");

  m.def(
      "pack_sequences",
      [](const std::vector<py::list>& samples, std::int64_t tokens_per_image, std::int64_t text_vocab,
         std::int64_t max_len) {
        const Vocab vocab{text_vocab};
        std::vector<PackedSequence> seqs;
        for (const auto& s : samples) seqs.push_back(build(parse_elements(s), tokens_per_image, vocab));
        std::vector<py::dict> out;
        for (const auto& p : pack(seqs, max_len)) out.push_back(sequence_dict(p, vocab));
        return out;
      },
      py::arg("samples"), py::arg("tokens_per_image"), py::arg("text_vocab"), py::arg("max_len"));

  m.def(
      "alpha_bar",
      [](std::int64_t t, std::int64_t steps, double beta_first, double beta_last) {
        return NoiseSchedule(steps, beta_first, beta_last).alpha_bar(t);
      },
      py::arg("t"), py::arg("steps") = 100, py::arg("beta_first") = 1e-4, py::arg("beta_last") = 0.02);

  m.def(
      "count_flops", [](const py::dict& scenario) { return flops_dict(bench::count_flops(scenario_from(scenario))); },
      py::arg("scenario"), "FLOPs breakdown for a scenario given as a dict of CostScenario fields.");
  m.def(
      "scale_preset",
      [](std::int64_t visual_tokens, bool mmfs) {
        return flops_dict(bench::count_flops(bench::scale_preset(visual_tokens, mmfs)));
      },
      py::arg("visual_tokens"), py::arg("mmfs"));
  m.def(
      "sweep_csv",
      [](const std::vector<std::int64_t>& images, const std::vector<std::int64_t>& text_tokens) {
        return bench::sweep_csv(bench::sweep(bench::figure_grid(images, text_tokens)));
      },
      py::arg("images") = std::vector<std::int64_t>{1, 2, 3, 4, 5, 6, 7, 8},
      py::arg("text_tokens") = std::vector<std::int64_t>{32, 128, 256});

  m.def("config_defaults", [] {
    const RunConfig defaults;
    py::dict d;
    for (const auto& [k, v] : defaults.values()) d[py::str(k)] = v;
    return d;
  });
  m.def(
      "parse_config",
      [](const std::string& text) {
        RunConfig c;
        c.merge_text(text, "<python>");
        py::dict d;
        for (const auto& [k, v] : c.values()) d[py::str(k)] = v;
        return d;
      },
      py::arg("text"));

  m.def(
      "selftest",
      [](const std::vector<std::string>& modules, const py::dict& overrides, bool quick) {
        checks::Options options{config_from(overrides), quick};
        std::vector<py::dict> out;
        for (const auto& check : checks::registry()) {
          if (check.suite != checks::Suite::Invariant) continue;
          if (!modules.empty() && std::find(modules.begin(), modules.end(), check.module) == modules.end()) continue;
          const auto r = checks::run_check(check, options);
          py::dict d;
          d["id"] = r.id;
          d["module"] = r.module;
          d["pass"] = r.pass;
          d["metric"] = r.metric;
          d["tolerance"] = r.tolerance;
          d["detail"] = r.detail;
          out.push_back(d);
        }
        return out;
      },
      py::arg("modules") = std::vector<std::string>{}, py::arg("overrides") = py::dict(), py::arg("quick") = true,
      "Run the invariant checks; returns one dict per check.");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::dict&>(), py::arg("config") = py::dict())
      .def_static("load", &PyModel::load, py::arg("path"))
      .def_property_readonly("num_tensors", &PyModel::num_tensors)
      .def_property_readonly("num_parameters", &PyModel::num_parameters)
      .def_property_readonly("config", &PyModel::config)
      .def("generate", &PyModel::generate, py::arg("prompt"), py::arg("images") = std::vector<Array>{},
           py::arg("max_new") = 16, py::arg("temperature") = 0.0, py::arg("guidance") = 3.5,
           py::arg("diffusion_steps") = 0, py::arg("seed") = 0)
      .def("train", &PyModel::train, py::arg("task") = "lm", py::arg("steps") = 10)
      .def("save", &PyModel::save, py::arg("path"));
}
