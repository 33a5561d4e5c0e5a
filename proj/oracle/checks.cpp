#include "oracle/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "mmi/bench.hpp"
#include "mmi/gradcheck.hpp"
#include "mmi/imgdec.hpp"
#include "mmi/llm.hpp"
#include "mmi/ops.hpp"
#include "mmi/pipeline.hpp"
#include "mmi/tasks.hpp"
#include "oracle/llm_fixture.hpp"
#include "oracle/mmfs_fixture.hpp"
#include "oracle/pipeline_fixture.hpp"

namespace mmi::checks {

namespace {

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  return max_abs_diff<double>(a, std::span<const double>(b));
}

template <typename T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

std::string fmt(const char* format, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, value);
  return buf;
}

std::uint64_t seed_of(const Options& o) { return static_cast<std::uint64_t>(o.config.get_int("seed")); }

std::vector<std::int64_t> iota_ids(std::int64_t n) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 7) {
  Philox rng(seed);
  return sum(mul(y, Tensor<double>::randn(y.shape(), rng)));
}

LLMConfig tiny_llm(const Options& o, bool mmfs) {
  LLMConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_mult = 2;
  c.text_vocab = 13;
  c.mmfs_every = 2;
  c.max_context = 160;
  c.use_mmfs = mmfs;
  c.mmfs_points = 2;
  c.alpha_init = o.config.get_float("alpha_init");
  c.strict_visibility = o.config.get_bool("strict_visibility");
  return c;
}

DenoiserConfig tiny_denoiser(bool mmfs) {
  DenoiserConfig c;
  c.image_size = 8;
  c.image_channels = 3;
  c.base_channels = 8;
  c.depth = 2;
  c.cond_tokens = 3;
  c.cond_dim = 5;
  c.use_mmfs = mmfs;
  c.mmfs_feature_dim = 6;
  c.mmfs_points = 2;
  c.mmfs_max_images = 2;
  c.schedule_steps = 20;
  return c;
}

template <typename T>
ImagePyramid<T> random_pyramid(const DenoiserConfig& c, Philox& rng) {
  ImagePyramid<T> p;
  for (std::int64_t l = 0; l < c.mmfs_levels; ++l) {
    const auto s = std::int64_t{4} >> l;
    p.levels.push_back(Tensor<T>::randn({s, s, c.mmfs_feature_dim}, rng));
  }
  p.height = p.width = 32;
  return p;
}

template <typename T>
oracle::LLMInputs<T> random_llm_inputs(const LLMConfig& cfg, Philox& rng, std::int64_t parts) {
  std::int64_t next = 0;
  const auto elements = oracle::random_elements(rng, cfg.text_vocab, parts, next);
  return oracle::random_inputs<T>(build(elements, 3, cfg.vocab()), cfg, 4, rng);
}

Result finish(const std::string& id, const std::string& module, double metric, double tol, std::string detail,
              bool le = true) {
  return {id, module, le ? metric <= tol : metric < tol, metric, tol, std::move(detail)};
}

// ---------------------------------------------------------------- MMFS

Result mmfs_oracle(const Options& o) {
  const int configs = o.quick ? 40 : 200;
  Philox rng = Philox(0x1001 + seed_of(o));
  double worst = 0;
  int covered = 0;
  for (int trial = 0; trial < configs; ++trial) {
    oracle::MMFSCaseSpec spec;
    spec.images = 1 + trial % 3;
    spec.levels = (trial / 3) % 2 ? 3 : 1;
    spec.points = (trial / 6) % 2 ? 4 : 1;
    const std::int64_t sizes[] = {2, 4, 8};
    spec.base_size = spec.levels == 3 ? 8 : sizes[(trial / 12) % 3];
    spec.heads = trial % 5 == 0 ? 2 : 1;
    spec.queries = 4;
    spec.offset_scale = 0.5;
    auto c = oracle::make_mmfs_case(spec, rng);
    const auto plan = c.module->plan(c.queries, c.refs, iota_ids(spec.images));
    const auto out = c.module->sample(c.pointers(), plan);
    const auto w = c.weights();
    const auto maps = c.maps();
    for (std::int64_t q = 0; q < spec.queries; ++q) {
      const oracle::Vec fq(c.queries.data().begin() + q * spec.query_dim,
                           c.queries.data().begin() + (q + 1) * spec.query_dim);
      const auto expect = oracle::mmfs_plan(w, fq, c.refs[2 * q], c.refs[2 * q + 1], spec.images);
      const auto fo = oracle::mmfs_sample(maps, c.config.feature_dim, spec.heads, spec.points, expect);
      const auto n_loc = static_cast<std::size_t>(expect.loc.size()), n_w = static_cast<std::size_t>(expect.w.size());
      worst = std::max(worst, max_abs_diff(plan.locations.data().subspan(q * n_loc, n_loc), expect.loc));
      worst = std::max(worst, max_abs_diff(plan.weights.data().subspan(q * n_w, n_w), expect.w));
      worst = std::max(worst, max_abs_diff(out.data().subspan(static_cast<std::size_t>(q * c.config.feature_dim),
                                                              static_cast<std::size_t>(c.config.feature_dim)),
                                           fo));
    }
    ++covered;
  }
  return finish("mmfs.oracle", "mmfs", worst, 1e-10,
                std::to_string(covered) + " configs over M in {1,2,3}, L in {1,3}, K in {1,4}, sizes {2,4,8}; max abs err " +
                    fmt("%.3g", worst));
}

Result mmfs_normalization(const Options& o) {
  const std::int64_t total = o.quick ? 2000 : 10000;
  Philox rng(0x1002 + seed_of(o));
  double worst = 0;
  std::int64_t queries = 0;
  bool negative = false;
  while (queries < total) {
    oracle::MMFSCaseSpec spec;
    spec.images = rng.uniform_int(1, 7);
    spec.levels = rng.bernoulli(0.5) ? 3 : 1;
    spec.points = rng.bernoulli(0.5) ? 4 : 1;
    spec.heads = rng.bernoulli(0.5) ? 2 : 1;
    spec.queries = 100;
    spec.base_size = 4;
    auto c = oracle::make_mmfs_case(spec, rng);
    const auto plan = c.module->plan(c.queries, c.refs, iota_ids(spec.images));
    const auto per_head = spec.images * spec.levels * spec.points;
    const auto w = plan.weights.data();
    for (std::int64_t g = 0; g < spec.queries * spec.heads; ++g) {
      double s = 0;
      for (std::int64_t i = 0; i < per_head; ++i) {
        const double v = w[static_cast<std::size_t>(g * per_head + i)];
        negative = negative || v < 0;
        s += v;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    queries += spec.queries;
  }
  auto r = finish("mmfs.normalization", "mmfs", worst, 1e-6,
                  std::to_string(queries) + " queries; max |sum A - 1| " + fmt("%.3g", worst));
  if (negative) {
    r.pass = false;
    r.detail += "; negative weight found";
  }
  return r;
}

Result mmfs_gradcheck(const Options& o) {
  Philox rng(0x1003 + seed_of(o));
  const int runs = o.quick ? 4 : 12;
  double worst = 0;
  int run = 0;
  std::string names;
  while (run < runs) {
    oracle::MMFSCaseSpec spec;
    spec.images = 1 + run % 3;
    spec.levels = run % 2 ? 3 : 1;
    spec.points = (run / 2) % 2 ? 4 : 1;
    spec.queries = 2;
    spec.query_dim = 3;
    spec.feature_dim = 2;
    spec.gate = run % 4 == 0 ? GateKind::Llm : GateKind::Decoder;
    auto c = oracle::make_mmfs_case(spec, rng);
    if (oracle::kink_margin(c) < 1e-3) continue;
    std::vector<NamedTensor> params(c.store->items().begin(), c.store->items().end());
    params.emplace_back("queries", c.queries);
    for (std::size_t m = 0; m < c.pyramids.size(); ++m) {
      for (std::size_t l = 0; l < c.pyramids[m].levels.size(); ++l) {
        params.emplace_back("pyr" + std::to_string(m) + "." + std::to_string(l), c.pyramids[m].levels[l]);
      }
    }
    const auto ptrs = c.pointers();
    const auto report =
        gradcheck([&] { return probe(c.module->apply(c.queries, c.refs, ptrs)); }, params, {.eps = 1e-5, .tol = 1e-4});
    worst = std::max(worst, report.worst_rel());
    ++run;
  }
  return finish("mmfs.gradcheck", "mmfs", worst, 1e-4,
                std::to_string(runs) + " configs, params + queries + pyramids; worst rel err " + fmt("%.3g", worst),
                false);
}

// ---------------------------------------------------------------- LLM

Result llm_gradcheck(const Options& o) {
  Philox rng(0x2001 + seed_of(o));
  auto cfg = tiny_llm(o, true);
  ParamStore<double> store;
  CausalLM<double> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  const std::vector<Element> e{Element::text({1, 2}), Element::img(0), Element::text({3, 4, 5}), Element::img(1),
                               Element::text({6})};
  auto in = oracle::random_inputs<double>(build(e, 3, cfg.vocab()), cfg, 4, rng);
  const auto ptrs = in.pointers();
  std::vector<NamedTensor> params(store.items().begin(), store.items().end());
  const auto report = gradcheck([&] { return lm.ntp_loss(lm.forward(in.seq, in.visual, ptrs).logits, in.seq); },
                                params, {.eps = 1e-5, .tol = 1e-4, .coords = o.quick ? 16 : 64});
  return finish("llm.gradcheck", "llm", report.worst_rel(), 1e-4,
                std::to_string(params.size()) + " tensors via ntp_loss; worst rel err " + fmt("%.3g", report.worst_rel()),
                false);
}

Result llm_zero_init(const Options& o) {
  Philox rng(0x2002 + seed_of(o));
  ParamStore<float> s1, s2;
  Philox r1(7), r2(7);
  CausalLM<float> with(tiny_llm(o, true), s1, "", r1), without(tiny_llm(o, false), s2, "", r2);
  double worst = 0;
  bool exact = true;
  const int trials = o.quick ? 5 : 20;
  for (int trial = 0; trial < trials; ++trial) {
    const auto in = random_llm_inputs<float>(with.config(), rng, 5);
    const auto a = with.forward(in.seq, in.visual, in.pointers());
    const auto b = without.forward(in.seq, in.visual, in.pointers());
    worst = std::max(worst, max_abs_diff<float>(a.logits.data(), b.logits.data()));
    exact = exact && bit_equal<float>(a.logits.data(), b.logits.data());
  }
  return finish("llm.zero_init", "llm", worst, 1e-6,
                std::to_string(trials) + " layouts, alpha_init " + o.config.get("alpha_init") + "; max abs diff " +
                    fmt("%.3g", worst) + (exact ? " (bitwise equal)" : ""));
}

Result llm_causality(const Options& o) {
  const int layouts = o.quick ? 20 : 100;
  Philox rng(0x2003 + seed_of(o));
  const auto cfg = tiny_llm(o, true);
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  const auto v = cfg.vocab().size();
  std::int64_t violations = 0, rows = 0;
  int done = 0, boundary = 0;
  auto row = [&](const Tensor<float>& t, std::int64_t p) {
    return t.data().subspan(static_cast<std::size_t>(p * v), static_cast<std::size_t>(v));
  };
  while (done < layouts) {
    // Two samples packed into one context.
    std::int64_t next = 0;
    std::vector<PackedSequence> samples;
    for (int s = 0; s < 2; ++s) samples.push_back(build(oracle::random_elements(rng, cfg.text_vocab, 5, next), 3, cfg.vocab()));
    auto packed = pack(samples, cfg.max_context);
    if (packed.size() != 1) continue;
    auto in = oracle::random_inputs<float>(packed[0], cfg, 4, rng);
    const auto ptrs = in.pointers();
    const auto base = lm.forward(in.seq, in.visual, ptrs).logits;
    const auto& seq = in.seq;

    // Slot perturbation: nothing before p or outside p's sample may change.
    const auto p = rng.uniform_int(1, seq.size());
    auto changed = seq;
    auto visual = in.visual;
    auto& slot = changed.stream[static_cast<std::size_t>(p)];
    bool perturbed = true;
    if (slot.kind == SlotKind::Image) {
      auto copy = visual[static_cast<std::size_t>(slot.value)].clone();
      copy.data_mut()[static_cast<std::size_t>(slot.index * cfg.d_model)] += 1.0f;
      visual[static_cast<std::size_t>(slot.value)] = copy;
    } else if (slot.kind == SlotKind::Text) {
      slot.value = (slot.value + 1) % cfg.text_vocab;
    } else {
      perturbed = false;
    }
    if (perturbed) {
      const auto out = lm.forward(changed, visual, ptrs).logits;
      for (std::int64_t q = 0; q < seq.size(); ++q) {
        const bool other = seq.segment[static_cast<std::size_t>(q)] != seq.segment[static_cast<std::size_t>(p)];
        if (q < p || other) {
          ++rows;
          if (!bit_equal<float>(row(out, q), row(base, q))) ++violations;
          boundary += other ? 1 : 0;
        }
      }
    }

    // Pyramid perturbation: only rows that see image j may change.
    if (!seq.images.empty()) {
      const auto j = rng.uniform_int(0, static_cast<std::int64_t>(seq.images.size()));
      auto pyramids = in.pyramids;
      for (auto& level : pyramids[static_cast<std::size_t>(j)].levels) {
        level = level.clone();
        for (auto& x : level.data_mut()) x += 0.5f;
      }
      std::vector<const ImagePyramid<float>*> pp;
      for (const auto& py : pyramids) pp.push_back(&py);
      const auto out = lm.forward(seq, in.visual, pp).logits;
      const auto vis = visibility(seq, cfg.strict_visibility);
      const auto boi = seq.boi_position(j);
      const auto seg = seq.segment[static_cast<std::size_t>(boi)];
      for (std::int64_t q = 0; q < seq.size(); ++q) {
        const auto& vq = vis[static_cast<std::size_t>(q)];
        const bool sees = std::find(vq.begin(), vq.end(), j) != vq.end();
        // Independent of visibility(): rows before the BoI or in another
        // sample can never see image j.
        const bool impossible = q < boi || seq.segment[static_cast<std::size_t>(q)] != seg;
        if (!sees || impossible) {
          ++rows;
          if (!bit_equal<float>(row(out, q), row(base, q))) ++violations;
        }
        if (impossible && sees) ++violations;
      }
    }
    ++done;
  }
  return finish("llm.causality", "llm", static_cast<double>(violations), 0,
                std::to_string(done) + " packed layouts, " + std::to_string(rows) + " rows compared bitwise (" +
                    std::to_string(boundary) + " across sample boundaries); " + std::to_string(violations) +
                    " violations");
}

Result llm_incremental(const Options& o) {
  Philox rng(0x2004 + seed_of(o));
  const auto cfg = tiny_llm(o, true);
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  double worst = 0;
  const auto v = cfg.vocab().size();
  for (int trial = 0; trial < (o.quick ? 3 : 10); ++trial) {
    auto in = random_llm_inputs<float>(cfg, rng, 7);
    const auto ptrs = in.pointers();
    const auto full = lm.forward(in.seq, in.visual, ptrs);
    const auto vis = visibility(in.seq, cfg.strict_visibility);
    auto cache = lm.new_cache();
    std::int64_t p = 0;
    while (p < in.seq.size()) {
      const auto n = std::min<std::int64_t>(rng.uniform_int(1, 4), in.seq.size() - p);
      const std::span<const Slot> slots(in.seq.stream.data() + p, static_cast<std::size_t>(n));
      const std::vector<std::vector<std::int64_t>> rows(vis.begin() + p, vis.begin() + p + n);
      const auto out = lm.step(cache, lm.embed(slots, in.visual), rows, ptrs);
      worst = std::max(worst, max_abs_diff<float>(out.logits.data(), full.logits.data().subspan(
                                                                          static_cast<std::size_t>(p * v),
                                                                          static_cast<std::size_t>(n * v))));
      p += n;
    }
  }
  return finish("llm.incremental", "llm", worst, 1e-5, "KV-cache steps vs full forward; max abs diff " + fmt("%.3g", worst));
}

// ---------------------------------------------------------------- image decoder

Result imgdec_gradcheck(const Options& o) {
  Philox rng(0x3001 + seed_of(o));
  const auto cfg = tiny_denoiser(true);
  ParamStore<double> store;
  Denoiser<double> net(cfg, store, "", rng);
  for (auto& [name, t] : store.items()) {
    auto h = t;
    const bool offsets = name.ends_with("mmfs.wp") || name.ends_with("mmfs.bp");
    for (auto& x : h.data_mut()) x += (offsets ? 0.02 : 0.1) * rng.normal();
  }
  const auto x0 = Tensor<double>::uniform({1, 8, 8, 3}, rng, -1, 1);
  const std::vector<Tensor<double>> conds{Tensor<double>::randn({3, 5}, rng)};
  const auto p0 = random_pyramid<double>(cfg, rng), p1 = random_pyramid<double>(cfg, rng);
  const std::vector<PyramidSet<double>> sets{{&p0, &p1}};
  const auto draw = net.draw(x0.shape(), rng);
  std::vector<NamedTensor> params(store.items().begin(), store.items().end());
  const auto report = gradcheck([&] { return net.nip_loss(x0, conds, sets, draw); }, params,
                                {.eps = 1e-5, .tol = 1e-4, .coords = o.quick ? 8 : 16});
  return finish("imgdec.gradcheck", "imgdec", report.worst_rel(), 1e-4,
                std::to_string(params.size()) + " tensors via nip_loss; worst rel err " + fmt("%.3g", report.worst_rel()),
                false);
}

Result imgdec_zero_init(const Options& o) {
  Philox rng(0x3002 + seed_of(o));
  ParamStore<float> s1, s2;
  Philox r1(3), r2(3);
  const auto cfg = tiny_denoiser(true);
  Denoiser<float> with(cfg, s1, "", r1), without(tiny_denoiser(false), s2, "", r2);
  double worst = 0;
  bool exact = true;
  for (int trial = 0; trial < (o.quick ? 3 : 10); ++trial) {
    const auto p0 = random_pyramid<float>(cfg, rng), p1 = random_pyramid<float>(cfg, rng);
    const std::vector<PyramidSet<float>> sets{{&p0, &p1}, {&p1}};
    const auto x = Tensor<float>::randn({2, 8, 8, 3}, rng);
    const std::vector<std::int64_t> t{rng.uniform_int(1, 21), rng.uniform_int(1, 21)};
    const std::vector<Tensor<float>> conds{Tensor<float>::randn({3, 5}, rng), Tensor<float>::randn({2, 5}, rng)};
    const auto a = with.denoise(x, t, conds, sets), b = without.denoise(x, t, conds, sets);
    worst = std::max(worst, max_abs_diff<float>(a.data(), b.data()));
    exact = exact && bit_equal<float>(a.data(), b.data());
  }
  return finish("imgdec.zero_init", "imgdec", worst, 1e-6,
                "denoiser with vs without MMFS at init; max abs diff " + fmt("%.3g", worst) +
                    (exact ? " (bitwise equal)" : ""));
}

// ---------------------------------------------------------------- pipeline

Result pipeline_generation(const Options& o) {
  const auto c = oracle::tiny_model_config();
  Model<float> model(c, 16 + seed_of(o));
  Philox rng(17 + seed_of(o));
  const std::vector<Tensor<float>> prompt_images{oracle::random_image<float>(c, rng)};
  const std::vector<Element> prompt{Element::text({1, 2}), Element::img(0), Element::text({3})};
  GenerateConfig g;
  g.max_new = 8;
  g.temperature = 1.0;
  g.diffusion_steps = 4;
  g.seed = 21 + seed_of(o);
  g.logits_hook = [&](std::int64_t step, std::vector<double>& logits) {
    if (step == 2) logits[static_cast<std::size_t>(c.llm.vocab().boi())] = 1e3;
    if (step < 7) logits[static_cast<std::size_t>(c.llm.vocab().eos())] = -1e3;
  };
  const auto a = generate(model, prompt, prompt_images, g);
  const auto b = generate(model, prompt, prompt_images, g);
  std::int64_t mismatches = a.elements == b.elements ? 0 : 1;
  if (a.images.size() != b.images.size()) ++mismatches;
  for (std::size_t i = 0; i < std::min(a.images.size(), b.images.size()); ++i) {
    if (!bit_equal<float>(a.images[i].data(), b.images[i].data())) ++mismatches;
  }
  return finish("pipeline.generation", "pipeline", static_cast<double>(mismatches), 0,
                "two seeded runs, " + std::to_string(a.elements.size()) + " elements, " +
                    std::to_string(a.images.size()) + " generated images; " + std::to_string(mismatches) +
                    " mismatches");
}

Result pipeline_checkpoint(const Options& o) {
  const auto c = oracle::tiny_model_config();
  Model<float> model(c, 11 + seed_of(o));
  Checkpoint ckpt{{{"d_model", "16"}}, export_params(model.params())};
  const auto path = (std::filesystem::temp_directory_path() / ("mmi_check_" + std::to_string(::getpid()) + ".mmi")).string();
  write_checkpoint(path, ckpt);
  const auto back = read_checkpoint(path);
  std::remove(path.c_str());
  Model<float> other(c, 12 + seed_of(o));
  load_params(back, other.params());
  std::int64_t differing = back.config == ckpt.config ? 0 : 1;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    if (!bit_equal<float>(model.params().items()[i].second.data(), other.params().items()[i].second.data())) ++differing;
  }
  return finish("pipeline.checkpoint", "pipeline", static_cast<double>(differing), 0,
                std::to_string(model.params().size()) + " tensors saved and reloaded; " + std::to_string(differing) +
                    " differ");
}

// ---------------------------------------------------------------- bench

Result bench_ratio(const Options&) {
  const auto dense = bench::count_flops(bench::scale_preset(256, false));
  const auto sparse = bench::count_flops(bench::scale_preset(32, true));
  const double ratio = dense.llm() / (sparse.llm() + sparse.mmfs);
  Result r{"bench.token_ratio", "bench", std::abs(ratio - 2.8) <= 0.3 * 2.8, ratio, 0.3,
           "LLM FLOPs 256 tokens without MMFS / 32 tokens with MMFS = " + fmt("%.3f", ratio) +
               " (target 2.8 +- 30%, T = " + std::to_string(dense.tokens) + " vs " + std::to_string(sparse.tokens) +
               ")"};
  return r;
}

Result bench_overhead(const Options&) {
  const auto base = bench::count_flops(bench::scale_preset(32, false));
  const auto with = bench::count_flops(bench::scale_preset(32, true));
  const double overhead = with.mmfs / base.llm();
  return finish("bench.mmfs_overhead", "bench", overhead, 0.05,
                "MMFS FLOPs / 32-token LLM FLOPs = " + fmt("%.4f", overhead));
}

Result bench_sweep(const Options&) {
  const auto rows = bench::sweep(bench::figure_grid());
  std::int64_t violations = 0, points = 0;
  for (const auto& r : rows) {
    if (r.scenario.variant != "mmfs32") continue;
    ++points;
    for (const auto& other : rows) {
      if (other.scenario.images != r.scenario.images || other.scenario.text_tokens != r.scenario.text_tokens) continue;
      if ((other.scenario.variant == "dense32" || other.scenario.variant == "nv256") &&
          r.flops.total() > other.flops.total()) {
        ++violations;
      }
    }
  }
  return finish("bench.sweep", "bench", static_cast<double>(violations), 0,
                std::to_string(points) + " grid points; MMFS curve above dense or 256-token curve at " +
                    std::to_string(violations));
}

// ---------------------------------------------------------------- training

Result train_lm(const Options& o) {
  auto model_cfg = o.config.model();
  const auto train_cfg = o.config.train();
  const auto steps = o.config.get_int("steps");
  Model<float> model(model_cfg, seed_of(o));
  Trainer<float> trainer(model, train_cfg);
  const auto corpus = tasks::corpus_for<float>("lm", model_cfg, o.config.get_int("samples"), seed_of(o));
  const auto log = tasks::train_corpus(trainer, corpus, steps, o.config.get_int("batch_size"),
                                       model_cfg.llm.max_context, seed_of(o));
  const double last = log.empty() ? INFINITY : log.back().ntp;
  return finish("train.lm_overfit", "pipeline", last, 0.1,
                std::to_string(corpus.size()) + " sequences, " + std::to_string(steps) + " steps; final ntp " +
                    fmt("%.4f", last),
                false);
}

Result train_blob(const Options& o) {
  tasks::BlobConfig bc;
  bc.seed = seed_of(o);
  const auto r = tasks::run_blob(bc, 0);
  std::int64_t rises = 0;
  double worst = -INFINITY;
  std::ostringstream windows;
  for (std::size_t i = 0; i < r.window_means.size(); ++i) {
    windows << (i ? " " : "") << fmt("%.4f", r.window_means[i]);
    if (i > 0) {
      const double step = r.window_means[i] - r.window_means[i - 1];
      worst = std::max(worst, step);
      if (step >= 0) ++rises;
    }
  }
  Result res = finish("train.blob_monotone", "imgdec", static_cast<double>(rises), 0,
                      std::to_string(bc.steps) + " steps, 100-step window means: " + windows.str());
  if (r.window_means.size() < 2) res.pass = false;
  return res;
}

Result copy_ablation(const Options& o) {
  std::ostringstream detail;
  double worst = 0;
  bool pass = true;
  for (std::uint64_t s = 0; s < 3; ++s) {
    tasks::CopyConfig cc;
    cc.seed = seed_of(o) * 3 + s;
    cc.mmfs = true;
    const auto with = tasks::run_copy(cc);
    cc.mmfs = false;
    const auto without = tasks::run_copy(cc);
    const double ratio = with.mse / without.mse;
    worst = std::max(worst, ratio);
    pass = pass && ratio <= 0.5;
    detail << (s ? "; " : "") << "seed " << cc.seed << ": " << fmt("%.4f", with.mse) << " vs "
           << fmt("%.4f", without.mse) << " (" << fmt("%.3f", ratio) << ")";
  }
  return {"train.copy_ablation", "imgdec", pass, worst, 0.5, "MSE with / without MMFS, " + detail.str()};
}

}  // namespace

const char* suite_name(Suite suite) {
  switch (suite) {
    case Suite::Invariant: return "invariant";
    case Suite::Training: return "training";
    case Suite::Reconstruction: return "reconstruction";
  }
  return "?";
}

const std::vector<Check>& registry() {
  static const std::vector<Check> checks = {
      {"mmfs.oracle", "mmfs", 1, Suite::Invariant, mmfs_oracle},
      {"mmfs.gradcheck", "mmfs", 2, Suite::Invariant, mmfs_gradcheck},
      {"llm.gradcheck", "llm", 2, Suite::Invariant, llm_gradcheck},
      {"imgdec.gradcheck", "imgdec", 2, Suite::Invariant, imgdec_gradcheck},
      {"llm.zero_init", "llm", 3, Suite::Invariant, llm_zero_init},
      {"imgdec.zero_init", "imgdec", 3, Suite::Invariant, imgdec_zero_init},
      {"llm.causality", "llm", 4, Suite::Invariant, llm_causality},
      {"mmfs.normalization", "mmfs", 5, Suite::Invariant, mmfs_normalization},
      {"bench.token_ratio", "bench", 6, Suite::Reconstruction, bench_ratio},
      {"bench.mmfs_overhead", "bench", 6, Suite::Invariant, bench_overhead},
      {"bench.sweep", "bench", 6, Suite::Invariant, bench_sweep},
      {"train.copy_ablation", "imgdec", 7, Suite::Training, copy_ablation},
      {"train.lm_overfit", "pipeline", 8, Suite::Training, train_lm},
      {"train.blob_monotone", "imgdec", 8, Suite::Training, train_blob},
      {"pipeline.generation", "pipeline", 9, Suite::Invariant, pipeline_generation},
      {"pipeline.checkpoint", "pipeline", 9, Suite::Invariant, pipeline_checkpoint},
      {"llm.incremental", "llm", 9, Suite::Invariant, llm_incremental},
  };
  return checks;
}

Result run_check(const Check& check, const Options& options) {
  try {
    return check.run(options);
  } catch (const std::exception& e) {
    return {check.id, check.module, false, NAN, NAN, std::string("exception: ") + e.what()};
  }
}

}  // namespace mmi::checks
