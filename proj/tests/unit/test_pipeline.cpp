#include <cstdio>
#include <filesystem>
#include <fstream>
#include <tuple>

#include "helpers.hpp"
#include "mmi/ops.hpp"
#include "mmi/pipeline.hpp"
#include "oracle/pipeline_fixture.hpp"

using namespace mmi;
using namespace testing;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mmi_test_" + name)).string();
}

std::vector<TrainContext<double>> two_samples(const ModelConfig& c, Philox& rng) {
  std::vector<TrainContext<double>> batch;
  batch.push_back(oracle::make_context<double>(
      c, {Element::text({1, 2}), Element::img(0), Element::text({3}), Element::img(1), Element::text({4, 5})}, rng));
  batch.push_back(oracle::make_context<double>(c, {Element::img(0), Element::text({6, 7}), Element::img(1)}, rng));
  return batch;
}

}  // namespace

TEST_CASE("model config ties decoder MMFS to the LLM") {
  auto c = oracle::tiny_model_config();
  c.decoder.mmfs_feature_dim = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.finalize();
  CHECK_NOTHROW(c.validate());
  c.encoder_scale = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.encoder_scale = 2;  // 16 px input cannot hold three levels
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("loss additivity and lambda = 0") {
  const auto c = oracle::tiny_model_config();
  Model<double> model(c, 1);
  Philox rng(2);
  const auto batch = two_samples(c, rng);
  Philox a(3), b(3);
  const auto l = compute_losses(model, batch, 10.0, 0.1, a);
  CHECK(l.nip_images == 3);  // the second sample opens with an image
  CHECK(l.total.item() == l.ntp.item() + 10.0 * l.nip.item());
  const auto z = compute_losses(model, batch, 0.0, 0.1, b);
  CHECK(z.total.item() == z.ntp.item());
  CHECK(z.ntp.item() == l.ntp.item());
}

TEST_CASE("component losses replay from their parts") {
  const auto c = oracle::tiny_model_config();
  Model<double> model(c, 4);
  Philox rng(5);
  const auto batch = two_samples(c, rng);
  Philox draw(6);
  const auto l = compute_losses(model, batch, 10.0, 0.5, draw);

  // Replay with the same draw order: one Bernoulli per eligible image, then
  // the diffusion draw for the stacked batch.
  Philox replay(6);
  double ce_sum = 0;
  std::int64_t scored = 0;
  std::vector<Tensor<double>> x0s, conds;
  std::vector<PyramidSet<double>> sets;
  std::vector<std::vector<ImagePyramid<double>>> keep(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ctx = batch[i];
    std::vector<Tensor<double>> visual;
    keep[i].reserve(ctx.images.size());
    std::vector<const ImagePyramid<double>*> ptrs;
    for (const auto& img : ctx.images) {
      keep[i].push_back(model.pyramid(img));
      ptrs.push_back(&keep[i].back());
      visual.push_back(model.visual_tokens(keep[i].back()));
    }
    const auto out = model.llm().forward(ctx.seq, visual, ptrs);
    const auto t = ntp_targets(ctx.seq, c.llm.vocab());
    const auto n = std::count(t.mask.begin(), t.mask.end(), 1);
    ce_sum += model.llm().ntp_loss(out.logits, ctx.seq).item() * static_cast<double>(n);
    scored += n;
    for (std::int64_t j = 0; j < static_cast<std::int64_t>(ctx.images.size()); ++j) {
      const auto boi = ctx.seq.boi_position(j);
      if (boi == 1) continue;
      conds.push_back(replay.bernoulli(0.5) ? model.decoder().null_cond() : model.condition(out.hidden, 0, boi + 1));
      sets.push_back(PyramidSet<double>(ptrs.begin(), ptrs.begin() + j));
      x0s.push_back(reshape(ctx.images[j], {1, 8, 8, 3}));
    }
  }
  const double ntp = ce_sum / static_cast<double>(scored);
  const double nip = model.decoder().nip_loss(concat(x0s, 0), conds, sets, replay).item();
  CHECK(l.ntp.item() == doctest::Approx(ntp).epsilon(1e-12));
  CHECK(l.nip.item() == nip);
  CHECK(l.total.item() == doctest::Approx(ntp + 10.0 * nip).epsilon(1e-12));
}

TEST_CASE("sequence-initial images carry no diffusion loss or gradient") {
  const auto c = oracle::tiny_model_config();
  Model<double> model(c, 7);
  Philox rng(8);
  std::vector<TrainContext<double>> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(oracle::make_context<double>(c, {Element::img(0), Element::text({1, 2})}, rng));
  Philox draw(9);
  const auto l = compute_losses(model, batch, 10.0, 0.1, draw);
  CHECK(l.nip_images == 0);
  CHECK(l.nip.item() == 0.0);
  l.total.backward();
  for (const auto& [name, t] : model.params().with_prefix("dec.")) {
    for (double g : t.grad()) REQUIRE(g == 0.0);
  }
  double llm_grad = 0;
  for (const auto& [name, t] : model.params().with_prefix("llm.")) {
    for (double g : t.grad()) llm_grad += std::abs(g);
  }
  CHECK(llm_grad > 0);
}

TEST_CASE("a batch with nothing to score is an error") {
  const auto c = oracle::tiny_model_config();
  Model<double> model(c, 10);
  TrainContext<double> ctx;
  ctx.seq.stream = {Slot{SlotKind::BoS, 0, 0}};
  ctx.seq.segment = {0};
  ctx.seq.position = {0};
  Philox rng(1);
  CHECK_THROWS_AS((void)compute_losses(model, {ctx}, 10.0, 0.1, rng), EmptyInputError);
  CHECK_THROWS_AS((TrainConfig{-1.0}).validate(), ConfigError);
}

TEST_CASE("optimizer updates") {
  ParamStore<double> store;
  auto a = store.add("llm.a", Td::from({2}, {1.0, -2.0}));
  auto d = store.add("dec.b", Td::from({1}, {3.0}));
  auto set_grads = [&] {
    a.grad_mut()[0] = 0.5;
    a.grad_mut()[1] = -4.0;
    d.grad_mut()[0] = 2.0;
  };
  OptimizerConfig sgd{OptimizerConfig::Kind::Sgd, 0.1, 0.01, 0.9, 0.995, 1e-6, 0.0};
  Optimizer<double> opt(sgd, store);
  set_grads();
  opt.step();
  CHECK(a.data()[0] == 1.0 - 0.1 * 0.5);
  CHECK(a.data()[1] == -2.0 + 0.1 * 4.0);
  CHECK(d.data()[0] == 3.0 - 0.01 * 2.0);
  CHECK(a.grad()[0] == 0.0);

  // First Adam step moves each coordinate by lr·g/(|g| + eps).
  OptimizerConfig adam{OptimizerConfig::Kind::Adam, 0.1, 0.01, 0.9, 0.995, 1e-6, 0.0};
  Optimizer<double> opt2(adam, store);
  const double a0 = a.data()[0], d0 = d.data()[0];
  set_grads();
  opt2.step();
  CHECK(a.data()[0] == doctest::Approx(a0 - 0.1 * 0.5 / (0.5 + 1e-6)).epsilon(1e-12));
  CHECK(d.data()[0] == doctest::Approx(d0 - 0.01 * 2.0 / (2.0 + 1e-6)).epsilon(1e-12));

  // Clipping scales the whole gradient to the given norm.
  OptimizerConfig clipped = sgd;
  clipped.grad_clip = 1.0;
  Optimizer<double> opt3(clipped, store);
  const double before = a.data()[1];
  set_grads();
  opt3.step();
  const double norm = std::sqrt(0.25 + 16.0 + 4.0);
  CHECK(a.data()[1] == doctest::Approx(before + 0.1 * 4.0 / norm).epsilon(1e-12));

  const auto state = opt2.state();
  Optimizer<double> fresh(adam, store);
  fresh.load_state(state);
  CHECK(fresh.steps() == 1);
  CHECK(bit_equal(fresh.state()[0].second.data(), state[0].second.data()));
}

TEST_CASE("checkpoint round trip and failure modes") {
  const auto c = oracle::tiny_model_config();
  Model<float> model(c, 11);
  Checkpoint ckpt{{{"d_model", "16"}}, export_params(model.params())};
  const auto path = temp_path("roundtrip.mmi");
  write_checkpoint(path, ckpt);
  const auto back = read_checkpoint(path);
  CHECK(back.config == ckpt.config);
  Model<float> other(c, 12);
  load_params(back, other.params());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(bit_equal(model.params().items()[i].second.data(), other.params().items()[i].second.data()));
  }

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& data) {
    const auto p = temp_path(name);
    std::ofstream(p, std::ios::binary).write(data.data(), static_cast<std::streamsize>(data.size()));
    return p;
  };
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS((void)read_checkpoint(write("magic.mmi", bad)), FormatError);
  CHECK_THROWS_AS((void)read_checkpoint(write("trunc.mmi", bytes.substr(0, bytes.size() - 3))), FormatError);
  CHECK_THROWS_AS((void)read_checkpoint(write("short.mmi", bytes.substr(0, 10))), FormatError);
  CHECK_THROWS_AS((void)read_checkpoint(temp_path("does_not_exist.mmi")), IoError);

  auto extra = ckpt;
  extra.tensors.emplace_back("dec.bogus", Tf::zeros({2}));
  write_checkpoint(path, extra);
  try {
    load_params(read_checkpoint(path), other.params());
    FAIL("expected a lookup error");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("dec.bogus") != std::string::npos);
  }
  auto missing = ckpt;
  missing.tensors.pop_back();
  write_checkpoint(path, missing);
  CHECK_THROWS_AS(load_params(read_checkpoint(path), other.params()), LookupError);
  std::remove(path.c_str());
}

TEST_CASE("resumed training continues exactly") {
  const auto c = oracle::tiny_model_config();
  Philox rng(13);
  std::vector<TrainContext<float>> batch;
  batch.push_back(oracle::make_context<float>(c, {Element::text({1, 2}), Element::img(0), Element::img(1)}, rng));
  TrainConfig tc;
  tc.seed = 5;
  Model<float> a(c, 14);
  Trainer<float> ta(a, tc);
  (void)ta.step(batch);
  (void)ta.step(batch);
  auto tensors = export_params(a.params());
  for (auto& [name, t] : ta.optimizer().state()) tensors.emplace_back(name, t);
  const auto path = temp_path("resume.mmi");
  write_checkpoint(path, {{}, tensors});
  const auto next = ta.step(batch);

  Model<float> b(c, 99);
  Trainer<float> tb(b, tc);
  const auto ckpt = read_checkpoint(path);
  load_params(ckpt, b.params());
  std::vector<std::pair<std::string, Tf>> state;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.starts_with("opt.")) state.emplace_back(name, t);
  }
  tb.optimizer().load_state(state);
  const auto resumed = tb.step(batch);
  CHECK(resumed.total == next.total);
  CHECK(resumed.nip == next.nip);
  std::remove(path.c_str());
}

TEST_CASE("forced generation paths") {
  const auto c = oracle::tiny_model_config();
  Model<float> model(c, 15);
  const auto vocab = c.llm.vocab();
  auto forced = [&](std::vector<std::int64_t> script) {
    GenerateConfig g;
    g.max_new = 20;
    g.diffusion_steps = 3;
    g.logits_hook = [script](std::int64_t step, std::vector<double>& logits) {
      std::fill(logits.begin(), logits.end(), 0.0);
      logits[static_cast<std::size_t>(script.at(static_cast<std::size_t>(step)))] = 10.0;
    };
    return generate(model, {Element::text({1})}, {}, g);
  };
  const auto text = forced({4, vocab.eos()});
  CHECK(text.elements == std::vector<Element>{Element::text({4})});
  CHECK(text.images.empty());

  const auto img = forced({vocab.boi(), 5, vocab.eos()});
  REQUIRE(img.images.size() == 1);
  CHECK(img.images[0].shape() == Shape{8, 8, 3});
  CHECK(img.elements == std::vector<Element>{Element::img(0), Element::text({5})});

  // The sampling trace reports every update; its last row describes the returned image.
  std::vector<std::tuple<std::int64_t, std::int64_t, double, double>> trace;
  GenerateConfig traced;
  traced.diffusion_steps = 3;
  traced.logits_hook = [&](std::int64_t step, std::vector<double>& logits) {
    std::fill(logits.begin(), logits.end(), 0.0);
    logits[static_cast<std::size_t>(step < 2 ? vocab.boi() : vocab.eos())] = 10.0;
  };
  traced.sample_trace = [&](std::int64_t image, std::int64_t step, double mean, double sd) {
    trace.emplace_back(image, step, mean, sd);
  };
  const auto two = generate(model, {Element::text({1})}, {}, traced);
  REQUIRE(two.images.size() == 2);
  REQUIRE(trace.size() == 6);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(std::get<0>(trace[i]) == static_cast<std::int64_t>(i / 3));
    CHECK(std::get<1>(trace[i]) == static_cast<std::int64_t>(i % 3 + 1));
  }
  double mean = 0;
  for (const auto v : two.images[1].data()) mean += v;
  mean /= static_cast<double>(two.images[1].numel());
  CHECK(std::get<2>(trace.back()) == doctest::Approx(mean).epsilon(1e-6));

  GenerateConfig g;
  g.max_new = 5;
  CHECK_THROWS_AS((void)generate(model, {Element::img(3)}, {}, g), LookupError);
  auto small = c;
  small.llm.max_context = 6;
  Model<float> cramped(small, 15);
  g.logits_hook = [](std::int64_t, std::vector<double>& l) { l[2] = 100.0; };
  g.max_new = 50;
  CHECK_THROWS_AS((void)generate(cramped, {Element::text({1})}, {}, g), LengthError);
}

TEST_CASE("generation is deterministic and matches a full re-forward") {
  const auto c = oracle::tiny_model_config();
  Model<float> model(c, 16);
  Philox rng(17);
  const std::vector<Tf> prompt_images{oracle::random_image<float>(c, rng)};
  const std::vector<Element> prompt{Element::text({1, 2}), Element::img(0), Element::text({3})};
  std::vector<std::vector<double>> seen;
  GenerateConfig g;
  g.max_new = 8;
  g.temperature = 1.0;
  g.diffusion_steps = 4;
  g.seed = 21;
  g.logits_hook = [&](std::int64_t step, std::vector<double>& logits) {
    seen.push_back(logits);
    // Force one image mid-way so the cache sees generated visual tokens.
    if (step == 2) logits[static_cast<std::size_t>(c.llm.vocab().boi())] = 1e3;
    if (step < 7) logits[static_cast<std::size_t>(c.llm.vocab().eos())] = -1e3;
  };
  const auto first = generate(model, prompt, prompt_images, g);
  const auto observed = seen;
  seen.clear();
  const auto second = generate(model, prompt, prompt_images, g);
  CHECK(first.elements == second.elements);
  REQUIRE(first.images.size() == second.images.size());
  REQUIRE(first.images.size() >= 1);
  for (std::size_t i = 0; i < first.images.size(); ++i) CHECK(bit_equal(first.images[i].data(), second.images[i].data()));

  // Re-run the whole stream in one forward pass.
  auto all = prompt;
  all.insert(all.end(), first.elements.begin(), first.elements.end());
  auto images = prompt_images;
  images.insert(images.end(), first.images.begin(), first.images.end());
  const auto seq = build(all, c.visual_tokens, c.llm.vocab(), false);
  std::vector<ImagePyramid<float>> pyr;
  pyr.reserve(seq.images.size());
  std::vector<const ImagePyramid<float>*> ptrs;
  std::vector<Tf> visual;
  for (auto id : seq.images) {
    pyr.push_back(model.pyramid(images[static_cast<std::size_t>(id)]));
    ptrs.push_back(&pyr.back());
    visual.push_back(model.visual_tokens(pyr.back()));
  }
  const auto full = model.llm().forward(seq, visual, ptrs);
  const auto v = c.llm.vocab().size();
  std::int64_t row = build(prompt, c.visual_tokens, c.llm.vocab(), false).size() - 1;
  std::size_t step = 0;
  for (const auto& e : first.elements) {
    const auto count = e.kind == Element::Kind::Text ? static_cast<std::int64_t>(e.tokens.size()) : 1;
    for (std::int64_t k = 0; k < count; ++k, ++step) {
      CHECK(max_abs_diff(full.logits.data().subspan(row * v, v), observed[step]) < 1e-5);
      row += e.kind == Element::Kind::Text ? 1 : 1 + c.visual_tokens;
    }
  }
  CHECK(step >= 3);
}
