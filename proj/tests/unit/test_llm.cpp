#include <cmath>

#include "helpers.hpp"
#include "mmi/llm.hpp"
#include "oracle/llm_fixture.hpp"
#include "oracle/llm_oracle.hpp"

using namespace mmi;
using namespace testing;

namespace {

LLMConfig tiny(bool mmfs = true) {
  LLMConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_mult = 2;
  c.text_vocab = 13;
  c.mmfs_every = 2;
  c.max_context = 64;
  c.use_mmfs = mmfs;
  c.mmfs_points = 2;
  return c;
}

template <typename T>
oracle::LLMInputs<T> sample_inputs(const LLMConfig& cfg, Philox& rng, std::int64_t parts = 5) {
  std::int64_t next = 0;
  const auto elements = oracle::random_elements(rng, cfg.text_vocab, parts, next);
  return oracle::random_inputs<T>(build(elements, 3, cfg.vocab()), cfg, 4, rng);
}

oracle::LLMInputs<double> with_images(const LLMConfig& cfg, Philox& rng) {
  const std::vector<Element> e{Element::text({1, 2}), Element::img(0), Element::text({3, 4, 5}), Element::img(1),
                               Element::text({6})};
  return oracle::random_inputs<double>(build(e, 3, cfg.vocab()), cfg, 4, rng);
}

}  // namespace

TEST_CASE("MMFS layers are placed at (i + 1) % period == 0") {
  LLMConfig c = tiny();
  c.layers = 8;
  c.mmfs_every = 4;
  ParamStore<float> store;
  Philox rng(1);
  CausalLM<float> lm(c, store, "", rng);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(static_cast<bool>(lm.blocks()[i].mmfs) == (i == 3 || i == 7));
  c.mmfs_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero-initialized MMFS layers are an identity") {
  Philox rng(2);
  auto with_cfg = tiny(true), without_cfg = tiny(false);
  ParamStore<float> s1, s2;
  Philox r1(7), r2(7);
  CausalLM<float> with(with_cfg, s1, "", r1), without(without_cfg, s2, "", r2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = sample_inputs<float>(with_cfg, rng);
    const auto a = with.forward(in.seq, in.visual, in.pointers());
    const auto b = without.forward(in.seq, in.visual, in.pointers());
    CHECK(max_abs_diff(a.logits.data(), b.logits.data()) <= 1e-6);
    CHECK(bit_equal(a.logits.data(), b.logits.data()));
  }
}

TEST_CASE("text-only sequences pass through MMFS layers") {
  ParamStore<double> s1, s2;
  Philox r1(3), r2(3), rng(4);
  CausalLM<double> with(tiny(true), s1, "", r1), without(tiny(false), s2, "", r2);
  oracle::randomize_params(s1, rng);
  // Copy the shared weights across so only the MMFS layers differ.
  for (auto& [name, t] : s2.items()) {
    auto h = t;
    const auto src = s1.at(name).data();
    std::copy(src.begin(), src.end(), h.data_mut().begin());
  }
  const auto seq = build({Element::text({1, 2, 3, 4})}, 3, tiny().vocab());
  const auto a = with.forward(seq, {}, {});
  const auto b = without.forward(seq, {}, {});
  CHECK(bit_equal(a.logits.data(), b.logits.data()));
}

TEST_CASE("forward matches the straight-line oracle") {
  Philox rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    auto cfg = tiny();
    cfg.mmfs_heads = trial % 2 ? 2 : 1;
    ParamStore<double> store;
    Philox init(10 + trial);
    CausalLM<double> lm(cfg, store, "", init);
    oracle::randomize_params(store, rng);
    auto in = trial < 3 ? with_images(cfg, rng) : sample_inputs<double>(cfg, rng, 7);
    if (trial == 5) {
      std::int64_t next = 50;
      std::vector<PackedSequence> samples{in.seq, build(oracle::random_elements(rng, cfg.text_vocab, 4, next), 3, cfg.vocab())};
      auto packed = pack(samples, 64);
      REQUIRE(packed.size() == 1);
      in = oracle::random_inputs<double>(packed[0], cfg, 4, rng);
    }
    const auto ptrs = in.pointers();
    const auto out = lm.forward(in.seq, in.visual, ptrs);
    CHECK(max_abs_diff(out.logits.data(), oracle::llm_logits(lm, in.seq, in.visual, ptrs)) < 1e-8);
  }
}

TEST_CASE("ntp_loss examples") {
  ParamStore<double> store;
  Philox rng(6);
  LLMConfig cfg = tiny();
  cfg.text_vocab = 257;
  CausalLM<double> lm(cfg, store, "", rng);
  const auto seq = build({Element::text({4, 9})}, 2, cfg.vocab());
  const auto v = cfg.vocab().size();
  CHECK(v == 260);
  auto perfect = Td::zeros({4, v});
  const auto t = ntp_targets(seq, cfg.vocab());
  for (std::int64_t p = 0; p < 3; ++p) perfect.data_mut()[p * v + t.targets[p]] = 1e6;
  CHECK(lm.ntp_loss(perfect, seq).item() < 1e-6);
  CHECK(lm.ntp_loss(Td::zeros({4, v}), seq).item() == doctest::Approx(std::log(260.0)).epsilon(1e-12));

  // Hand-built: three scored positions (BoS→4, 4→9, 9→EoS) with logit 2 on
  // the target and 0 elsewhere, except position 1 which puts 2 on token 0.
  auto logits = Td::zeros({4, v});
  logits.data_mut()[0 * v + 4] = 2;
  logits.data_mut()[1 * v + 0] = 2;
  logits.data_mut()[2 * v + cfg.vocab().eos()] = 2;
  const double hit = -2 + std::log(std::exp(2.0) + (v - 1));
  const double miss = std::log(std::exp(2.0) + (v - 1));
  CHECK(lm.ntp_loss(logits, seq).item() == doctest::Approx((2 * hit + miss) / 3).epsilon(1e-13));

  const auto only_images = build({Element::img(0)}, 2, cfg.vocab());
  auto masked = only_images;
  masked.stream.pop_back();  // drop EoS: BoS→BoI is the only target left
  CHECK(ntp_targets(masked, cfg.vocab()).mask == std::vector<std::uint8_t>{1, 0, 0, 0});
}

TEST_CASE("perturbing a slot changes logits only from that position on") {
  Philox rng(7);
  auto cfg = tiny();
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto in = sample_inputs<float>(cfg, rng, 7);
    const auto ptrs = in.pointers();
    const auto base = lm.forward(in.seq, in.visual, ptrs);
    const auto p = rng.uniform_int(1, in.seq.size());
    auto changed = in.seq;
    auto visual = in.visual;
    auto& slot = changed.stream[p];
    if (slot.kind == SlotKind::Image) {
      auto copy = visual[slot.value].clone();
      copy.data_mut()[slot.index * cfg.d_model] += 1.0f;
      visual[slot.value] = copy;
    } else if (slot.kind == SlotKind::Text) {
      slot.value = (slot.value + 1) % cfg.text_vocab;
    } else {
      continue;
    }
    const auto out = lm.forward(changed, visual, ptrs);
    const auto v = cfg.vocab().size();
    CHECK(bit_equal(out.logits.data().subspan(0, p * v), base.logits.data().subspan(0, p * v)));
    CHECK(!bit_equal(out.logits.data().subspan(p * v, v), base.logits.data().subspan(p * v, v)));
  }
}

TEST_CASE("perturbing an image pyramid changes outputs only where it is visible") {
  Philox rng(8);
  auto cfg = tiny();
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  int checked = 0;
  while (checked < 20) {
    auto in = sample_inputs<float>(cfg, rng, 7);
    if (in.seq.images.empty()) continue;
    const auto ptrs = in.pointers();
    const auto base = lm.forward(in.seq, in.visual, ptrs);
    const auto j = rng.uniform_int(0, static_cast<std::int64_t>(in.seq.images.size()));
    for (auto& level : in.pyramids[j].levels) {
      for (auto& v : level.data_mut()) v += 0.5f;
    }
    const auto out = lm.forward(in.seq, in.visual, ptrs);
    const auto vis = visibility(in.seq);
    const auto v = cfg.vocab().size();
    for (std::int64_t p = 0; p < in.seq.size(); ++p) {
      const bool sees = std::find(vis[p].begin(), vis[p].end(), j) != vis[p].end();
      const bool same = bit_equal(out.logits.data().subspan(p * v, v), base.logits.data().subspan(p * v, v));
      if (!sees) CHECK(same);
    }
    ++checked;
  }
}

TEST_CASE("end-to-end ntp gradcheck") {
  Philox rng(9);
  auto cfg = tiny();
  ParamStore<double> store;
  CausalLM<double> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  auto in = with_images(cfg, rng);
  const auto ptrs = in.pointers();
  std::vector<NamedTensor> params(store.items().begin(), store.items().end());
  const auto report = gradcheck([&] { return lm.ntp_loss(lm.forward(in.seq, in.visual, ptrs).logits, in.seq); }, params,
                                {.tol = 1e-4});
  expect_grad(report);
}

TEST_CASE("incremental decoding matches the full forward") {
  Philox rng(10);
  auto cfg = tiny();
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  oracle::randomize_params(store, rng);
  for (int trial = 0; trial < 5; ++trial) {
    auto in = sample_inputs<float>(cfg, rng, 7);
    const auto ptrs = in.pointers();
    const auto full = lm.forward(in.seq, in.visual, ptrs);
    const auto vis = visibility(in.seq);
    auto cache = lm.new_cache();
    const auto v = cfg.vocab().size();
    std::int64_t p = 0;
    while (p < in.seq.size()) {
      const auto n = std::min<std::int64_t>(rng.uniform_int(1, 4), in.seq.size() - p);
      const std::span<const Slot> slots(in.seq.stream.data() + p, static_cast<std::size_t>(n));
      const std::vector<std::vector<std::int64_t>> rows(vis.begin() + p, vis.begin() + p + n);
      const auto out = lm.step(cache, lm.embed(slots, in.visual), rows, ptrs);
      CHECK(max_abs_diff(out.logits.data(), full.logits.data().subspan(p * v, n * v)) < 1e-5);
      p += n;
    }
    CHECK(cache.length == in.seq.size());
  }
}

TEST_CASE("missing image data is a lookup error") {
  Philox rng(11);
  auto cfg = tiny();
  ParamStore<float> store;
  CausalLM<float> lm(cfg, store, "", rng);
  const auto seq = build({Element::img(0)}, 3, cfg.vocab());
  CHECK_THROWS_AS((void)lm.forward(seq, {}, {}), LookupError);
}
