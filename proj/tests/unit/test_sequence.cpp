#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mmi/errors.hpp"
#include "mmi/rng.hpp"
#include "mmi/sequence.hpp"

using namespace mmi;

namespace {

const Vocab kVocab{16};

Slot bos() { return {SlotKind::BoS, 0, 0}; }
Slot eos() { return {SlotKind::EoS, 0, 0}; }
Slot boi(std::int64_t j) { return {SlotKind::BoI, j, 0}; }
Slot tok(std::int64_t id) { return {SlotKind::Text, id, 0}; }
Slot img(std::int64_t j, std::int64_t i) { return {SlotKind::Image, j, i}; }

std::vector<Element> random_layout(Philox& rng, std::int64_t max_parts = 6) {
  std::vector<Element> elements;
  const auto parts = rng.uniform_int(1, max_parts + 1);
  std::int64_t next_image = 0;
  for (std::int64_t i = 0; i < parts; ++i) {
    if (rng.bernoulli(0.5)) {
      elements.push_back(Element::img(100 + next_image++));
    } else {
      std::vector<std::int64_t> ids(static_cast<std::size_t>(rng.uniform_int(1, 4)));
      for (auto& id : ids) id = rng.uniform_int(0, kVocab.text);
      if (!elements.empty() && elements.back().kind == Element::Kind::Text) {
        elements.back().tokens.insert(elements.back().tokens.end(), ids.begin(), ids.end());
      } else {
        elements.push_back(Element::text(ids));
      }
    }
  }
  return elements;
}

}  // namespace

TEST_CASE("build examples") {
  auto s = build({Element::text({5, 6})}, 4, kVocab);
  CHECK(s.stream == std::vector<Slot>{bos(), tok(5), tok(6), eos()});
  CHECK(s.images.empty());

  s = build({Element::img(0), Element::text({7})}, 2, kVocab);
  CHECK(s.stream == std::vector<Slot>{bos(), boi(0), img(0, 0), img(0, 1), tok(7), eos()});

  s = build({Element::text({1}), Element::img(0), Element::text({2}), Element::img(1)}, 2, kVocab);
  CHECK(s.size() == 10);
  CHECK(s.images == std::vector<std::int64_t>{0, 1});

  CHECK_THROWS_AS(build({}, 2, kVocab), EmptyInputError);
  CHECK_THROWS_AS(build({Element::text({16})}, 2, kVocab), DimensionError);
}

TEST_CASE("visibility examples") {
  const auto s = build({Element::text({1}), Element::img(0), Element::text({2, 3}), Element::img(1), Element::text({4})}, 2,
                       kVocab);
  // 0 BoS, 1 t1, 2 BoI0, 3 I0.0, 4 I0.1, 5 t2, 6 t3, 7 BoI1, 8 I1.0, 9 I1.1, 10 t4, 11 EoS
  const auto v = visibility(s);
  using L = std::vector<std::int64_t>;
  const std::vector<L> expect{{}, {}, {}, {0}, {0}, {0}, {0}, {0}, {0, 1}, {0, 1}, {0, 1}, {0, 1}};
  CHECK(v == expect);
  const auto strict = visibility(s, true);
  const std::vector<L> expect_strict{{}, {}, {}, {}, {}, {0}, {0}, {0}, {0}, {0}, {0, 1}, {0, 1}};
  CHECK(strict == expect_strict);
}

TEST_CASE("ntp target examples") {
  auto s = build({Element::text({5, 6})}, 4, kVocab);
  auto t = ntp_targets(s, kVocab);
  CHECK(t.targets == std::vector<std::int64_t>{5, 6, kVocab.eos(), 0});
  CHECK(t.mask == std::vector<std::uint8_t>{1, 1, 1, 0});

  s = build({Element::img(0), Element::text({7})}, 2, kVocab);
  t = ntp_targets(s, kVocab);
  CHECK(t.mask == std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0});
  CHECK(t.targets[0] == kVocab.boi());
  CHECK(t.targets[3] == 7);

  s = build({Element::img(0), Element::img(1)}, 2, kVocab);
  t = ntp_targets(s, kVocab);
  // BoS→BoI, last slot of image 0→BoI of image 1, last slot→EoS.
  CHECK(t.mask == std::vector<std::uint8_t>{1, 0, 0, 1, 0, 0, 1, 0});
}

TEST_CASE("pack examples") {
  auto sample = [](std::int64_t len) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(len - 2), 1);
    return build({Element::text(ids)}, 1, kVocab);
  };
  auto ctx = pack({sample(10), sample(10), sample(10)}, 32);
  REQUIRE(ctx.size() == 1);
  CHECK(ctx[0].size() == 30);
  ctx = pack({sample(20), sample(20), sample(10)}, 32);
  REQUIRE(ctx.size() == 2);
  CHECK(ctx[0].size() == 30);
  CHECK(ctx[1].size() == 20);
  ctx = pack({sample(32)}, 32);
  REQUIRE(ctx.size() == 1);
  CHECK(ctx[0].size() == 32);
  CHECK_THROWS_AS(pack({sample(33)}, 32), LengthError);
}

TEST_CASE("round trip over random layouts") {
  Philox rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto elements = random_layout(rng);
    CHECK(parse_back(build(elements, rng.uniform_int(1, 5), kVocab)) == elements);
  }
}

TEST_CASE("visibility and mask properties over random layouts") {
  Philox rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto elements = random_layout(rng);
    const auto n = rng.uniform_int(1, 4);
    const auto seq = build(elements, n, kVocab);
    const bool strict = trial % 4 == 0;
    const auto vis = visibility(seq, strict);
    for (std::int64_t p = 0; p < seq.size(); ++p) {
      // Brute force from the definition.
      std::vector<std::int64_t> expect;
      for (std::int64_t j = 0; j < static_cast<std::int64_t>(seq.images.size()); ++j) {
        const auto anchor = seq.boi_position(j) + (strict ? n : 0);
        if (anchor < p) expect.push_back(j);
      }
      CHECK(vis[p] == expect);
      if (p > 0) {
        CHECK(vis[p].size() >= vis[p - 1].size());
        CHECK(std::equal(vis[p - 1].begin(), vis[p - 1].end(), vis[p].begin()));
      }
    }
    const auto t = ntp_targets(seq, kVocab);
    std::int64_t text = 0;
    for (const auto& e : elements) text += static_cast<std::int64_t>(e.tokens.size());
    const auto unmasked = std::count(t.mask.begin(), t.mask.end(), 1);
    CHECK(unmasked == text + static_cast<std::int64_t>(seq.images.size()) + 1);
    for (std::int64_t p = 0; p + 1 < seq.size(); ++p) {
      const bool image_next = seq.stream[p + 1].kind == SlotKind::Image;
      CHECK(static_cast<bool>(t.mask[p]) == !image_next);
    }
  }
}

TEST_CASE("packed samples never see each other's images") {
  Philox rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PackedSequence> samples;
    for (int i = 0; i < 5; ++i) samples.push_back(build(random_layout(rng, 4), 2, kVocab));
    for (const auto& ctx : pack(samples, 40)) {
      const auto vis = visibility(ctx);
      const auto t = ntp_targets(ctx, kVocab);
      for (std::int64_t p = 0; p < ctx.size(); ++p) {
        for (auto j : vis[p]) CHECK(ctx.segment[ctx.boi_position(j)] == ctx.segment[p]);
        if (p + 1 < ctx.size() && ctx.segment[p + 1] != ctx.segment[p]) CHECK(t.mask[p] == 0);
        if (ctx.position[p] == 0) CHECK(ctx.stream[p].kind == SlotKind::BoS);
      }
    }
  }
}

TEST_CASE("corpus loading") {
  const auto dir = std::filesystem::temp_directory_path() / "mmi_corpus_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "c.jsonl");
    out << R"({"elements": [{"text": [1, 2]}, {"image": "a.ppm"}, {"text": [3]}]})" << "\n\n";
    out << R"({"elements": [{"image": "/abs/b.ppm"}]})" << "\n";
  }
  const auto corpus = load_corpus((dir / "c.jsonl").string(), kVocab);
  REQUIRE(corpus.size() == 2);
  CHECK(corpus[0].elements.size() == 3);
  CHECK(corpus[0].image_paths[0] == (dir / "a.ppm").string());
  CHECK(corpus[1].image_paths[0] == "/abs/b.ppm");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"elements": [{"text": [99]}]})" << "\n";
  }
  CHECK_THROWS_AS(load_corpus((dir / "bad.jsonl").string(), kVocab), FormatError);
  CHECK_THROWS_AS(load_corpus((dir / "missing.jsonl").string(), kVocab), IoError);
}
