#include <cmath>

#include "helpers.hpp"
#include "mmi/mmfs.hpp"
#include "oracle/mmfs_fixture.hpp"

using namespace mmi;
using namespace testing;

namespace {

std::vector<std::int64_t> iota_ids(std::int64_t n) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

}  // namespace

TEST_CASE("zero-initialized projections plan uniform weights at the reference") {
  ParamStore<double> store;
  Philox rng(1);
  MMFS<double> mmfs({8, 8, 3, 4, 6, 1, 0.0, GateKind::Llm}, store, "", rng);
  auto q = rand_d({5, 8}, rng);
  auto refs = Td::uniform({5, 2}, rng, 0, 1);
  const auto plan = mmfs.plan(q, refs, iota_ids(2));
  CHECK(plan.weights.shape() == Shape{5, 1, 2, 3, 4});
  for (double w : plan.weights.data()) CHECK(w == doctest::Approx(1.0 / 24).epsilon(1e-14));
  const auto loc = plan.locations.data();
  for (std::size_t i = 0; i < loc.size(); ++i) CHECK(loc[i] == refs[static_cast<std::int64_t>(i / 16 * 2 + i % 2)]);
}

TEST_CASE("equal logits over M=2, L=1, K=2 give 0.25 each") {
  ParamStore<double> store;
  Philox rng(2);
  MMFS<double> mmfs({4, 4, 1, 2, 6, 1, 0.0, GateKind::Llm}, store, "", rng);
  const auto plan = mmfs.plan(rand_d({1, 4}, rng), Td::from({1, 2}, {0.5, 0.5}), iota_ids(2));
  for (double w : plan.weights.data()) CHECK(w == 0.25);
}

TEST_CASE("plan errors") {
  ParamStore<double> store;
  Philox rng(3);
  MMFS<double> mmfs({4, 4, 1, 2, 2, 1, 0.0, GateKind::Llm}, store, "", rng);
  const auto q = rand_d({1, 4}, rng);
  const auto r = Td::from({1, 2}, {0.5, 0.5});
  CHECK_THROWS_AS((void)mmfs.plan(q, r, {}), EmptyInputError);
  CHECK_THROWS_AS((void)mmfs.plan(q, r, iota_ids(3)), CapacityError);
  ParamStore<double> s2;
  CHECK_THROWS_AS(MMFS<double>({4, 6, 1, 2, 2, 1, 0.0, GateKind::Llm}, s2, "", rng), ConfigError);
}

TEST_CASE("plan and sample match the loop oracle") {
  Philox rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    oracle::MMFSCaseSpec spec;
    spec.images = rng.uniform_int(1, 4);
    spec.levels = trial % 2 ? 3 : 1;
    spec.points = trial % 3 ? 4 : 1;
    spec.heads = trial % 5 == 0 ? 2 : 1;
    spec.offset_scale = 0.5;
    auto c = oracle::make_mmfs_case(spec, rng);
    const auto plan = c.module->plan(c.queries, c.refs, iota_ids(spec.images));
    const auto out = c.module->sample(c.pointers(), plan);
    const auto w = c.weights();
    const auto maps = c.maps();
    for (std::int64_t q = 0; q < spec.queries; ++q) {
      const oracle::Vec fq(c.queries.data().begin() + q * spec.query_dim, c.queries.data().begin() + (q + 1) * spec.query_dim);
      const auto expect = oracle::mmfs_plan(w, fq, c.refs[2 * q], c.refs[2 * q + 1], spec.images);
      const auto n_loc = static_cast<std::int64_t>(expect.loc.size()), n_w = static_cast<std::int64_t>(expect.w.size());
      CHECK(max_abs_diff(plan.locations.data().subspan(q * n_loc, n_loc), expect.loc) < 1e-12);
      CHECK(max_abs_diff(plan.weights.data().subspan(q * n_w, n_w), expect.w) < 1e-12);
      const auto fo = oracle::mmfs_sample(maps, c.config.feature_dim, spec.heads, spec.points, expect);
      CHECK(max_abs_diff(out.data().subspan(q * c.config.feature_dim, c.config.feature_dim), fo) < 1e-10);
    }
  }
}

TEST_CASE("single-image single-scale reduction") {
  Philox rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    oracle::MMFSCaseSpec spec{.images = 1, .levels = 1, .points = rng.uniform_int(1, 5), .queries = 2, .base_size = 5};
    auto c = oracle::make_mmfs_case(spec, rng);
    const auto plan = c.module->plan(c.queries, c.refs, iota_ids(1));
    const auto out = c.module->sample(c.pointers(), plan);
    // Direct formula: Σ_k softmax(z)_k · map(p_k), single map, no image axis.
    const auto& map = c.pyramids[0].levels[0];
    const auto f = c.config.feature_dim, s = map.dim(0);
    for (std::int64_t q = 0; q < 2; ++q) {
      std::vector<double> acc(static_cast<std::size_t>(f), 0.0);
      for (std::int64_t k = 0; k < spec.points; ++k) {
        const double u = plan.locations[(q * spec.points + k) * 2], v = plan.locations[(q * spec.points + k) * 2 + 1];
        const double a = plan.weights[q * spec.points + k];
        const double x = u * s - 0.5, y = v * s - 0.5;
        for (std::int64_t yy = 0; yy < s; ++yy) {
          for (std::int64_t xx = 0; xx < s; ++xx) {
            const double kernel = std::max(0.0, 1 - std::abs(x - xx)) * std::max(0.0, 1 - std::abs(y - yy));
            for (std::int64_t j = 0; j < f; ++j) acc[j] += a * kernel * map[(yy * s + xx) * f + j];
          }
        }
      }
      CHECK(max_abs_diff(out.data().subspan(q * f, f), acc) < 1e-10);
    }
  }
}

TEST_CASE("deform sampling examples") {
  Philox rng(6);
  auto c = oracle::make_mmfs_case({.images = 3, .levels = 3, .points = 4}, rng);
  for (auto& p : c.pyramids) {
    for (auto& l : p.levels) {
      for (auto& v : l.data_mut()) v = 1.75;
    }
  }
  const auto plan = c.module->plan(c.queries, c.refs, iota_ids(3));
  const auto out = c.module->sample(c.pointers(), plan);
  // Constant maps give the constant wherever all four taps are inside; the
  // refs are well inside [0,1] but offsets can leave the map, so use
  // in-range locations only.
  for (std::int64_t q = 0; q < 3; ++q) {
    bool interior = true;
    for (std::int64_t i = 0; i < 3 * 4 * 2; ++i) {
      const double p = plan.locations[q * 24 + i];
      interior = interior && p > 0.5 / 2 && p < 1 - 0.5 / 2;
    }
    if (interior) {
      for (std::int64_t j = 0; j < c.config.feature_dim; ++j) CHECK(out[q * c.config.feature_dim + j] == doctest::Approx(1.75));
    }
  }

  // Delta plan: one image, one level, one point, weight 1, at a pixel centre.
  auto map = rand_d({4, 4, 3}, rng);
  std::vector<std::vector<Td>> levels{{map}};
  const auto fo = deform_attn(levels, Td::from({1, 1, 1, 1, 2}, {2.5 / 4, 1.5 / 4}), Td::from({1, 1, 1, 1, 1}, {1.0}));
  for (std::int64_t j = 0; j < 3; ++j) CHECK(std::abs(fo[j] - map[(1 * 4 + 2) * 3 + j]) < 1e-12);
  std::vector<std::vector<Td>> mismatched{{map}, {rand_d({4, 4, 2}, rng)}};
  CHECK_THROWS_AS(deform_attn(mismatched, Td::zeros({1, 2, 1, 1, 2}), Td::zeros({1, 1, 2, 1, 1})), DimensionError);
}

TEST_CASE("gated application") {
  Philox rng(7);
  ParamStore<double> store;
  MMFS<double> llm({4, 4, 1, 1, 6, 1, 0.0, GateKind::Llm}, store, "a.", rng);
  ImagePyramid<double> pyr{{rand_d({4, 4, 4}, rng)}, 32, 32};
  std::vector<const ImagePyramid<double>*> one{&pyr};
  auto q = rand_d({1, 4}, rng);
  const auto r = Td::from({1, 2}, {2.5 / 4, 1.5 / 4});
  CHECK(bit_equal(llm.apply(q, r, one).data(), q.data()));
  CHECK(bit_equal(llm.apply(q, r, {}).data(), q.data()));

  MMFS<double> dec({4, 4, 1, 1, 6, 1, 0.0, GateKind::Decoder}, store, "b.", rng);
  CHECK(bit_equal(dec.apply(q, r, one).data(), q.data()));

  // Saturated gate plus delta plan: zero offsets keep the point at the
  // reference, L=K=M=1 makes the single weight 1.
  auto alpha = llm.alpha();
  alpha.data_mut()[0] = 10.0;
  const auto y = llm.apply(q, r, one);
  for (std::int64_t j = 0; j < 4; ++j) CHECK(std::abs(y[j] - (q[j] + pyr.levels[0][(1 * 4 + 2) * 4 + j])) < 1e-4);
}

TEST_CASE("full-path gradcheck over random configurations") {
  Philox rng(8);
  int run = 0;
  while (run < 20) {
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
    const auto report = gradcheck([&] { return probe(c.module->apply(c.queries, c.refs, ptrs)); }, params, {.tol = 1e-5});
    CAPTURE(run);
    expect_grad(report);
    ++run;
  }
}

TEST_CASE("weights are normalized and locations are shared across levels") {
  Philox rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto c = oracle::make_mmfs_case({.images = rng.uniform_int(1, 7), .levels = 3, .points = 4, .heads = 1, .queries = 4}, rng);
    const auto plan = c.module->plan(c.queries, c.refs, iota_ids(static_cast<std::int64_t>(c.pyramids.size())));
    const auto per_query = plan.weights.numel() / 4;
    for (std::int64_t q = 0; q < 4; ++q) {
      double total = 0;
      for (std::int64_t i = 0; i < per_query; ++i) {
        CHECK(plan.weights[q * per_query + i] >= 0.0);
        total += plan.weights[q * per_query + i];
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
    // The location tensor has no level axis; every level reads the same point.
    CHECK(plan.locations.rank() == 5);
  }
}

TEST_CASE("images outside the visible set do not influence the output") {
  Philox rng(10);
  auto c = oracle::make_mmfs_case({.images = 4, .levels = 3, .points = 4, .queries = 5}, rng);
  const auto ptrs = c.pointers();
  const std::vector<std::vector<std::int64_t>> visible{{}, {0}, {0, 2}, {0, 2}, {3}};
  const auto before = c.module->apply_rows(c.queries, c.refs, visible, ptrs);
  for (auto& v : c.pyramids[1].levels[0].data_mut()) v += 3.0;
  const auto after = c.module->apply_rows(c.queries, c.refs, visible, ptrs);
  CHECK(bit_equal(before.data(), after.data()));
  for (auto& v : c.pyramids[2].levels[1].data_mut()) v += 3.0;
  const auto changed = c.module->apply_rows(c.queries, c.refs, visible, ptrs);
  const auto f = c.config.query_dim;
  CHECK(bit_equal(changed.data().subspan(0, 2 * f), before.data().subspan(0, 2 * f)));
  CHECK(!bit_equal(changed.data().subspan(2 * f, 2 * f), before.data().subspan(2 * f, 2 * f)));
  CHECK(bit_equal(changed.data().subspan(4 * f, f), before.data().subspan(4 * f, f)));
  CHECK(bit_equal(before.data().subspan(0, f), c.queries.data().subspan(0, f)));
}

TEST_CASE("more than the cap keeps only the most recent images") {
  Philox rng(11);
  auto c = oracle::make_mmfs_case({.images = 8, .levels = 1, .points = 2, .queries = 2}, rng);
  const auto all = c.pointers();
  const auto capped = c.module->apply(c.queries, c.refs, all);
  std::vector<const ImagePyramid<double>*> recent(all.end() - 6, all.end());
  CHECK(bit_equal(capped.data(), c.module->apply(c.queries, c.refs, recent).data()));
}
