#include <map>
#include <sstream>
#include <tuple>

#include "helpers.hpp"
#include "mmi/bench.hpp"
#include "mmi/errors.hpp"
#include "mmi/rng.hpp"

using namespace mmi;
using namespace mmi::bench;

namespace {

CostScenario small() {
  CostScenario s;
  s.d_model = 4;
  s.layers = 1;
  s.vocab = 5;
  s.images = 1;
  s.visual_tokens = 3;
  s.text_tokens = 4;  // T = 2 + 4 + 4 = 10
  s.max_images = 4;
  s.levels = 1;
  s.points = 2;
  s.period = 1;
  s.pyramid_cells = 5;
  return s;
}

CostScenario random_scenario(Philox& rng) {
  CostScenario s;
  s.d_model = rng.uniform_int(1, 64);
  s.layers = rng.uniform_int(0, 9);
  s.vocab = rng.uniform_int(1, 100);
  s.visual_tokens = rng.uniform_int(0, 300);
  s.images = rng.uniform_int(0, 10);
  s.text_tokens = rng.uniform_int(0, 300);
  s.mmfs = rng.bernoulli(0.5);
  s.dense_cross_attn = rng.bernoulli(0.5);
  s.max_images = rng.uniform_int(1, 6);
  s.levels = rng.uniform_int(1, 4);
  s.points = rng.uniform_int(1, 5);
  s.period = rng.uniform_int(1, 5);
  return s;
}

}  // namespace

TEST_CASE("hand-expanded single-layer counts") {
  auto s = small();
  CHECK(sequence_tokens(s) == 10);
  auto f = count_flops(s);
  CHECK(f.self_attn == 2 * (4 * 10 * 16 + 2 * 100 * 4));
  CHECK(f.ffn == 2 * 8 * 10 * 16);
  CHECK(f.head == 2 * 10 * 4 * 5);
  CHECK(f.mmfs == 0);
  CHECK(f.cross_attn == 0);
  s.mmfs = true;
  // Per query: 16 (W_q) + 1·(4 + 2)·4 (offsets, weights) + 5·1·1·2·4 (gathers) = 80.
  CHECK(count_flops(s).mmfs == 2 * 10 * 80);
  s.mmfs = false;
  s.dense_cross_attn = true;
  // 10·16 + 2·5·16 + 10·16 + 2·10·5·4 = 880 MACs.
  CHECK(count_flops(s).cross_attn == 2 * 880);
  s.layers = 0;
  f = count_flops(s);
  CHECK(f.total() == 0);
  CHECK(f.self_attn == 0);
  CHECK(f.head == 0);
}

TEST_CASE("counts are additive and monotone") {
  Philox rng(1);
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_scenario(rng);
    const auto f = count_flops(s);
    CHECK(f.total() == f.self_attn + f.ffn + f.mmfs + f.cross_attn + f.head);
    for (int field = 0; field < 4; ++field) {
      auto bigger = s;
      const auto step = rng.uniform_int(1, 20);
      if (field == 0) bigger.visual_tokens += step;
      if (field == 1) bigger.images += step;
      if (field == 2) bigger.text_tokens += step;
      if (field == 3) bigger.layers += step;
      REQUIRE(count_flops(bigger).total() >= f.total());
    }
  }
}

TEST_CASE("scale preset shape") {
  const auto nv256 = scale_preset(256, false), mmfs32 = scale_preset(32, true), nv32 = scale_preset(32, false);
  CHECK(sequence_tokens(nv256) == 515);
  CHECK(sequence_tokens(mmfs32) == 291);
  CHECK(nv256.d_model == 5120);
  CHECK(nv256.layers == 40);
  const double c = 5120, v = 32000;
  auto llm = [&](double t) { return 2 * 40 * (12 * t * c * c + 2 * t * t * c) + 2 * t * c * v; };
  CHECK(count_flops(nv256).total() == doctest::Approx(llm(515)).epsilon(1e-12));
  const double mmfs = 2 * 10 * 291 * (c * c + 1 * (8 + 12) * c + 5 * 12 * c);
  CHECK(count_flops(mmfs32).mmfs == doctest::Approx(mmfs).epsilon(1e-12));
  CHECK(count_flops(nv32).mmfs == 0);
}

TEST_CASE("sweep rows, deltas and overflow flags") {
  CHECK_THROWS_AS((void)sweep({}), EmptyInputError);
  const auto one = sweep({scale_preset(32, false)});
  REQUIRE(one.size() == 1);
  CHECK(one[0].delta == 0);

  Philox rng(2);
  std::vector<CostScenario> grid;
  for (int i = 0; i < 500; ++i) {
    auto s = random_scenario(rng);
    s.context = rng.uniform_int(10, 3000);
    grid.push_back(s);
  }
  for (const auto& row : sweep(grid)) {
    const auto& s = row.scenario;
    CHECK(row.flops.overflow == (2 + s.images * (1 + s.visual_tokens) + s.images * s.text_tokens > s.context));
  }

  const auto rows = sweep(figure_grid());
  CHECK(rows.size() == 4 * 3 * 8);
  std::map<std::tuple<std::string, std::int64_t, std::int64_t>, double> total;
  for (const auto& r : rows) total[{r.scenario.variant, r.scenario.images, r.scenario.text_tokens}] = r.flops.total();
  for (std::int64_t ni = 1; ni <= 6; ++ni) {
    for (std::int64_t nt : {32, 128, 256}) {
      CHECK(total[{"mmfs32", ni, nt}] <= total[{"dense32", ni, nt}]);
      CHECK(total[{"mmfs32", ni, nt}] <= total[{"nv256", ni, nt}]);
    }
  }
  for (const auto& r : rows) {
    if (r.scenario.variant == "nv256" && r.scenario.text_tokens == 32) {
      CHECK(r.flops.overflow == (r.scenario.images >= 8));
    }
  }
  const auto csv = sweep_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size()) + 1);
  CHECK(csv.rfind("variant,visual_tokens,images,text_tokens,tokens,", 0) == 0);
}

TEST_CASE("runtime harness") {
  CHECK(runtime_csv(measure({})) == "name,tokens,median_ms,max_rss_kb\n");
  RuntimeScenario mmfs{"mmfs32", 64, 4, 4, 32, 2, 32, true, 4};
  RuntimeScenario dense{"nv256", 64, 4, 4, 256, 2, 32, false, 4};
  const auto rows = measure({mmfs, mmfs, dense}, 9, 2);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].tokens == 2 + 2 * 33 + 64);
  const double lo = std::min(rows[0].median_ms, rows[1].median_ms), hi = std::max(rows[0].median_ms, rows[1].median_ms);
  CHECK(hi <= 1.2 * lo);
  CHECK(rows[0].median_ms < rows[2].median_ms);
  CHECK(rows[2].max_rss_kb > 0);
}

TEST_CASE("svg chart") {
  const auto svg = line_chart("a < b", "images", "GFLOPs", {{"mmfs32", {{1, 2}, {2, 3}}}, {"nv256", {{1, 5}, {2, 9}}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("a &lt; b") != std::string::npos);
  CHECK(svg.find("mmfs32") != std::string::npos);
  CHECK(svg.find("GFLOPs") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 10);
  CHECK(line_chart("empty", "x", "y", {}).find("</svg>") != std::string::npos);
}
