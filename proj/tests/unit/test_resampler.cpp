#include <algorithm>

#include "helpers.hpp"
#include "mmi/resampler.hpp"
#include "oracle/resampler_oracle.hpp"

using namespace mmi;
using namespace testing;

namespace {

void randomize(ParamStore<double>& store, Philox& rng) {
  for (auto& [name, t] : store.items()) {
    auto h = t;
    for (auto& v : h.data_mut()) v += 0.3 * rng.normal();
  }
}

}  // namespace

TEST_CASE("depth 0 returns the latents") {
  ParamStore<double> store;
  Philox rng(1);
  Resampler<double> r({8, 5, 3, 0, 1, 4}, store, "", rng);
  const auto out = r(rand_d({4, 5}, rng));
  CHECK(bit_equal(out.data(), r.latents().data()));
  CHECK_THROWS_AS((void)r(Td::zeros({0, 5})), EmptyInputError);
  CHECK_THROWS_AS((void)r(Td::zeros({2, 4})), DimensionError);
}

TEST_CASE("a single key gives every latent the same attention output") {
  ParamStore<double> store;
  Philox rng(2);
  Resampler<double> r({6, 6, 4, 1, 1, 2}, store, "", rng);
  randomize(store, rng);
  const auto x = rand_d({1, 6}, rng);
  // With the FFN zeroed the block is z + Wo·Wv·LN(x) for every latent.
  const auto& b = r.blocks()[0];
  auto w2 = b.w2, b2 = b.b2;
  for (auto& v : w2.data_mut()) v = 0;
  for (auto& v : b2.data_mut()) v = 0;
  const auto out = r(x);
  const auto value = linear(linear(layer_norm(x, b.ln_kv_g, b.ln_kv_b), b.wv, Td()), b.wo, Td());
  for (std::int64_t n = 0; n < 4; ++n) {
    for (std::int64_t c = 0; c < 6; ++c) CHECK(std::abs(out[n * 6 + c] - r.latents()[n * 6 + c] - value[c]) < 1e-12);
  }
}

TEST_CASE("resampler matches the loop oracle") {
  Philox rng(3);
  for (std::int64_t heads : {1, 2}) {
    ParamStore<double> store;
    Resampler<double> r({8, 5, 3, 2, heads, 4}, store, "", rng);
    randomize(store, rng);
    const auto x = rand_d({5, 5}, rng);
    CHECK(max_abs_diff(r(x).data(), oracle::resample(r, to_vec(x), 5)) < 1e-10);
  }
}

TEST_CASE("output shape is independent of the feature count") {
  ParamStore<float> store;
  Philox rng(4);
  Resampler<float> r({16, 12, 8, 2, 2, 4}, store, "", rng);
  for (std::int64_t s : {1, 4, 64, 196}) CHECK(r(Tf::randn({s, 12}, rng)).shape() == Shape{8, 16});
}

TEST_CASE("permuting the features leaves the output unchanged") {
  Philox rng(5);
  ParamStore<double> store;
  Resampler<double> r({8, 8, 4, 2, 2, 2}, store, "", rng);
  randomize(store, rng);
  const std::int64_t s = 9;
  const auto x = rand_d({s, 8}, rng);
  std::vector<std::int64_t> order(s);
  for (std::int64_t i = 0; i < s; ++i) order[i] = i;
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto permuted = embedding(x, order);
    CHECK(max_abs_diff(r(permuted).data(), r(x).data()) < 1e-12);
  }
}

TEST_CASE("one block passes gradcheck") {
  Philox rng(6);
  ParamStore<double> store;
  Resampler<double> r({6, 4, 3, 1, 2, 2}, store, "", rng);
  randomize(store, rng);
  auto x = rand_d({5, 4}, rng);
  std::vector<NamedTensor> params(store.items().begin(), store.items().end());
  params.emplace_back("x", x);
  expect_grad(gradcheck([&] { return probe(r(x)); }, params, {.tol = 1e-6}));
}
