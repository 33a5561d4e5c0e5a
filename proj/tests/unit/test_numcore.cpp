#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "oracle/numcore_oracle.hpp"

using namespace mmi;
using namespace testing;

TEST_CASE("philox known-answer vectors") {
  using Block = std::array<std::uint32_t, 4>;
  CHECK(Philox::encrypt({0, 0, 0, 0}, {0, 0}) == Block{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(Philox::encrypt({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        Block{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(Philox::encrypt({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        Block{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("philox streams are reproducible and split independently") {
  Philox a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());
  const auto c1 = Philox(42).split(1), c1b = Philox(42).split(1), c2 = Philox(42).split(2);
  CHECK(c1.key() == c1b.key());
  CHECK(c1.key() != c2.key());
  Philox r(3);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.05);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
  for (int i = 0; i < 1000; ++i) {
    const auto k = r.uniform_int(-3, 4);
    CHECK(k >= -3);
    CHECK(k < 4);
  }
}

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Td::from({2, 2}, {1, 2, 3}), DimensionError);
  auto t = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.dim(-1) == 3);
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS((void)t.dim(2), DimensionError);
  auto c = t.clone();
  c.data_mut()[0] = 9;
  CHECK(t[0] == 1);
}

TEST_CASE("linear examples") {
  auto id = Td::from({2, 2}, {1, 0, 0, 1});
  auto y = linear(Td::from({2}, {1, 0}), id, Td::zeros({2}));
  CHECK(to_vec(y) == std::vector<double>{1, 0});
  y = linear(Td::from({2}, {2, 3}), Td::zeros({2, 2}), Td::from({2}, {5, 7}));
  CHECK(to_vec(y) == std::vector<double>{5, 7});

  Philox rng(11);
  auto x = rand_d({3, 4}, rng), w = rand_d({5, 4}, rng), b = rand_d({5}, rng);
  const auto expect = oracle::linear(to_vec(x), 3, 4, to_vec(w), 5, to_vec(b));
  CHECK(max_abs_diff(linear(x, w, b).data(), expect) < 1e-12);
  CHECK_THROWS_AS(linear(x, rand_d({5, 3}, rng), b), DimensionError);
}

TEST_CASE("softmax examples and properties") {
  CHECK(max_abs_diff(softmax(Td::from({4}, {0, 0, 0, 0})).data(), std::vector<double>{0.25, 0.25, 0.25, 0.25}) < 1e-15);
  const auto big = softmax(Td::from({2}, {1000, 0}));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  const auto closed = softmax(Td::from({3}, {0, std::log(2.0), std::log(3.0)}));
  CHECK(max_abs_diff(closed.data(), std::vector<double>{1.0 / 6, 2.0 / 6, 3.0 / 6}) < 1e-15);
  CHECK_THROWS_AS(softmax(Td::zeros({3, 0})), DimensionError);

  Philox rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rows = rng.uniform_int(1, 5), d = rng.uniform_int(1, 9);
    auto x = rand_d({rows, d}, rng, 4.0);
    const auto y = softmax(x);
    auto shifted = x.clone();
    const double c = rng.uniform(-50, 50);
    for (auto& v : shifted.data_mut()) v += c;
    CHECK(max_abs_diff(softmax(shifted).data(), y.data()) < 1e-12);
    for (std::int64_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::int64_t i = 0; i < d; ++i) {
        CHECK(y[r * d + i] > 0.0);
        total += y[r * d + i];
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("cross_entropy examples") {
  std::vector<std::int64_t> targets{2};
  std::vector<std::uint8_t> mask{1};
  auto one_hot = Td::zeros({1, 4});
  one_hot.data_mut()[2] = 1e6;
  CHECK(cross_entropy(one_hot, targets, mask).item() < 1e-6);

  std::vector<std::int64_t> t1{17};
  CHECK(cross_entropy(Td::zeros({1, 256}), t1, mask).item() == doctest::Approx(std::log(256.0)).epsilon(1e-12));

  // Two positions, logits [[1,2,3],[0,0,ln 4]], targets [0, 2].
  auto logits = Td::from({2, 3}, {1, 2, 3, 0, 0, std::log(4.0)});
  std::vector<std::int64_t> t2{0, 2};
  std::vector<std::uint8_t> m2{1, 1};
  const double l0 = -1.0 + std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  const double l1 = -std::log(4.0 / 6.0);
  CHECK(cross_entropy(logits, t2, m2).item() == doctest::Approx((l0 + l1) / 2).epsilon(1e-14));
  std::vector<std::uint8_t> m_first{1, 0};
  CHECK(cross_entropy(logits, t2, m_first).item() == doctest::Approx(l0).epsilon(1e-14));

  std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, t2, none), EmptyInputError);
  std::vector<std::int64_t> bad{0, 3};
  CHECK_THROWS_AS(cross_entropy(logits, bad, m2), DimensionError);
}

TEST_CASE("gradcheck examples") {
  auto x = Td::from({3}, {1, 2, 3});
  auto report = gradcheck([&] { return sum(mul(x, x)); }, {{"x", x}}, {.tol = 1e-8});
  expect_grad(report);
  CHECK(max_abs_diff(x.grad(), std::vector<double>{2, 4, 6}) < 1e-12);

  auto c = Td::from({2}, {1, 2});
  report = gradcheck([&] { return Td::scalar(3.0); }, {{"c", c}});
  expect_grad(report);
  CHECK(report.worst_rel() == 0.0);

  auto bad = Td::from({1}, {0.0});
  CHECK_THROWS_AS(gradcheck([&] { return Td::scalar(1.0 / bad[0]); }, {{"b", bad}}), NumericError);

  // Two-layer MLP under cross-entropy.
  Philox rng(1);
  auto in = rand_d({5, 6}, rng), w1 = rand_d({8, 6}, rng, 0.5), b1 = rand_d({8}, rng), w2 = rand_d({4, 8}, rng, 0.5),
       b2 = rand_d({4}, rng);
  std::vector<std::int64_t> tg{0, 1, 2, 3, 1};
  std::vector<std::uint8_t> mk{1, 1, 0, 1, 1};
  report = gradcheck([&] { return cross_entropy(linear(tanh(linear(in, w1, b1)), w2, b2), tg, mk); },
                     {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"in", in}});
  expect_grad(report);
}

TEST_CASE("non-finite values raise") {
  auto x = Td::from({2}, {1e300, 1e300});
  CHECK_THROWS_AS(mul(x, x), NumericError);
}

namespace {

// Draws one random instance of every primitive and gradchecks it.
void check_primitives(Philox& rng) {
  const GradCheckOptions opt{.eps = 1e-5, .tol = 1e-6};
  const auto r = rng.uniform_int(1, 4), d = rng.uniform_int(1, 5);
  auto a = rand_d({r, d}, rng), b = rand_d({r, d}, rng), v = rand_d({d}, rng), s = rand_d({1}, rng);
  expect_grad(gradcheck([&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}}, opt));
  expect_grad(gradcheck([&] { return probe(sub(a, b)); }, {{"a", a}, {"b", b}}, opt));
  expect_grad(gradcheck([&] { return probe(mul(a, b)); }, {{"a", a}, {"b", b}}, opt));
  expect_grad(gradcheck([&] { return probe(scale(a, 1.7)); }, {{"a", a}}, opt));
  expect_grad(gradcheck([&] { return probe(mul_scalar(a, s)); }, {{"a", a}, {"s", s}}, opt));
  expect_grad(gradcheck([&] { return probe(add_rowvec(a, v)); }, {{"a", a}, {"v", v}}, opt));
  expect_grad(gradcheck([&] { return probe(tanh(a)); }, {{"a", a}}, opt));
  expect_grad(gradcheck([&] { return probe(silu(a)); }, {{"a", a}}, opt));
  expect_grad(gradcheck([&] { return probe(gelu(a)); }, {{"a", a}}, opt));
  expect_grad(gradcheck([&] { return probe(softmax(a)); }, {{"a", a}}, opt));
  expect_grad(gradcheck([&] { return mse(a, b); }, {{"a", a}, {"b", b}}, opt));
  expect_grad(gradcheck([&] { return mean(mul(a, a)); }, {{"a", a}}, opt));

  auto m2 = rand_d({d, 3}, rng);
  expect_grad(gradcheck([&] { return probe(matmul(a, m2)); }, {{"a", a}, {"m", m2}}, opt));
  auto w = rand_d({3, d}, rng), bias = rand_d({3}, rng);
  expect_grad(gradcheck([&] { return probe(linear(a, w, bias)); }, {{"a", a}, {"w", w}, {"b", bias}}, opt));
  expect_grad(gradcheck([&] { return probe(linear(a, w, Td())); }, {{"a", a}, {"w", w}}, opt));

  auto g = rand_d({d + 1}, rng), be = rand_d({d + 1}, rng), x = rand_d({r, d + 1}, rng);
  expect_grad(gradcheck([&] { return probe(layer_norm(x, g, be)); }, {{"x", x}, {"g", g}, {"b", be}}, opt));

  std::vector<std::int64_t> tg(static_cast<std::size_t>(r));
  std::vector<std::uint8_t> mk(static_cast<std::size_t>(r), 1);
  for (auto& t : tg) t = rng.uniform_int(0, d);
  expect_grad(gradcheck([&] { return cross_entropy(a, tg, mk); }, {{"a", a}}, opt));

  const auto heads = rng.uniform_int(1, 3);
  const auto tq = rng.uniform_int(1, 5), tk = rng.uniform_int(1, 6);
  auto q = rand_d({tq, 2 * heads}, rng), k = rand_d({tk, 2 * heads}, rng), vv = rand_d({tk, 2 * heads}, rng);
  std::vector<KeyRange> ranges;
  for (std::int64_t i = 0; i < tq; ++i) {
    const auto lo = rng.uniform_int(0, tk + 1);
    ranges.emplace_back(lo, rng.uniform_int(lo, tk + 1));
  }
  expect_grad(gradcheck([&] { return probe(attention(q, k, vv, heads, ranges)); }, {{"q", q}, {"k", k}, {"v", vv}}, opt));

  auto table = rand_d({6, d}, rng);
  std::vector<std::int64_t> ids{1, 5, 1, 0};
  expect_grad(gradcheck([&] { return probe(embedding(table, ids)); }, {{"table", table}}, opt));
  expect_grad(gradcheck([&] { return probe(slice_rows(a, 0, r)); }, {{"a", a}}, opt));
  auto c3 = rand_d({r, 2, 3}, rng), c4 = rand_d({r, 1, 3}, rng);
  expect_grad(gradcheck([&] { return probe(concat<double>({c3, c4}, 1)); }, {{"c3", c3}, {"c4", c4}}, opt));
  expect_grad(gradcheck([&] { return probe(reshape(c3, {2 * r, 3})); }, {{"c3", c3}}, opt));

  auto img = rand_d({2, 4, 6, 2}, rng), ker = rand_d({3, 3, 3, 2}, rng), kb = rand_d({3}, rng);
  const auto stride = rng.uniform_int(1, 3);
  expect_grad(gradcheck([&] { return probe(conv2d(img, ker, kb, stride, 1)); }, {{"x", img}, {"w", ker}, {"b", kb}}, opt));
  auto pw = rand_d({3, 1, 1, 2}, rng);
  expect_grad(gradcheck([&] { return probe(conv2d(img, pw, Td(), 1, 0)); }, {{"x", img}, {"w", pw}}, opt));
  expect_grad(gradcheck([&] { return probe(upsample2x(img)); }, {{"x", img}}, opt));
  expect_grad(gradcheck([&] { return probe(avgpool2x(img)); }, {{"x", img}}, opt));
  auto temb = rand_d({2, 2}, rng);
  expect_grad(gradcheck([&] { return probe(add_per_sample(img, temb)); }, {{"x", img}, {"e", temb}}, opt));
}

}  // namespace

TEST_CASE("every primitive passes gradcheck on 20 random instances") {
  Philox rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    check_primitives(rng);
  }
}

TEST_CASE("identical seeds give bit-identical outputs") {
  auto run = [] {
    Philox rng(77);
    auto x = Tf::randn({4, 8}, rng), w = Tf::randn({8, 8}, rng);
    return softmax(gelu(linear(x, w, Tf())));
  };
  const auto a = run(), b = run();
  CHECK(bit_equal(a.data(), b.data()));
}

TEST_CASE("gradients accumulate until zeroed") {
  auto x = Td::from({2}, {1, 2});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  CHECK(max_abs_diff(x.grad(), std::vector<double>{4, 8}) == 0.0);
  x.zero_grad();
  CHECK(!x.has_grad());
}
