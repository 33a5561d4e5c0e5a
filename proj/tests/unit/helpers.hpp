#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "mmi/gradcheck.hpp"
#include "mmi/ops.hpp"
#include "mmi/tensor.hpp"

namespace testing {

using Td = mmi::Tensor<double>;
using Tf = mmi::Tensor<float>;

inline Td rand_d(mmi::Shape shape, mmi::Philox& rng, double sigma = 1.0) { return Td::randn(std::move(shape), rng, sigma); }

inline std::vector<double> to_vec(const Td& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double max_abs_diff(std::span<const float> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

template <typename T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

// Weighted sum with fixed random weights, a generic scalar head for
// gradchecking tensor-valued functions.
inline Td probe(const Td& y, std::uint64_t seed = 7) {
  mmi::Philox rng(seed);
  auto w = Td::randn(y.shape(), rng);
  return mmi::sum(mmi::mul(y, w));
}

inline void expect_grad(const mmi::GradReport& report) {
  INFO(report.summary());
  CHECK(report.pass);
}

}  // namespace testing
