#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmi/tensor.hpp"

namespace mmi {

struct GradEntry {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::int64_t checked = 0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double tolerance = 0.0;
  bool pass = true;

  [[nodiscard]] double worst_rel() const;
  [[nodiscard]] std::string summary() const;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-6;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double floor = 1e-3;
  // Coordinates checked per tensor; tensors at most this large are checked
  // in full, larger ones on a seeded random subset.
  std::int64_t coords = 64;
  std::uint64_t seed = 0x9e37;
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

/// Compares reverse-mode gradients of the scalar f against central
/// differences. Parameters are perturbed in place and restored; f must read
/// them through the shared handles. Throws NumericError if f is non-finite.
GradReport gradcheck(const std::function<Tensor<double>()>& f, const std::vector<NamedTensor>& params,
                     const GradCheckOptions& options = {});

}  // namespace mmi
