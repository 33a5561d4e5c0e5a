#include "mmi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mmi {

double GradReport::worst_rel() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel);
  return worst;
}

std::string GradReport::summary() const {
  std::ostringstream out;
  out << (pass ? "pass" : "FAIL") << " (tol " << tolerance << ")";
  for (const auto& e : entries) {
    out << "\n  " << e.name << ": rel " << e.max_rel << ", abs " << e.max_abs << " over " << e.checked << " coords";
  }
  return out.str();
}

namespace {

double evaluate(const std::function<Tensor<double>()>& f) {
  const auto value = f();
  if (value.numel() != 1) throw DimensionError("gradcheck: f must return a scalar, got " + to_string(value.shape()));
  const double v = value.item();
  if (!std::isfinite(v)) throw NumericError("gradcheck: f evaluated to a non-finite value");
  return v;
}

}  // namespace

GradReport gradcheck(const std::function<Tensor<double>()>& f, const std::vector<NamedTensor>& params,
                     const GradCheckOptions& options) {
  auto tensors = params;
  for (auto& [name, t] : tensors) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    const auto value = f();
    if (value.numel() != 1) throw DimensionError("gradcheck: f must return a scalar, got " + to_string(value.shape()));
    if (!std::isfinite(value.item())) throw NumericError("gradcheck: f evaluated to a non-finite value");
    value.backward();
  }

  GradReport report;
  report.tolerance = options.tol;
  Philox rng(options.seed);
  NoGradGuard no_grad;
  for (auto& [name, t] : tensors) {
    const auto analytic = t.grad();
    const auto n = t.numel();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.coords));
    }
    GradEntry entry{name, 0.0, 0.0, static_cast<std::int64_t>(coords.size())};
    auto values = t.data_mut();
    for (auto i : coords) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double up = evaluate(f);
      values[i] = saved - options.eps;
      const double down = evaluate(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      entry.max_abs = std::max(entry.max_abs, abs_err);
      entry.max_rel = std::max(entry.max_rel, rel_err);
    }
    if (entry.max_rel > options.tol) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mmi
