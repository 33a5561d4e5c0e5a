#pragma once

// Random MMFS instances shared by the unit tests, the acceptance suite and
// the self-test runner.

#include <cmath>
#include <memory>
#include <vector>

#include "mmi/mmfs.hpp"
#include "mmi/ops.hpp"
#include "oracle/mmfs_oracle.hpp"

namespace mmi::oracle {

struct MMFSCase {
  MMFSConfig config;
  std::unique_ptr<ParamStore<double>> store;
  std::unique_ptr<MMFS<double>> module;
  std::vector<ImagePyramid<double>> pyramids;  // oldest first
  Tensor<double> queries;                      // [Q, Dq]
  Tensor<double> refs;                         // [Q, 2]

  [[nodiscard]] std::vector<const ImagePyramid<double>*> pointers() const {
    std::vector<const ImagePyramid<double>*> out;
    for (const auto& p : pyramids) out.push_back(&p);
    return out;
  }

  [[nodiscard]] MMFSWeights weights() const {
    auto vec = [](const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); };
    const auto& m = *module;
    return {vec(m.wq()), vec(m.bq()), vec(m.wp()), vec(m.bp()), vec(m.wa()), vec(m.ba()), vec(m.pos()),
            config.query_dim, config.feature_dim, config.heads, config.levels, config.points};
  }

  [[nodiscard]] std::vector<std::vector<Map>> maps() const {
    std::vector<std::vector<Map>> out;
    for (const auto& p : pyramids) {
      std::vector<Map> levels;
      for (const auto& l : p.levels) levels.push_back({Vec(l.data().begin(), l.data().end()), l.dim(0), l.dim(1)});
      out.push_back(std::move(levels));
    }
    return out;
  }
};

struct MMFSCaseSpec {
  std::int64_t images = 2;
  std::int64_t levels = 3;
  std::int64_t points = 4;
  std::int64_t heads = 1;
  std::int64_t queries = 3;
  std::int64_t query_dim = 6;
  std::int64_t feature_dim = 4;
  std::int64_t base_size = 8;  // level l is (base_size >> l) square, at least 1
  GateKind gate = GateKind::Decoder;
  double offset_scale = 0.15;
};

// Every parameter, including the zero-initialized ones, is redrawn so the
// case exercises non-trivial offsets, weights and gates.
inline MMFSCase make_mmfs_case(const MMFSCaseSpec& spec, Philox& rng) {
  MMFSCase c;
  c.config = {spec.query_dim, spec.gate == GateKind::Llm ? spec.query_dim : spec.feature_dim, spec.levels, spec.points,
              6, spec.heads, 0.0, spec.gate};
  c.store = std::make_unique<ParamStore<double>>();
  c.module = std::make_unique<MMFS<double>>(c.config, *c.store, "mmfs.", rng);
  for (auto& [name, t] : c.store->items()) {
    auto handle = t;
    const bool offsets = name == "mmfs.wp" || name == "mmfs.bp";
    const double sigma = offsets ? spec.offset_scale / std::sqrt(static_cast<double>(c.config.feature_dim)) : 0.5;
    for (auto& v : handle.data_mut()) v = sigma * rng.normal();
  }
  const auto f = c.config.feature_dim;
  for (std::int64_t m = 0; m < spec.images; ++m) {
    ImagePyramid<double> p;
    for (std::int64_t l = 0; l < spec.levels; ++l) {
      const auto s = std::max<std::int64_t>(spec.base_size >> l, 1);
      p.levels.push_back(Tensor<double>::randn({s, s, f}, rng));
    }
    p.height = p.width = spec.base_size * 8;
    c.pyramids.push_back(std::move(p));
  }
  c.queries = Tensor<double>::randn({spec.queries, spec.query_dim}, rng);
  c.refs = Tensor<double>::uniform({spec.queries, 2}, rng, 0.05, 0.95);
  return c;
}

// Smallest distance, in pixels of any level, from a sampling location to a
// cell boundary where bilinear interpolation has a kink.
inline double kink_margin(const MMFSCase& c) {
  NoGradGuard guard;
  std::vector<std::int64_t> ids(c.pyramids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  const auto plan = c.module->plan(c.queries, c.refs, ids);
  const auto loc = plan.locations.data();
  double margin = 1.0;
  for (std::size_t i = 0; i < loc.size(); ++i) {
    for (const auto& level : c.pyramids[0].levels) {
      const double extent = static_cast<double>(i % 2 == 0 ? level.dim(1) : level.dim(0));
      const double x = loc[i] * extent - 0.5;
      margin = std::min(margin, std::abs(x - std::round(x)));
    }
  }
  return margin;
}

}  // namespace mmi::oracle
