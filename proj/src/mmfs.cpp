#include "mmi/mmfs.hpp"

#include <cmath>

#include "mmi/ops.hpp"

namespace mmi {

template <typename T>
MMFS<T>::MMFS(const MMFSConfig& config, ParamStore<T>& store, const std::string& prefix, Philox& rng)
    : config_(config) {
  const auto& c = config;
  if (c.points < 1 || c.max_images < 1 || c.levels < 1 || c.heads < 1) {
    throw ConfigError("mmfs: points, max_images, levels and heads must all be at least 1");
  }
  if (c.feature_dim % c.heads != 0) throw ConfigError("mmfs: feature_dim must be divisible by heads");
  if (c.gate == GateKind::Llm && c.query_dim != c.feature_dim) {
    throw ConfigError("mmfs: the tanh-gated variant adds f_o to f_q, so query_dim must equal feature_dim");
  }
  const auto f = c.feature_dim;
  wq_ = store.add(prefix + "wq", init_linear<T>(rng, f, c.query_dim));
  bq_ = store.add(prefix + "bq", Tensor<T>::zeros({f}));
  wp_ = store.add(prefix + "wp", Tensor<T>::zeros({c.heads * c.points * 2, f}));
  bp_ = store.add(prefix + "bp", Tensor<T>::zeros({c.heads * c.points * 2}));
  wa_ = store.add(prefix + "wa", Tensor<T>::zeros({c.heads * c.levels * c.points, f}));
  ba_ = store.add(prefix + "ba", Tensor<T>::zeros({c.heads * c.levels * c.points}));
  pos_ = store.add(prefix + "pos", Tensor<T>::randn({c.max_images, f}, rng, 0.02));
  if (c.gate == GateKind::Llm) {
    alpha_ = store.add(prefix + "alpha", Tensor<T>::scalar(static_cast<T>(c.alpha_init)));
  } else {
    gate_w_ = store.add(prefix + "gate.w", Tensor<T>::zeros({c.query_dim, f}));
    gate_b_ = store.add(prefix + "gate.b", Tensor<T>::zeros({c.query_dim}));
  }
}

template <typename T>
SamplingPlan<T> MMFS<T>::plan(const Tensor<T>& queries, const Tensor<T>& refs,
                              std::span<const std::int64_t> visible) const {
  const auto& c = config_;
  const auto m_count = static_cast<std::int64_t>(visible.size());
  if (m_count == 0) throw EmptyInputError("mmfs plan: no visible images");
  if (m_count > c.max_images) {
    throw CapacityError("mmfs plan: " + std::to_string(m_count) + " visible images exceed the cap of " +
                        std::to_string(c.max_images));
  }
  if (queries.rank() != 2 || queries.dim(1) != c.query_dim) {
    throw DimensionError("mmfs plan: queries " + to_string(queries.shape()) + ", expected [Q, " +
                         std::to_string(c.query_dim) + "]");
  }
  const auto q = queries.dim(0);
  if (refs.shape() != Shape{q, 2}) throw DimensionError("mmfs plan: refs must be [Q, 2], got " + to_string(refs.shape()));

  const auto base = linear(queries, wq_, bq_);
  std::vector<Tensor<T>> offsets, logits;
  for (std::int64_t m = 0; m < m_count; ++m) {
    const std::int64_t rank[] = {m_count - 1 - m};
    const auto qm = add_rowvec(base, embedding(pos_, rank));
    offsets.push_back(reshape(linear(qm, wp_, bp_), {q, 1, c.heads * c.points * 2}));
    logits.push_back(reshape(linear(qm, wa_, ba_), {q, c.heads, 1, c.levels * c.points}));
  }

  std::vector<T> anchor(static_cast<std::size_t>(q * m_count * c.heads * c.points * 2));
  const auto ref = refs.data();
  for (std::size_t i = 0; i < anchor.size(); i += 2) {
    const auto row = static_cast<std::int64_t>(i) / (m_count * c.heads * c.points * 2);
    anchor[i] = ref[2 * row];
    anchor[i + 1] = ref[2 * row + 1];
  }
  const Shape loc_shape{q, m_count, c.heads, c.points, 2};
  SamplingPlan<T> out;
  out.locations = add(reshape(concat(offsets, 1), loc_shape), Tensor<T>::from(loc_shape, std::move(anchor)));
  out.weights = reshape(softmax(reshape(concat(logits, 2), {q, c.heads, m_count * c.levels * c.points})),
                        {q, c.heads, m_count, c.levels, c.points});
  out.images.assign(visible.begin(), visible.end());
  return out;
}

template <typename T>
Tensor<T> MMFS<T>::sample(std::span<const ImagePyramid<T>* const> pyramids, const SamplingPlan<T>& plan) const {
  if (pyramids.size() != plan.images.size()) {
    throw DimensionError("mmfs sample: " + std::to_string(pyramids.size()) + " pyramids for a plan over " +
                         std::to_string(plan.images.size()) + " images");
  }
  std::vector<std::vector<Tensor<T>>> levels;
  for (const auto* pyramid : pyramids) {
    if (!pyramid) throw LookupError("mmfs sample: missing pyramid");
    if (static_cast<std::int64_t>(pyramid->levels.size()) != config_.levels) {
      throw DimensionError("mmfs sample: pyramid has " + std::to_string(pyramid->levels.size()) + " levels, expected " +
                           std::to_string(config_.levels));
    }
    if (pyramid->channels() != config_.feature_dim) {
      throw DimensionError("mmfs sample: pyramid width " + std::to_string(pyramid->channels()) + ", expected " +
                           std::to_string(config_.feature_dim));
    }
    levels.push_back(pyramid->levels);
  }
  return deform_attn(levels, plan.locations, plan.weights);
}

template <typename T>
Tensor<T> MMFS<T>::gate(const Tensor<T>& queries, const Tensor<T>& fo) const {
  if (config_.gate == GateKind::Llm) return add(queries, mul_scalar(fo, tanh(alpha_)));
  return add(queries, linear(fo, gate_w_, gate_b_));
}

template <typename T>
Tensor<T> MMFS<T>::apply(const Tensor<T>& queries, const Tensor<T>& refs,
                         std::span<const ImagePyramid<T>* const> pyramids) const {
  if (pyramids.empty()) return queries;
  const auto keep = std::min<std::size_t>(pyramids.size(), static_cast<std::size_t>(config_.max_images));
  const auto recent = pyramids.subspan(pyramids.size() - keep);
  std::vector<std::int64_t> ids(keep);
  for (std::size_t i = 0; i < keep; ++i) ids[i] = static_cast<std::int64_t>(pyramids.size() - keep + i);
  const auto p = plan(queries, refs, ids);
  return gate(queries, sample(recent, p));
}

template <typename T>
Tensor<T> MMFS<T>::apply_rows(const Tensor<T>& queries, const Tensor<T>& refs,
                              const std::vector<std::vector<std::int64_t>>& visible,
                              std::span<const ImagePyramid<T>* const> pyramids) const {
  const auto rows = queries.dim(0);
  if (static_cast<std::int64_t>(visible.size()) != rows) {
    throw DimensionError("mmfs apply_rows: " + std::to_string(visible.size()) + " visibility lists for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<Tensor<T>> parts;
  std::int64_t begin = 0;
  while (begin < rows) {
    auto end = begin + 1;
    while (end < rows && visible[end] == visible[begin]) ++end;
    const auto block = rows == end - begin ? queries : slice_rows(queries, begin, end);
    if (visible[begin].empty()) {
      parts.push_back(block);
    } else {
      std::vector<const ImagePyramid<T>*> seen;
      for (auto id : visible[begin]) {
        if (id < 0 || id >= static_cast<std::int64_t>(pyramids.size()) || !pyramids[id]) {
          throw LookupError("mmfs apply_rows: no pyramid for image " + std::to_string(id));
        }
        seen.push_back(pyramids[id]);
      }
      parts.push_back(apply(block, slice_rows(refs, begin, end), seen));
    }
    begin = end;
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

template class MMFS<float>;
template class MMFS<double>;

}  // namespace mmi
