#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmi/tensor.hpp"

namespace mmi {

/// Ordered registry of named trainable tensors. Models register their
/// parameters here at construction; optimizers, checkpoints and gradcheck
/// iterate it in registration order.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  /// Registers `value` under `name` (must be new) and marks it trainable.
  Tensor<T> add(std::string name, Tensor<T> value);

  [[nodiscard]] const std::vector<Entry>& items() const { return items_; }
  [[nodiscard]] std::vector<Entry> with_prefix(const std::string& prefix) const;
  /// nullptr if absent.
  [[nodiscard]] const Tensor<T>* find(const std::string& name) const;
  [[nodiscard]] const Tensor<T>& at(const std::string& name) const;
  [[nodiscard]] std::int64_t count() const;
  [[nodiscard]] std::size_t size() const { return items_.size(); }

  void zero_grad();
  void set_requires_grad(bool on);

 private:
  std::vector<Entry> items_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

/// Gaussian weight matrix [rows, cols] with std 1/sqrt(cols) times `gain`.
template <typename T>
Tensor<T> init_linear(Philox& rng, std::int64_t rows, std::int64_t cols, double gain = 1.0);

}  // namespace mmi
