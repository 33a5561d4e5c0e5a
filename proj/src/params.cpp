#include "mmi/params.hpp"

#include <cmath>

namespace mmi {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Tensor<T> value) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  items_.emplace_back(std::move(name), value);
  return value;
}

template <typename T>
std::vector<typename ParamStore<T>::Entry> ParamStore<T>::with_prefix(const std::string& prefix) const {
  std::vector<Entry> out;
  for (const auto& e : items_) {
    if (e.first.rfind(prefix, 0) == 0) out.push_back(e);
  }
  return out;
}

template <typename T>
const Tensor<T>* ParamStore<T>::find(const std::string& name) const {
  for (const auto& e : items_) {
    if (e.first == name) return &e.second;
  }
  return nullptr;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  const auto* t = find(name);
  if (!t) throw LookupError("unknown parameter '" + name + "'");
  return *t;
}

template <typename T>
std::int64_t ParamStore<T>::count() const {
  std::int64_t n = 0;
  for (const auto& e : items_) n += e.second.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : items_) e.second.zero_grad();
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& e : items_) e.second.set_requires_grad(on);
}

template <typename T>
Tensor<T> init_linear(Philox& rng, std::int64_t rows, std::int64_t cols, double gain) {
  return Tensor<T>::randn({rows, cols}, rng, gain / std::sqrt(static_cast<double>(cols)));
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> init_linear(Philox&, std::int64_t, std::int64_t, double);
template Tensor<double> init_linear(Philox&, std::int64_t, std::int64_t, double);

}  // namespace mmi
