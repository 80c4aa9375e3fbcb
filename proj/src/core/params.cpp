// SPDX-License-Identifier: Apache-2.0
#include "alitok/core/params.hpp"

#include <stdexcept>

namespace alitok {

ad::Tensor ParamStore::insert(const std::string& name, ad::Tensor t) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  entries_.emplace_back(name, t);
  return t;
}

ad::Tensor ParamStore::add_zeros(const std::string& name, const ad::Shape& shape) {
  return insert(name, ad::Tensor::zeros(shape, dtype_));
}

ad::Tensor ParamStore::add_ones(const std::string& name, const ad::Shape& shape) {
  return insert(name, ad::Tensor::full(shape, 1.0, dtype_));
}

ad::Tensor ParamStore::add_normal(const std::string& name, const ad::Shape& shape, double std, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = rng.truncated_normal(std);
  return insert(name, ad::Tensor::from(shape, std::move(v), dtype_));
}

ad::Tensor ParamStore::get(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("ParamStore: no parameter '" + std::string(name) + "'");
}

bool ParamStore::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

std::vector<ad::Tensor> ParamStore::tensors() const {
  std::vector<ad::Tensor> out;
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::vector<ad::Tensor> ParamStore::with_prefix(std::string_view prefix) const {
  std::vector<ad::Tensor> out;
  for (const auto& [n, t] : entries_)
    if (n.starts_with(prefix)) out.push_back(t);
  return out;
}

void ParamStore::set_trainable(std::string_view prefix, bool on) {
  for (auto& [n, t] : entries_)
    if (n.starts_with(prefix)) t.set_requires_grad(on);
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

std::int64_t ParamStore::count_values() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

}  // namespace alitok
