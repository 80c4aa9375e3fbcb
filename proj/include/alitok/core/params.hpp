// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "alitok/autodiff/tensor.hpp"
#include "alitok/core/rng.hpp"

namespace alitok {

/// Named, ordered collection of trainable leaves. Order is insertion order and
/// fixes checkpoint layout and optimizer traversal.
class ParamStore {
 public:
  explicit ParamStore(ad::DType dtype = ad::DType::F32) : dtype_(dtype) {}

  ad::Tensor add_zeros(const std::string& name, const ad::Shape& shape);
  ad::Tensor add_ones(const std::string& name, const ad::Shape& shape);
  ad::Tensor add_normal(const std::string& name, const ad::Shape& shape, double std, Rng& rng);

  ad::Tensor get(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<std::pair<std::string, ad::Tensor>>& entries() const { return entries_; }
  std::vector<ad::Tensor> tensors() const;
  /// Tensors whose name starts with prefix.
  std::vector<ad::Tensor> with_prefix(std::string_view prefix) const;

  /// Toggles requires_grad for every tensor under prefix.
  void set_trainable(std::string_view prefix, bool on);
  void zero_grad();
  std::size_t size() const { return entries_.size(); }
  std::int64_t count_values() const;
  ad::DType dtype() const { return dtype_; }

 private:
  ad::Tensor insert(const std::string& name, ad::Tensor t);

  ad::DType dtype_;
  std::vector<std::pair<std::string, ad::Tensor>> entries_;
};

}  // namespace alitok
