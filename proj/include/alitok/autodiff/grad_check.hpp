// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "alitok/autodiff/tensor.hpp"

namespace alitok::ad {

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// `point` must be an F64 leaf; f must return a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step);

/// Same measure over every coordinate of every leaf in `params`. `loss` rebuilds
/// the graph from the current leaf values on each call. Leaves are restored on return.
double grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params, double step);

}  // namespace alitok::ad
