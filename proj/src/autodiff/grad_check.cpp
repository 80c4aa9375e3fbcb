// SPDX-License-Identifier: Apache-2.0
#include "alitok/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace alitok::ad {
namespace {

double eval_finite(const std::function<Tensor()>& loss) {
  const double v = loss().item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function value at probe point");
  return v;
}

}  // namespace

double grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params, double step) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  for (auto& p : params) {
    if (p.dtype() != DType::F64) throw std::invalid_argument("grad_check: parameters must be F64");
    if (!p.data().all_finite()) throw NonFiniteError("grad_check: non-finite probe point");
    p.zero_grad();
  }
  Tensor root = loss();
  if (!std::isfinite(root.item())) throw NonFiniteError("grad_check: non-finite function value at probe point");
  root.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad_vector());

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values<double>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = eval_finite(loss);
      values[i] = orig - step;
      const double down = eval_finite(loss);
      values[i] = orig;
      const double numeric = (up - down) / (2 * step);
      worst = std::max(worst, std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step) {
  Tensor leaf = point;
  leaf.set_requires_grad(true);
  return grad_check_params([&] { return f(leaf); }, {leaf}, step);
}

}  // namespace alitok::ad
