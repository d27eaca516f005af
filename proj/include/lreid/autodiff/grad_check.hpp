#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "lreid/autodiff/graph.hpp"
#include "lreid/error.hpp"

namespace lreid::ad {

/// Scalar-valued function of graph leaves.
template <typename F>
concept ScalarGraphFn = std::invocable<F&, Graph&, std::span<const Var>> &&
                        std::same_as<std::invoke_result_t<F&, Graph&, std::span<const Var>>, Var>;

namespace detail {

template <ScalarGraphFn F>
double evaluate(F& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  const double v = f(g, vars).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Maximum over all input coordinates of
///   |analytic - central_difference| / max(1, |analytic|, |central_difference|).
template <ScalarGraphFn F>
double grad_check(F f, std::vector<Tensor> inputs, double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("grad_check: step must lie in [1e-7, 1e-3]");

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t, true));
    Var out = f(g, vars);
    if (out.value().size() != 1) throw DimensionError("grad_check: function must be scalar-valued");
    if (!std::isfinite(out.value()[0])) throw NumericError("grad_check: non-finite function value");
    g.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double up = detail::evaluate(f, inputs);
      inputs[i][k] = orig - h;
      const double down = detail::evaluate(f, inputs);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lreid::ad
