#pragma once

#include <functional>
#include <vector>

#include "lcv2i/tensor.hpp"

namespace lcv2i::testing {

// Central finite differences against the tape gradient. The builder is called
// with fresh Vars each evaluation so the graph is rebuilt from scratch.
inline double grad_check(const std::function<Var(const std::vector<Var>&)>& build,
                         const std::vector<Tensor>& inputs, double step = 1e-5) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.emplace_back(t, true);
  Var loss = build(vars);
  backward(loss);

  auto eval_at = [&](std::size_t vi, std::size_t elem, double delta) {
    std::vector<Var> vs;
    vs.reserve(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      Tensor t = inputs[k];
      if (k == vi) t.data[elem] += delta;
      vs.emplace_back(std::move(t), false);
    }
    return build(vs).value().data[0];
  };

  double max_rel = 0.0;
  for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
    for (std::size_t i = 0; i < inputs[vi].numel(); ++i) {
      const double fp = eval_at(vi, i, step);
      const double fm = eval_at(vi, i, -step);
      const double fd = (fp - fm) / (2.0 * step);
      const double ad = vars[vi].grad().data[i];
      if (std::abs(fd) < 1e-7 && std::abs(ad) < 1e-7) continue;
      const double rel = std::abs(fd - ad) / std::max(std::abs(fd), std::abs(ad));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace lcv2i::testing
