#pragma once

#include <string>
#include <unordered_map>

#include "lreid/error.hpp"
#include "lreid/model/params.hpp"

namespace lreid::train {

/// v = momentum * v + g;  p -= lr * v.  No weight decay.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  }

  void step(model::ModelParams& params) {
    for (auto& [name, p] : params.named()) {
      if (!p->requires_grad) continue;
      auto [it, fresh] = velocity_.try_emplace(name, p->value.shape());
      Tensor& v = it->second;
      if (v.shape() != p->value.shape()) throw StateError("optimizer state shape changed for " + name);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + p->grad[i];
        p->value[i] -= lr_ * v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  double lr_, momentum_;
  std::unordered_map<std::string, Tensor> velocity_;
};

}  // namespace lreid::train
