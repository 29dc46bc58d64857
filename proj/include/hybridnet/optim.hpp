#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "hybridnet/tensor.hpp"

namespace hybridnet {

// Plain gradient step: p -= lr * grad. Throws if a parameter has no
// populated gradient, naming the parameter.
void sgd_step(std::span<Tensor> params, double lr);

struct AdamState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::unordered_map<TensorImpl*, Slot> slots;
  int64_t t = 0;
};

void adam_step(std::span<Tensor> params, double lr, double beta1, double beta2,
               double eps, AdamState& state);

}  // namespace hybridnet
