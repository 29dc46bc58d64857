#include "hybridnet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hybridnet {

namespace {

void require_grad_present(const Tensor& p) {
  if (!p.has_grad())
    throw std::runtime_error("optimizer: missing gradient for parameter '" +
                             (p.name().empty() ? std::string("<unnamed>")
                                               : p.name()) +
                             "'");
}

}  // namespace

void sgd_step(std::span<Tensor> params, double lr) {
  for (Tensor& p : params) {
    require_grad_present(p);
    auto d = p.mutable_data();
    const auto& g = p.impl_->grad;
    for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
}

void adam_step(std::span<Tensor> params, double lr, double beta1, double beta2,
               double eps, AdamState& state) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (Tensor& p : params) {
    require_grad_present(p);
    auto& slot = state.slots[p.impl_.get()];
    if (slot.m.size() != p.impl_->data.size()) {
      slot.m.assign(p.impl_->data.size(), 0.0);
      slot.v.assign(p.impl_->data.size(), 0.0);
    }
    auto d = p.mutable_data();
    const auto& g = p.impl_->grad;
    for (size_t i = 0; i < d.size(); ++i) {
      slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
      slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      d[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace hybridnet
