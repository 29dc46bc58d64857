#include "hybridnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace hybridnet {

namespace {

std::atomic<uint64_t> g_seq{0};
thread_local int g_no_grad_depth = 0;

#ifdef NDEBUG
bool g_debug_checks = false;
#else
bool g_debug_checks = true;
#endif

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

std::shared_ptr<TensorImpl> new_impl(std::vector<int64_t> shape,
                                     std::vector<double> data,
                                     bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor: shape does not match data length");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->needs_grad = requires_grad;
  return impl;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

bool debug_checks_enabled() { return g_debug_checks; }
void set_debug_checks(bool enabled) { g_debug_checks = enabled; }

void check_finite(const char* what, std::span<const double> values) {
  if (!g_debug_checks) return;
  for (double v : values)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value in ") + what);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, 0.0),
                         requires_grad));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value,
                    bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value),
                         requires_grad));
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int64_t> shape, std::mt19937_64& rng,
                     double stddev, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  std::vector<double> data(n);
  // Box-Muller over a pinned uniform so streams are reproducible across
  // standard library implementations.
  auto uniform01 = [&rng]() {
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  };
  for (int64_t i = 0; i < n; i += 2) {
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    data[i] = stddev * r * std::cos(2.0 * M_PI * u2);
    if (i + 1 < n) data[i + 1] = stddev * r * std::sin(2.0 * M_PI * u2);
  }
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

double Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("item(): tensor is not scalar");
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool v) {
  if (impl_->node)
    throw std::runtime_error("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = v;
  impl_->needs_grad = v;
}

std::span<const double> Tensor::grad() const {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone() const {
  return Tensor(new_impl(impl_->shape, impl_->data, false));
}

void accumulate_grad(const std::shared_ptr<TensorImpl>& t,
                     std::span<const double> delta) {
  if (!t->needs_grad) return;
  t->ensure_grad();
  for (size_t i = 0; i < delta.size(); ++i) t->grad[i] += delta[i];
}

Tensor make_node(const char* op, std::vector<int64_t> shape,
                 std::vector<double> data, std::vector<Tensor> inputs,
                 std::function<void(TensorImpl&)> backward_fn) {
  auto impl = new_impl(std::move(shape), std::move(data), false);
  check_finite(op, impl->data);
  bool needs = false;
  if (grad_enabled())
    for (const Tensor& t : inputs) needs = needs || t.impl_->needs_grad;
  if (needs) {
    auto node = std::make_shared<GradNode>();
    node->op = op;
    node->seq = ++g_seq;
    node->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) node->inputs.push_back(t.impl_);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
    impl->needs_grad = true;
  }
  return Tensor(impl);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::runtime_error("backward: loss must be a scalar tensor");
  TensorImpl* root = loss.impl_.get();
  root->ensure_grad();
  root->grad[0] += 1.0;
  if (!root->node) return;

  // Collect reachable recorded nodes, then replay newest-first.
  std::vector<TensorImpl*> stack{root};
  std::unordered_set<TensorImpl*> seen{root};
  std::vector<TensorImpl*> recorded;
  while (!stack.empty()) {
    TensorImpl* t = stack.back();
    stack.pop_back();
    if (!t->node) continue;
    recorded.push_back(t);
    for (const auto& in : t->node->inputs)
      if (seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(recorded.begin(), recorded.end(),
            [](const TensorImpl* a, const TensorImpl* b) {
              return a->node->seq > b->node->seq;
            });
  for (TensorImpl* t : recorded) {
    t->ensure_grad();
    t->node->backward(*t);
  }
}

}  // namespace hybridnet
