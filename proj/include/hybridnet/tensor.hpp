#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

// Dense f64 tensors with reverse-mode autodiff. A Tensor is a cheap handle
// onto a shared node; ops record the backward closure when gradients are
// enabled and any input requires them. backward() replays the recorded nodes
// in reverse creation order and sums gradients into every contributing input.

namespace hybridnet {

struct TensorImpl;

struct GradNode {
  const char* op = "";
  uint64_t seq = 0;  // creation order; backward visits descending seq
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad or downstream of something that does
  std::string name;
  std::shared_ptr<GradNode> node;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng,
                      double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  int64_t numel() const { return impl_->numel(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad();

  const std::string& name() const { return impl_->name; }
  Tensor& set_name(std::string n) {
    impl_->name = std::move(n);
    return *this;
  }

  // Deep copy without graph history.
  Tensor clone() const;
  // Same values, no graph history, requires_grad off.
  Tensor detach() const { return clone(); }

  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local switch that stops ops from recording backward closures.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Builds an op output; attaches the node only when gradients are live.
// `backward` receives the output impl (grad populated) and must accumulate
// (+=) into the inputs' grads.
Tensor make_node(const char* op, std::vector<int64_t> shape,
                 std::vector<double> data, std::vector<Tensor> inputs,
                 std::function<void(TensorImpl&)> backward);

// Reverse-mode sweep from a scalar loss. Throws on non-scalar input.
void backward(const Tensor& loss);

// Finite checks on op outputs. Default: on in debug builds, off in release;
// tests and debugging can flip it at runtime.
bool debug_checks_enabled();
void set_debug_checks(bool enabled);
void check_finite(const char* what, std::span<const double> values);

// Gradient accumulation helper shared by op implementations.
void accumulate_grad(const std::shared_ptr<TensorImpl>& t,
                     std::span<const double> delta);

}  // namespace hybridnet
