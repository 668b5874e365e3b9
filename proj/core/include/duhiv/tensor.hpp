#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace duhiv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation produces NaN or Inf, or receives a value outside its domain.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (!has_grad) {
      grad.assign(values.size(), 0.0);
      has_grad = true;
    }
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles. Copies share storage; use clone() or
/// detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // Writes bypass the graph; meant for parameter updates and test fixtures.
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaf tensors that require grad
/// accumulate across calls; intermediate gradients are recomputed each call.
void backward(const Tensor& loss);

/// While alive, ops on this thread do not record history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Builds an op output: validates finiteness, wires history when any input
/// requires grad and recording is enabled.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, BackwardFn fn);
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

void check_finite(std::span<const double> values, const char* op);

}  // namespace detail

}  // namespace duhiv
