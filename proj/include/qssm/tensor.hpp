#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qssm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major double tensor. Copies of a Tensor share storage (handle
// semantics, like a framework tensor); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  // Gradient buffer; allocated (zero-filled) on first mutable access.
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  Tensor grad_tensor() const;
  void zero_grad();

  // A leaf was created directly, not produced by a recorded operation.
  bool is_leaf() const;

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  friend class Tape;
};

// Ordered record of operations for one forward pass. Single-threaded.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every backward rule in reverse order.
  // Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss);

  // Name of the first recorded op whose output holds a NaN or Inf.
  std::optional<std::string> first_non_finite() const;

 private:
  std::vector<Node> nodes_;
};

void backward(Tape& tape, const Tensor& loss);

// Thread-local active tape. Operations record onto it when any input requires grad.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording within its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// True when an op over `inputs` must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);

// Marks `out` as produced by an op and records it on the active tape.
void record_op(std::string op, std::vector<Tensor> inputs, Tensor& out,
               std::function<void()> backward);

// User-defined forward/backward pair. The forward runs with recording suspended,
// so its internals never reach the tape; the backward maps the upstream gradient
// to one gradient per input.
struct CustomGradNode {
  std::string name;
  std::function<Tensor(std::span<const Tensor>)> forward;
  std::function<std::vector<Tensor>(std::span<const Tensor> inputs, const Tensor& output,
                                    const Tensor& grad_output)>
      backward;
  std::optional<Shape> output_shape;
};

Tensor register_custom_grad(const CustomGradNode& node, std::vector<Tensor> inputs);

}  // namespace qssm
