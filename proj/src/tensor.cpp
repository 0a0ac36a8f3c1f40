#include "qssm/tensor.hpp"

#include <cmath>
#include <sstream>

#include "qssm/error.hpp"

namespace qssm {

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  mutable std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
};

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

static void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= impl_->shape.size()) throw ShapeError("dimension index out of range");
  return impl_->shape[i];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return Tensor::from(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return impl_->leaf; }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// --- Tape -------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(std::span<const Tensor> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  output.impl_->leaf = false;
  output.impl_->requires_grad = true;
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void record_op(std::string op, std::vector<Tensor> inputs, Tensor& out, std::function<void()> backward) {
  if (!g_active_tape) return;
  g_active_tape->record(std::move(op), std::move(inputs), out, std::move(backward));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw ShapeError("backward: loss is not connected to any tensor that requires grad");
  }
  for (auto& node : nodes_) {
    std::fill(node.output.impl_->grad.begin(), node.output.impl_->grad.end(), 0.0);
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (double v : nodes_[i].output.data()) {
      if (!std::isfinite(v)) return nodes_[i].op + " (node " + std::to_string(i) + ")";
    }
  }
  return std::nullopt;
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// --- Custom gradients ---------------------------------------------------------

Tensor register_custom_grad(const CustomGradNode& node, std::vector<Tensor> inputs) {
  Tensor out;
  {
    NoGradScope no_grad;
    out = node.forward(inputs);
  }
  if (node.output_shape && out.shape() != *node.output_shape) {
    throw ShapeError(node.name + ": forward produced " + shape_str(out.shape()) + ", declared " +
                     shape_str(*node.output_shape));
  }
  if (!should_record(std::span<const Tensor>(inputs))) return out;
  auto backward_fn = node.backward;
  auto name = node.name;
  Tensor out_ref = out;
  std::vector<Tensor> saved = inputs;
  record_op(name, inputs, out, [saved, out_ref, backward_fn, name]() mutable {
    Tensor g = out_ref.grad_tensor();
    std::vector<Tensor> grads = backward_fn(saved, out_ref, g);
    if (grads.size() != saved.size()) {
      throw ShapeError(name + ": backward returned " + std::to_string(grads.size()) +
                       " gradients for " + std::to_string(saved.size()) + " inputs");
    }
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (!saved[i].requires_grad()) continue;
      if (!grads[i].defined() || grads[i].shape() != saved[i].shape()) {
        throw ShapeError(name + ": gradient " + std::to_string(i) + " does not match input shape " +
                         shape_str(saved[i].shape()));
      }
      auto dst = saved[i].mutable_grad();
      auto src = grads[i].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  });
  return out;
}

}  // namespace qssm
