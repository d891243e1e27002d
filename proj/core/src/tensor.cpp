#include "vqmoe/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace vqmoe {

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0)
      throw std::runtime_error("tensor: non-positive dim in " + shape_str(shape));
  }
  impl_ = std::make_shared<Impl>();
  impl_->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(data.size()))
    throw std::runtime_error("tensor: data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
  Tensor t(std::move(shape), requires_grad);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& x : t.data()) x = value;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw std::runtime_error("tensor: use of default-constructed tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::runtime_error("tensor: use of default-constructed tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl().shape.size()); }

int64_t Tensor::dim(int64_t i) const {
  const Shape& s = impl().shape;
  if (i < 0) i += static_cast<int64_t>(s.size());
  if (i < 0 || i >= static_cast<int64_t>(s.size()))
    throw std::runtime_error("tensor: dim index out of range");
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl().data.size()); }

std::vector<double>& Tensor::data() { return impl().data; }
const std::vector<double>& Tensor::data() const { return impl().data; }

double Tensor::value() const {
  if (numel() != 1)
    throw std::runtime_error("tensor: value() on non-scalar of shape " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool v) { impl().requires_grad = v; }

std::vector<double>& Tensor::grad() {
  Impl& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
  return im.grad;
}

const std::vector<double>& Tensor::grad() const {
  return const_cast<Tensor*>(this)->grad();
}

bool Tensor::grad_allocated() const { return !impl().grad.empty(); }

void Tensor::zero_grad() {
  Impl& im = impl();
  if (!im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
}

Tensor Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                    std::function<void()> forward, std::function<void()> backward) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.output = std::move(output);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.back().output;
}

bool Tape::on_tape(const Tensor& t) const {
  for (const Node& n : nodes_)
    if (n.output.same_object(t)) return true;
  return false;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::runtime_error("backward: loss must be a scalar");
  if (!on_tape(loss))
    throw std::runtime_error("backward: loss tensor was not produced on this tape");
  Tensor l = loss;
  l.grad()[0] += 1.0;
  run_backward();
}

void Tape::backward_with_seed(const Tensor& output, const std::vector<double>& seed) {
  if (!on_tape(output))
    throw std::runtime_error("backward: seed target was not produced on this tape");
  if (static_cast<int64_t>(seed.size()) != output.numel())
    throw std::runtime_error("backward: seed size does not match output numel");
  Tensor o = output;
  std::vector<double>& g = o.grad();
  for (size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  run_backward();
}

void Tape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    // Nothing flowed into this output (dead branch, or it feeds only
    // stop_gradient) -> skip its backward entirely.
    if (!n.output.requires_grad() || !n.output.grad_allocated()) continue;
    if (n.backward) n.backward();
  }
}

void Tape::replay() {
  for (Node& n : nodes_)
    if (n.forward) n.forward();
}

void Tape::zero_grads() {
  for (Node& n : nodes_) {
    n.output.zero_grad();
    for (Tensor& t : n.inputs) t.zero_grad();
  }
}

}  // namespace vqmoe
