#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vqmoe {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense f64 tensor, row-major, shared-handle semantics. Copying a Tensor
// copies the handle; two copies see the same data and the same grad slot.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t i) const;
  int64_t numel() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double value() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool v);

  // grad() allocates a zero buffer on first access so callers can read
  // "zero gradient" without special-casing untouched tensors.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool grad_allocated() const;
  void zero_grad();

  // Identity key for gradient maps and tape bookkeeping.
  const void* key() const { return impl_.get(); }
  bool same_object(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until touched
  };
  std::shared_ptr<Impl> impl_;
  Impl& impl();
  const Impl& impl() const;
};

// Reverse-mode tape. Nodes are appended in execution order, which is by
// construction a topological order of the dataflow graph. backward() walks
// it once in reverse; fan-out gradients accumulate additively.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> forward;   // recompute output from inputs
    std::function<void()> backward;  // scatter output grad to inputs
  };

  // Returns `output` for call-chaining convenience.
  Tensor record(const char* op, std::vector<Tensor> inputs, Tensor output,
                std::function<void()> forward, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and back-propagates. `loss` must be a scalar
  // produced by a node of this tape.
  void backward(const Tensor& loss);

  // Seeds an arbitrary cotangent on `output` (shape must match). Used by the
  // Jacobian diagnostics to extract one row of J per call.
  void backward_with_seed(const Tensor& output, const std::vector<double>& seed);

  // Re-runs every forward closure in recorded order. With unchanged inputs
  // this reproduces every output bit-identically.
  void replay();

  // Zeroes the grads of every tensor this tape touches (inputs and outputs).
  void zero_grads();

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  const Node& node(size_t i) const { return nodes_[i]; }

 private:
  std::vector<Node> nodes_;
  bool on_tape(const Tensor& t) const;
  void run_backward();
};

}  // namespace vqmoe
