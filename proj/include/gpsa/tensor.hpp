#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gpsa/error.hpp"

namespace gpsa {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Dense row-major tensor of doubles with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape write gradients back into parameters. Use clone() for a
/// deep copy. Values are immutable through the public op surface; only
/// initializers and optimizers touch mutable_data().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values,
                       bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Allocates a zero gradient on first use.
  std::span<double> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const;
  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void()>;

/// Append-only record of differentiable operations.
///
/// An op records itself only when a tape is active on the calling thread and
/// at least one input requires grad. backward() replays entries in reverse.
class ComputationTape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(std::string op, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, BackwardFn backward);
  void backward(const Tensor& loss);
  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  static ComputationTape* active();

 private:
  friend class TapeScope;
  std::vector<Entry> entries_;
};

/// Makes a tape active on this thread for the scope's lifetime. Nesting
/// restores the previous tape on exit.
class TapeScope {
 public:
  TapeScope();
  explicit TapeScope(ComputationTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  ComputationTape& tape() { return *tape_; }

 private:
  ComputationTape own_;
  ComputationTape* tape_;
  ComputationTape* previous_;
};

/// Backpropagates a scalar loss through the active tape.
void backward(const Tensor& loss);

// True when the active tape should record an op over these inputs.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Gradient buffer of `impl`, allocated on demand; empty span when the tensor
// does not take gradients.
std::span<double> grad_sink(const std::shared_ptr<TensorImpl>& impl);

namespace testing {
// Corrupts the backward rule of the named op (its contribution is applied
// twice). Pass an empty string to clear. Gradcheck negative controls only.
void inject_backward_fault(std::string op);
const std::string& backward_fault();
}  // namespace testing

// Binary tensor format: magic "GPSAT1", u32 rank, u32 extents, f64 payload,
// all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace gpsa
