#include "gpsa/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gpsa {

namespace {

thread_local ComputationTape* g_active_tape = nullptr;
std::string g_backward_fault;

constexpr std::array<char, 6> kMagic = {'G', 'P', 'S', 'A', 'T', '1'};

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(what) + ": non-finite value");
    }
  }
}

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little,
                "binary tensor I/O assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) {
    throw ParseError(std::string("tensor file truncated while reading ") + what);
  }
  return value;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  check_finite(data, "tensor construction");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return Tensor({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  std::vector<double> data;
  const std::size_t ncols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != ncols) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), ncols}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape()));
  return impl_->shape[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->data.at(r * cols() + c);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data, impl_->requires_grad);
  out.impl_->grad = impl_->grad;
  return out;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

void ComputationTape::record(std::string op,
                             std::vector<std::shared_ptr<TensorImpl>> inputs,
                             std::shared_ptr<TensorImpl> output,
                             BackwardFn backward) {
  output->requires_grad = true;
  entries_.push_back(
      {std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void ComputationTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  auto& seed = loss.impl()->grad;
  if (seed.empty()) seed.assign(1, 0.0);
  seed[0] += 1.0;
  const std::string& fault = testing::backward_fault();
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
    if (!fault.empty() && it->op == fault) it->backward();
  }
}

ComputationTape* ComputationTape::active() { return g_active_tape; }

TapeScope::TapeScope() : tape_(&own_), previous_(g_active_tape) {
  g_active_tape = tape_;
}

TapeScope::TapeScope(ComputationTape& tape) : tape_(&tape), previous_(g_active_tape) {
  g_active_tape = tape_;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  auto* tape = ComputationTape::active();
  if (!tape) throw ContractError("backward() called with no active tape");
  tape->backward(loss);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

std::span<double> grad_sink(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl->requires_grad) return {};
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

namespace testing {
void inject_backward_fault(std::string op) { g_backward_fault = std::move(op); }
const std::string& backward_fault() { return g_backward_fault; }
}  // namespace testing

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) write_le<double>(out, v);
  if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 6> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ParseError("bad tensor magic (expected GPSAT1)");
  const auto rank = read_le<std::uint32_t>(in, "rank");
  if (rank == 0 || rank > 8) throw ParseError("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = read_le<std::uint32_t>(in, "extent");
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = read_le<double>(in, "payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_tensor(in);
}

}  // namespace gpsa
