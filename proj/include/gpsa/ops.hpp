#pragma once

#include <cstddef>
#include <vector>

#include "gpsa/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, raises
// NumericError rather than returning non-finite values, and records a
// backward rule when a tape is active.
namespace gpsa::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ for a[m×k], b[n×k].
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a[m×n] + bias[n] on every row.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);
// a + t·(b − a) with t a one-element tensor.
Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& t);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
// Divides each row by its sum. Rows must have strictly positive sums.
Tensor normalize_rows(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes over the last axis, then applies gain and bias.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Scalar helpers shared with tests.
double sigmoid_value(double x);
double gelu_value(double x);

}  // namespace gpsa::ops
