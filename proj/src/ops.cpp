#include "gpsa/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gpsa::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MapMat as_mat(std::span<double> v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Tensor finish(const char* op, Shape shape, std::vector<double> data) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
  return Tensor(std::move(shape), std::move(data));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void record(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& out,
            BackwardFn fn) {
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto* t : inputs) impls.push_back(t->impl());
  ComputationTape::active()->record(op, std::move(impls), out.impl(), std::move(fn));
}

// Applies `f` elementwise and records dy/dx = dfdx(x, y).
template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& x, F f, DF dfdx) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor y = finish(op, x.shape(), std::move(out));
  if (should_record({&x})) {
    record(op, {&x}, y, [xi = x.impl(), yi = y.impl(), dfdx] {
      auto gx = grad_sink(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += yi->grad[i] * dfdx(xi->data[i], yi->data[i]);
      }
    });
  }
  return y;
}

}  // namespace

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  as_mat(std::span<double>(out), m, n).noalias() = as_mat(a.impl()->data, m, k) * as_mat(b.impl()->data, k, n);
  Tensor c = finish("matmul", {m, n}, std::move(out));
  if (should_record({&a, &b})) {
    record("matmul", {&a, &b}, c, [ai = a.impl(), bi = b.impl(), ci = c.impl(), m, k, n] {
      const auto dc = as_mat(ci->grad, m, n);
      if (auto ga = grad_sink(ai); !ga.empty()) {
        as_mat(ga, m, k).noalias() += dc * as_mat(bi->data, k, n).transpose();
      }
      if (auto gb = grad_sink(bi); !gb.empty()) {
        as_mat(gb, k, n).noalias() += as_mat(ai->data, m, k).transpose() * dc;
      }
    });
  }
  return c;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_bt: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  as_mat(std::span<double>(out), m, n).noalias() =
      as_mat(a.impl()->data, m, k) * as_mat(b.impl()->data, n, k).transpose();
  Tensor c = finish("matmul_bt", {m, n}, std::move(out));
  if (should_record({&a, &b})) {
    record("matmul_bt", {&a, &b}, c, [ai = a.impl(), bi = b.impl(), ci = c.impl(), m, k, n] {
      const auto dc = as_mat(ci->grad, m, n);
      if (auto ga = grad_sink(ai); !ga.empty()) {
        as_mat(ga, m, k).noalias() += dc * as_mat(bi->data, n, k);
      }
      if (auto gb = grad_sink(bi); !gb.empty()) {
        as_mat(gb, n, k).noalias() += dc.transpose() * as_mat(ai->data, m, k);
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  as_mat(std::span<double>(out), n, m) = as_mat(a.impl()->data, m, n).transpose();
  Tensor t = finish("transpose", {n, m}, std::move(out));
  if (should_record({&a})) {
    record("transpose", {&a}, t, [ai = a.impl(), ti = t.impl(), m, n] {
      auto ga = grad_sink(ai);
      as_mat(ga, m, n) += as_mat(ti->grad, n, m).transpose();
    });
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor c = finish("add", a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    record("add", {&a, &b}, c, [ai = a.impl(), bi = b.impl(), ci = c.impl()] {
      for (const auto& in : {ai, bi}) {
        auto g = grad_sink(in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ci->grad[i];
      }
    });
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor c = finish("sub", a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    record("sub", {&a, &b}, c, [ai = a.impl(), bi = b.impl(), ci = c.impl()] {
      auto ga = grad_sink(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ci->grad[i];
      auto gb = grad_sink(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= ci->grad[i];
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor c = finish("mul", a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    record("mul", {&a, &b}, c, [ai = a.impl(), bi = b.impl(), ci = c.impl()] {
      auto ga = grad_sink(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ci->grad[i] * bi->data[i];
      auto gb = grad_sink(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += ci->grad[i] * ai->data[i];
    });
  }
  return c;
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_bias");
  const auto m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                     shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias[c];
  }
  Tensor y = finish("add_bias", a.shape(), std::move(out));
  if (should_record({&a, &bias})) {
    record("add_bias", {&a, &bias}, y, [ai = a.impl(), bi = bias.impl(), yi = y.impl(), m, n] {
      auto ga = grad_sink(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += yi->grad[i];
      if (auto gb = grad_sink(bi); !gb.empty()) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < n; ++c) gb[c] += yi->grad[r * n + c];
        }
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& t) {
  require_same_shape(a, b, "lerp");
  if (t.numel() != 1) throw ShapeError("lerp: weight must be a single value");
  const double w = t[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * a[i] + w * b[i];
  Tensor y = finish("lerp", a.shape(), std::move(out));
  if (should_record({&a, &b, &t})) {
    record("lerp", {&a, &b, &t}, y,
           [ai = a.impl(), bi = b.impl(), ti = t.impl(), yi = y.impl()] {
             const double w = ti->data[0];
             auto ga = grad_sink(ai);
             for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (1.0 - w) * yi->grad[i];
             auto gb = grad_sink(bi);
             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += w * yi->grad[i];
             if (auto gt = grad_sink(ti); !gt.empty()) {
               double acc = 0.0;
               for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                 acc += yi->grad[i] * (bi->data[i] - ai->data[i]);
               }
               gt[0] += acc;
             }
           });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  Tensor y = finish("sum", {1}, {s});
  if (should_record({&a})) {
    record("sum", {&a}, y, [ai = a.impl(), yi = y.impl()] {
      auto ga = grad_sink(ai);
      for (auto& g : ga) g += yi->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = x.data().data() + r * n;
    double mx = in[0];
    for (std::size_t c = 0; c < n; ++c) {
      if (std::isnan(in[c])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, in[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (out[r * n + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  Tensor y = finish("softmax_rows", x.shape(), std::move(out));
  if (should_record({&x})) {
    record("softmax_rows", {&x}, y, [xi = x.impl(), yi = y.impl(), m, n] {
      auto gx = grad_sink(xi);
      for (std::size_t r = 0; r < m; ++r) {
        const double* p = yi->data.data() + r * n;
        const double* g = yi->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += p[c] * g[c];
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += p[c] * (g[c] - dot);
      }
    });
  }
  return y;
}

Tensor normalize_rows(const Tensor& x) {
  require_matrix(x, "normalize_rows");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  std::vector<double> sums(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) sums[r] += out[r * n + c];
    if (!(sums[r] > 0.0)) throw NumericError("normalize_rows: non-positive row sum");
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= sums[r];
  }
  Tensor y = finish("normalize_rows", x.shape(), std::move(out));
  if (should_record({&x})) {
    record("normalize_rows", {&x}, y, [xi = x.impl(), yi = y.impl(), sums, m, n] {
      auto gx = grad_sink(xi);
      for (std::size_t r = 0; r < m; ++r) {
        const double* p = yi->data.data() + r * n;
        const double* g = yi->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += p[c] * g[c];
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += (g[c] - dot) / sums[r];
      }
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary("gelu", x, gelu_value, [](double v, double) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() == 0) throw ShapeError("layernorm: empty shape");
  const auto d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layernorm: last axis " + std::to_string(d) + " vs gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const auto m = x.numel() / d;
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      const auto i = r * d + c;
      xhat[i] = (in[c] - mu) * inv_std[r];
      out[i] = xhat[i] * gain[c] + bias[c];
    }
  }
  Tensor y = finish("layernorm", x.shape(), std::move(out));
  if (should_record({&x, &gain, &bias})) {
    record("layernorm", {&x, &gain, &bias}, y,
           [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), yi = y.impl(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), m, d] {
             auto gx = grad_sink(xi);
             auto gg = grad_sink(gi);
             auto gb = grad_sink(bi);
             std::vector<double> dxhat(d);
             for (std::size_t r = 0; r < m; ++r) {
               const double* dy = yi->grad.data() + r * d;
               const double* xh = xhat.data() + r * d;
               double mean_dx = 0.0, mean_dx_xh = 0.0;
               for (std::size_t c = 0; c < d; ++c) {
                 if (!gg.empty()) gg[c] += dy[c] * xh[c];
                 if (!gb.empty()) gb[c] += dy[c];
                 dxhat[c] = dy[c] * gi->data[c];
                 mean_dx += dxhat[c];
                 mean_dx_xh += dxhat[c] * xh[c];
               }
               if (gx.empty()) continue;
               mean_dx /= static_cast<double>(d);
               mean_dx_xh /= static_cast<double>(d);
               for (std::size_t c = 0; c < d; ++c) {
                 gx[r * d + c] += inv_std[r] * (dxhat[c] - mean_dx - xh[c] * mean_dx_xh);
               }
             }
           });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor y(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (should_record({&a})) {
    record("reshape", {&a}, y, [ai = a.impl(), yi = y.impl()] {
      auto ga = grad_sink(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_rows");
  const auto n = a.cols();
  if (count == 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + shape_str(a.shape()));
  }
  const auto first = a.data().begin() + static_cast<std::ptrdiff_t>(begin * n);
  Tensor y({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
  if (should_record({&a})) {
    record("slice_rows", {&a}, y, [ai = a.impl(), yi = y.impl(), begin, n] {
      auto ga = grad_sink(ai);
      for (std::size_t i = 0; i < yi->grad.size(); ++i) ga[begin * n + i] += yi->grad[i];
    });
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto n = parts.front().cols();
  std::size_t m = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch " + shape_str(p.shape()));
    m += p.rows();
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Tensor y({m, n}, std::move(out));
  const bool rec = ComputationTape::active() &&
                   std::any_of(parts.begin(), parts.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (rec) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    ComputationTape::active()->record("concat_rows", impls, y.impl(), [impls, yi = y.impl()] {
      std::size_t offset = 0;
      for (const auto& in : impls) {
        auto g = grad_sink(in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[offset + i];
        offset += in->data.size();
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch " + shape_str(p.shape()));
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(r * n + col));
    }
    col += w;
  }
  Tensor y({m, n}, std::move(out));
  const bool rec = ComputationTape::active() &&
                   std::any_of(parts.begin(), parts.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (rec) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    ComputationTape::active()->record("concat_cols", impls, y.impl(), [impls, yi = y.impl(), m, n] {
      std::size_t col = 0;
      for (const auto& in : impls) {
        const auto w = in->shape[1];
        auto g = grad_sink(in);
        if (!g.empty()) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += yi->grad[r * n + col + c];
          }
        }
        col += w;
      }
    });
  }
  return y;
}

}  // namespace gpsa::ops
