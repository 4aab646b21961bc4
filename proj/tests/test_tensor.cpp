#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "gpsa/ops.hpp"
#include "gpsa/tensor.hpp"

using namespace gpsa;

TEST_CASE("tensor construction validates shape and values") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), ShapeError);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}), NumericError);
  const auto t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6);
  CHECK(Tensor::scalar(3.5).item() == 3.5);
  CHECK_THROWS(t.item());
}

TEST_CASE("handles alias storage while clone copies") {
  auto a = Tensor::vector({1, 2});
  auto b = a;
  auto c = a.clone();
  a.mutable_data()[0] = 9;
  CHECK(b[0] == 9);
  CHECK(c[0] == 1);
  CHECK(b.is_same(a));
  CHECK_FALSE(c.is_same(a));
}

TEST_CASE("ops record only under an active tape with a grad-requiring input") {
  auto x = Tensor::vector({1, 2}, true);
  auto y = Tensor::vector({3, 4});
  {
    TapeScope scope;
    ops::add(y, y);
    CHECK(scope.tape().size() == 0);
    ops::add(x, y);
    CHECK(scope.tape().size() == 1);
  }
  CHECK(ComputationTape::active() == nullptr);
  ops::add(x, y);  // no tape, no record, no throw
}

TEST_CASE("backward of a linear loss gives the input") {
  auto w = Tensor::matrix({{0.5, -1.0, 2.0}}, true);
  const auto x = Tensor::matrix({{1.5}, {2.5}, {-3.0}});
  TapeScope scope;
  backward(ops::sum(ops::matmul(w, x)));
  CHECK(w.grad()[0] == doctest::Approx(1.5));
  CHECK(w.grad()[1] == doctest::Approx(2.5));
  CHECK(w.grad()[2] == doctest::Approx(-3.0));
}

TEST_CASE("backward of sum(sigmoid(x)) is sigmoid'(x)") {
  auto x = Tensor::vector({-2.0, 0.0, 0.7}, true);
  TapeScope scope;
  backward(ops::sum(ops::sigmoid(x)));
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    CHECK(x.grad()[i] == doctest::Approx(s * (1 - s)).epsilon(1e-14));
  }
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  auto x = Tensor::vector({1.0, 2.0}, true);
  for (int k = 0; k < 2; ++k) {
    TapeScope scope;
    backward(ops::sum(ops::scale(x, 3.0)));
  }
  CHECK(x.grad()[0] == 6.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("reused intermediate receives both contributions") {
  auto x = Tensor::vector({2.0}, true);
  TapeScope scope;
  const auto y = ops::mul(x, x);
  backward(ops::sum(ops::add(y, x)));
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor::vector({1.0, 2.0}, true);
  TapeScope scope;
  CHECK_THROWS_AS(backward(ops::scale(x, 2.0)), ContractError);
}

TEST_CASE("binary tensor round trip is bit exact") {
  const auto t = Tensor({2, 1, 3}, {1.0, -2.5, 1e-300, 3.14159, 0.1, -0.0});
  std::stringstream buf;
  write_tensor(buf, t);
  const auto bytes = buf.str();
  CHECK(bytes.substr(0, 6) == "GPSAT1");
  CHECK(bytes.size() == 6 + 4 + 3 * 4 + 6 * 8);
  const auto r = read_tensor(buf);
  CHECK(r.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(std::signbit(r[i]) == std::signbit(t[i]));
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(r[i] == t[i]);
}

TEST_CASE("binary tensor reader rejects bad input") {
  std::stringstream bad("NOTATENSOR");
  CHECK_THROWS_AS(read_tensor(bad), ParseError);
  std::stringstream buf;
  write_tensor(buf, Tensor::vector({1, 2, 3}));
  auto s = buf.str();
  s.resize(s.size() - 4);
  std::stringstream truncated(s);
  CHECK_THROWS_AS(read_tensor(truncated), ParseError);
}
