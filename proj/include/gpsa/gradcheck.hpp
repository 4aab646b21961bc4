#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gpsa/model.hpp"

namespace gpsa {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

// max|a - n| / max(max|a|, max|n|); 0 when both vanish.
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Central differences of `loss` with respect to every entry of `param`.
std::vector<double> numeric_gradient(const std::function<double()>& loss, Tensor& param, double h);

struct GradcheckEntry {
  std::string kind;  // "op" or "param"
  std::string name;  // op name, or parameter name
  std::string role;  // parameter role, empty for ops
  double error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = kGradcheckTolerance;
  bool passed() const;
  // Worst error per parameter role.
  std::vector<std::pair<std::string, double>> role_errors() const;
  void write(std::ostream& out) const;
};

// Checks every differentiable op on random inputs.
std::vector<GradcheckEntry> gradcheck_ops(std::uint64_t seed, double h = kGradcheckStep,
                                          double tol = kGradcheckTolerance);

// Checks every parameter of a model built from `config` whose weights are
// spread out from their initial values, on a two-image cross-entropy loss.
std::vector<GradcheckEntry> gradcheck_model(const ModelConfig& config, std::uint64_t seed,
                                            double h = kGradcheckStep,
                                            double tol = kGradcheckTolerance);

GradcheckReport run_gradcheck(const ModelConfig& config, std::uint64_t seed);

// Small configuration with every layer kind and role present.
ModelConfig gradcheck_micro_config();

}  // namespace gpsa
