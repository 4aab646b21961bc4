#include "gpsa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <random>

#include "gpsa/ops.hpp"
#include "gpsa/trainer.hpp"

namespace gpsa {

double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw ShapeError("gradient size mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale == 0.0) return 0.0;
  return diff / scale;
}

std::vector<double> numeric_gradient(const std::function<double()>& loss, Tensor& param, double h) {
  std::vector<double> g(param.numel());
  auto d = param.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double saved = d[i];
    d[i] = saved + h;
    const double up = loss();
    d[i] = saved - h;
    const double down = loss();
    d[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::vector<std::pair<std::string, double>> GradcheckReport::role_errors() const {
  std::map<std::string, double> worst;
  for (const auto& e : entries) {
    if (e.kind != "param") continue;
    worst[e.role] = std::max(worst[e.role], e.error);
  }
  return {worst.begin(), worst.end()};
}

void GradcheckReport::write(std::ostream& out) const {
  out << "kind,name,role,rel_error,status\n";
  for (const auto& e : entries) {
    out << e.kind << ',' << e.name << ',' << e.role << ',' << e.error << ','
        << (e.passed ? "ok" : "FAIL") << '\n';
  }
}

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = u(rng);
  return Tensor(std::move(shape), std::move(d), true);
}

// Differentiates sum(op(inputs) * weights) against each input.
GradcheckEntry check_op(const std::string& name, std::vector<Tensor> inputs,
                        const std::function<Tensor(const std::vector<Tensor>&)>& op,
                        std::mt19937_64& rng, double h, double tol) {
  const auto probe = op(inputs);
  const auto weights = random_tensor(probe.shape(), rng, -1.0, 1.0).detach();
  const auto objective = [&] { return ops::sum(ops::mul(op(inputs), weights)); };

  for (auto& t : inputs) t.zero_grad();
  {
    TapeScope scope;
    backward(objective());
  }
  double err = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    const auto numeric = numeric_gradient([&] { return objective().item(); }, t, h);
    err = std::max(err, gradient_relative_error(analytic, numeric));
  }
  return {"op", name, "", err, err <= tol};
}

}  // namespace

std::vector<GradcheckEntry> gradcheck_ops(std::uint64_t seed, double h, double tol) {
  std::mt19937_64 rng(seed);
  auto r = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };
  std::vector<GradcheckEntry> out;
  auto run = [&](const std::string& name, std::vector<Tensor> in,
                 std::function<Tensor(const std::vector<Tensor>&)> f) {
    out.push_back(check_op(name, std::move(in), f, rng, h, tol));
  };
  using V = const std::vector<Tensor>&;

  run("matmul", {r({3, 4}), r({4, 2})}, [](V x) { return ops::matmul(x[0], x[1]); });
  run("matmul_bt", {r({3, 4}), r({2, 4})}, [](V x) { return ops::matmul_bt(x[0], x[1]); });
  run("transpose", {r({3, 2})}, [](V x) { return ops::transpose(x[0]); });
  run("add", {r({2, 3}), r({2, 3})}, [](V x) { return ops::add(x[0], x[1]); });
  run("sub", {r({2, 3}), r({2, 3})}, [](V x) { return ops::sub(x[0], x[1]); });
  run("mul", {r({2, 3}), r({2, 3})}, [](V x) { return ops::mul(x[0], x[1]); });
  run("add_bias", {r({3, 4}), r({4})}, [](V x) { return ops::add_bias(x[0], x[1]); });
  run("scale", {r({2, 3})}, [](V x) { return ops::scale(x[0], -1.7); });
  run("lerp", {r({2, 3}), r({2, 3}), r({1}, 0.1, 0.9)},
      [](V x) { return ops::lerp(x[0], x[1], x[2]); });
  run("sum", {r({2, 3})}, [](V x) { return ops::sum(x[0]); });
  run("softmax_rows", {r({3, 4}, -2.0, 2.0)}, [](V x) { return ops::softmax_rows(x[0]); });
  run("normalize_rows", {r({3, 4}, 0.2, 1.0)}, [](V x) { return ops::normalize_rows(x[0]); });
  run("sigmoid", {r({2, 3}, -3.0, 3.0)}, [](V x) { return ops::sigmoid(x[0]); });
  run("gelu", {r({2, 3}, -3.0, 3.0)}, [](V x) { return ops::gelu(x[0]); });
  run("layernorm", {r({3, 5}, -2.0, 2.0), r({5}, 0.5, 1.5), r({5})},
      [](V x) { return ops::layernorm(x[0], x[1], x[2]); });
  run("reshape", {r({2, 6})}, [](V x) { return ops::reshape(x[0], {3, 4}); });
  run("slice_rows", {r({4, 3})}, [](V x) { return ops::slice_rows(x[0], 1, 2); });
  run("concat_rows", {r({1, 3}), r({2, 3})}, [](V x) { return ops::concat_rows({x[0], x[1]}); });
  run("concat_cols", {r({2, 1}), r({2, 3})}, [](V x) { return ops::concat_cols({x[0], x[1]}); });
  run("cross_entropy", {r({5}, -2.0, 2.0)}, [](V x) { return cross_entropy(x[0], 3); });
  return out;
}

ModelConfig gradcheck_micro_config() {
  ModelConfig c;  // 8x8 image, patch 2, 4 heads of dim 4, one GPSA and one SA block
  c.image_size = 8;
  c.patch_size = 2;
  c.num_heads = 4;
  c.head_dim = 4;
  c.num_gpsa_layers = 1;
  c.num_sa_layers = 1;
  c.num_classes = 3;
  return c;
}

std::vector<GradcheckEntry> gradcheck_model(const ModelConfig& config, std::uint64_t seed, double h,
                                            double tol) {
  ConViTModel model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Spread weights out so no gradient is trivially small.
  for (auto& p : model.parameters()) {
    auto d = p.tensor.mutable_data();
    const double sd = p.role == ParamRole::layernorm ? 0.2 : 0.5;
    for (auto& v : d) v += sd * noise(rng);
  }

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 2; ++i) {
    auto img = random_tensor({config.channels, config.image_size, config.image_size}, rng, -1.0, 1.0);
    images.push_back(img.detach());
    labels.push_back(i % config.num_classes);
  }
  const auto loss = [&] {
    Tensor total;
    for (std::size_t i = 0; i < images.size(); ++i) {
      auto l = cross_entropy(model.forward(images[i]), labels[i]);
      total = total.defined() ? ops::add(total, l) : l;
    }
    return total;
  };

  auto params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();
  {
    TapeScope scope;
    backward(loss());
  }
  std::vector<GradcheckEntry> out;
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    const auto numeric = numeric_gradient([&] { return loss().item(); }, p.tensor, h);
    const double err = gradient_relative_error(analytic, numeric);
    out.push_back({"param", p.name, role_name(p.role), err, err <= tol});
  }
  return out;
}

GradcheckReport run_gradcheck(const ModelConfig& config, std::uint64_t seed) {
  GradcheckReport report;
  report.entries = gradcheck_ops(seed);
  auto params = gradcheck_model(config, seed);
  report.entries.insert(report.entries.end(), params.begin(), params.end());
  return report;
}

}  // namespace gpsa
