#include "gpsa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

#include "gpsa/metrics.hpp"
#include "gpsa/ops.hpp"

namespace gpsa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* freeze_name(FreezeSet f) {
  switch (f) {
    case FreezeSet::gating: return "gating";
    case FreezeSet::gpsa_attention: return "gpsa_attention";
    case FreezeSet::all_attention: return "all_attention";
  }
  return "?";
}

FreezeSet parse_freeze(const std::string& s) {
  if (s == "gating") return FreezeSet::gating;
  if (s == "gpsa_attention") return FreezeSet::gpsa_attention;
  if (s == "all_attention") return FreezeSet::all_attention;
  throw ConfigError("unknown freeze set \"" + s + "\" (expected gating, gpsa_attention, all_attention)");
}

bool is_attention_role(ParamRole r) {
  switch (r) {
    case ParamRole::w_qry:
    case ParamRole::w_key:
    case ParamRole::w_val:
    case ParamRole::w_out:
    case ParamRole::b_out:
    case ParamRole::v_pos:
    case ParamRole::gate:
      return true;
    default:
      return false;
  }
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<Tensor> first_images(const LabeledImageSet& set, std::size_t count) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < std::min(count, set.size()); ++i) out.push_back(set.image(i));
  return out;
}

}  // namespace

double TrainConfig::effective_lr() const {
  return scale_lr_by_batch ? base_lr * static_cast<double>(batch_size) / 512.0 : base_lr;
}

void TrainConfig::validate(const ModelConfig& model) const {
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (epochs > 0 && warmup_epochs > 0 && warmup_epochs >= epochs) {
    throw ConfigError("train.warmup_epochs (" + std::to_string(warmup_epochs) +
                      ") must be smaller than train.epochs (" + std::to_string(epochs) + ")");
  }
  if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (model.num_gpsa_layers == 0 &&
      (freeze.count(FreezeSet::gating) || freeze.count(FreezeSet::gpsa_attention))) {
    throw ConfigError("freezing gating or GPSA attention needs GPSA layers");
  }
}

void to_json(json& j, const TrainConfig& c) {
  json freeze = json::array();
  for (auto f : c.freeze) freeze.push_back(freeze_name(f));
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"scale_lr_by_batch", c.scale_lr_by_batch},
           {"weight_decay", c.weight_decay},
           {"warmup_epochs", c.warmup_epochs},
           {"schedule", c.schedule == Schedule::cosine ? "cosine" : "constant"},
           {"seed", c.seed},
           {"freeze", freeze},
           {"eval_every", c.eval_every},
           {"nonlocality_batch", c.nonlocality_batch},
           {"train_eval_limit", c.train_eval_limit},
           {"test_limit", c.test_limit}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.scale_lr_by_batch = j.value("scale_lr_by_batch", d.scale_lr_by_batch);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  const auto schedule = j.value("schedule", std::string("cosine"));
  if (schedule != "cosine" && schedule != "constant") {
    throw ConfigError("train.schedule must be \"cosine\" or \"constant\", got \"" + schedule + "\"");
  }
  c.schedule = schedule == "cosine" ? Schedule::cosine : Schedule::constant;
  c.seed = j.value("seed", d.seed);
  c.freeze.clear();
  if (j.contains("freeze")) {
    for (const auto& f : j.at("freeze")) c.freeze.insert(parse_freeze(f.get<std::string>()));
  }
  c.eval_every = j.value("eval_every", d.eval_every);
  c.nonlocality_batch = j.value("nonlocality_batch", d.nonlocality_batch);
  c.train_eval_limit = j.value("train_eval_limit", d.train_eval_limit);
  c.test_limit = j.value("test_limit", d.test_limit);
}

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state,
                double lr, double weight_decay) {
  if (grad.size() != param.size()) {
    throw ShapeError("adamw_step: " + std::to_string(grad.size()) + " gradients for " +
                     std::to_string(param.size()) + " parameters");
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw ShapeError("adamw_step: optimizer state shape mismatch");
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * grad[i];
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
    param[i] -= lr * weight_decay * param[i];
    param[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + kAdamEps);
  }
}

double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base_lr) {
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return base_lr;
  const double progress = static_cast<double>(std::min(step, total) - warmup) /
                          static_cast<double>(total - warmup);
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * progress));
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const auto n = logits.numel();
  if (label >= n) {
    throw ContractError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(n) + " classes");
  }
  const auto z = logits.data();
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  Tensor loss = Tensor::scalar(lse - z[label]);
  if (should_record({&logits})) {
    ComputationTape::active()->record(
        "cross_entropy", {logits.impl()}, loss.impl(), [li = logits.impl(), out = loss.impl(), lse, label] {
          auto g = grad_sink(li);
          const double scale = out->grad[0];
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double p = std::exp(li->data[i] - lse);
            g[i] += scale * (p - (i == label ? 1.0 : 0.0));
          }
        });
  }
  return loss;
}

EvalResult evaluate(const ConViTModel& model, const LabeledImageSet& set, std::size_t limit) {
  const auto n = limit ? std::min(limit, set.size()) : set.size();
  if (n == 0) throw ContractError("evaluate on an empty set");
  EvalResult r;
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto logits = model.forward(set.image(i));
    const auto label = static_cast<std::size_t>(set.labels[i]);
    r.loss += cross_entropy(logits, label).item();
    const double target = logits[label];
    std::size_t rank = 0;  // classes scoring strictly higher, ties broken by index
    for (std::size_t c = 0; c < logits.numel(); ++c) {
      if (logits[c] > target || (logits[c] == target && c < label)) ++rank;
    }
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  r.loss /= static_cast<double>(n);
  r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(n);
  r.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(n);
  return r;
}

void RunLog::append(RunLogRow row) {
  if (!rows_.empty() && row.epoch <= rows_.back().epoch) {
    throw ContractError("run log epochs must strictly increase");
  }
  if (!rows_.empty() && (row.nonlocality.size() != rows_.front().nonlocality.size() ||
                         row.gating.size() != rows_.front().gating.size())) {
    throw ContractError("run log row width changed at epoch " + std::to_string(row.epoch));
  }
  auto finite = [](double v) { return std::isfinite(v); };
  const bool ok = finite(row.train_loss) && finite(row.test_top1) && finite(row.lr) &&
                  std::all_of(row.nonlocality.begin(), row.nonlocality.end(), finite) &&
                  std::all_of(row.gating.begin(), row.gating.end(), finite);
  if (!ok) throw NumericError("non-finite metric at epoch " + std::to_string(row.epoch));
  rows_.push_back(std::move(row));
}

void RunLog::write_csv(std::ostream& out, std::size_t num_layers, std::size_t num_gpsa_layers) const {
  out << "epoch,lr,train_loss,train_top1,test_top1,test_top5";
  for (std::size_t l = 0; l < num_layers; ++l) out << ",dloc_" << l;
  for (std::size_t l = 0; l < num_gpsa_layers; ++l) out << ",gate_" << l;
  out << '\n' << std::setprecision(17);
  for (const auto& r : rows_) {
    out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_top1 << ','
        << r.test_top1 << ',' << r.test_top5;
    for (double v : r.nonlocality) out << ',' << v;
    for (double v : r.gating) out << ',' << v;
    out << '\n';
  }
}

bool is_frozen(const NamedParameter& p, const std::set<FreezeSet>& freeze, const ConViTModel& model) {
  if (!p.tensor.requires_grad()) return true;
  if (freeze.count(FreezeSet::gating) && p.role == ParamRole::gate) return true;
  if (!is_attention_role(p.role)) return false;
  if (freeze.count(FreezeSet::all_attention)) return true;
  // The output projection keeps training alongside the FFNs.
  if (p.role == ParamRole::w_out || p.role == ParamRole::b_out) return false;
  return freeze.count(FreezeSet::gpsa_attention) &&
         p.layer >= 0 && static_cast<std::size_t>(p.layer) < model.gpsa_blocks.size();
}

RunLog train(ConViTModel& model, const DatasetPair& data, const TrainConfig& config,
             const TrainHooks& hooks) {
  config.validate(model.config());
  data.train.validate();
  data.test.validate();
  RunLog log;
  if (config.epochs == 0) return log;

  const auto params = model.parameters();
  std::vector<bool> frozen;
  for (const auto& p : params) frozen.push_back(is_frozen(p, config.freeze, model));
  std::vector<AdamMoments> moments(params.size());

  const auto n = data.train.size();
  const auto batches = (n + config.batch_size - 1) / config.batch_size;
  const auto total_steps = config.epochs * batches;
  const auto warmup_steps = config.warmup_epochs * batches;
  const double peak_lr = config.effective_lr();
  const auto nonlocal_images = first_images(data.test, config.nonlocality_batch);

  auto log_row = [&](std::size_t epoch, double lr) {
    RunLogRow row;
    row.epoch = epoch;
    row.lr = lr;
    const auto tr = evaluate(model, data.train, config.train_eval_limit);
    const auto te = evaluate(model, data.test, config.test_limit);
    row.train_loss = tr.loss;
    row.train_top1 = tr.top1;
    row.test_top1 = te.top1;
    row.test_top5 = te.top5;
    if (!nonlocal_images.empty()) row.nonlocality = nonlocality_over_batch(model, nonlocal_images).per_layer;
    if (!model.gpsa_blocks.empty()) {
      for (const auto& g : gating_summary(model)) row.gating.push_back(g.mean);
    }
    log.append(row);
    return hooks.on_log ? hooks.on_log(log.back()) : true;
  };

  if (!log_row(0, 0.0)) return log;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  double lr = 0.0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + epoch);
    shuffle(order, rng);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const auto begin = b * config.batch_size;
      const auto end = std::min(n, begin + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (const auto& p : params) p.tensor.impl()->grad.clear();
      try {
        for (auto k = begin; k < end; ++k) {
          const auto idx = order[k];
          TapeScope scope;
          auto loss = ops::scale(
              cross_entropy(model.forward(data.train.image(idx)), static_cast<std::size_t>(data.train.labels[idx])),
              inv);
          backward(loss);
        }
      } catch (const NumericError& e) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ": " + e.what());
      }
      lr = (config.schedule == Schedule::cosine || step < warmup_steps)
               ? cosine_lr(step, total_steps, warmup_steps, peak_lr)
               : peak_lr;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (frozen[i]) continue;
        auto t = params[i].tensor;
        if (!t.has_grad()) t.mutable_grad();
        adamw_step(t.mutable_data(), t.grad(), moments[i], lr,
                   params[i].decay ? config.weight_decay : 0.0);
        for (double v : t.data()) {
          if (!std::isfinite(v)) {
            throw NumericError("parameter " + params[i].name + " became non-finite at epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(b));
          }
        }
      }
    }
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      if (!log_row(epoch, lr)) break;
    }
  }
  for (const auto& p : params) p.tensor.impl()->grad.clear();
  return log;
}

std::vector<AblationPlan> ablation_plans(const ModelConfig& base_model, const TrainConfig& base_train) {
  auto convit = base_model;
  if (convit.num_gpsa_layers == 0) throw ConfigError("ablation base model needs GPSA layers");
  convit.conv_init = true;
  convit.gate_trainable = true;
  auto train = base_train;
  train.freeze.erase(FreezeSet::gating);
  train.freeze.erase(FreezeSet::gpsa_attention);

  std::vector<AblationPlan> plans;
  auto add = [&](std::string id, bool train_gating, bool conv, bool train_gpsa, bool use_gpsa) {
    AblationPlan p{{std::move(id), train_gating, conv, train_gpsa, use_gpsa, 0.0}, convit, train};
    p.model.conv_init = conv;
    p.model.gate_trainable = train_gating;
    if (!use_gpsa) {
      p.model.num_sa_layers += p.model.num_gpsa_layers;
      p.model.num_gpsa_layers = 0;
      p.model.conv_init = false;
    } else if (!train_gpsa) {
      p.model.gate_trainable = true;  // gates stay at init, frozen with the layer
      p.train.freeze.insert(FreezeSet::gpsa_attention);
    }
    plans.push_back(std::move(p));
  };
  add("a", true, true, true, true);
  add("b", false, true, true, true);
  add("c", true, false, true, true);
  add("d", false, false, true, true);
  add("e", false, false, false, false);
  add("f", false, true, false, true);
  add("g", false, false, false, true);
  return plans;
}

std::vector<AblationRow> ablation_suite(const ModelConfig& base_model, const TrainConfig& base_train,
                                        const DatasetPair& data,
                                        const std::optional<std::string>& out_dir) {
  std::vector<AblationRow> rows;
  for (auto& plan : ablation_plans(base_model, base_train)) {
    ConViTModel model(plan.model);
    auto log = train(model, data, plan.train);
    plan.row.top1 = evaluate(model, data.test, plan.train.test_limit).top1;
    if (out_dir) {
      fs::create_directories(*out_dir);
      std::ofstream csv(fs::path(*out_dir) / ("runlog_" + plan.row.id + ".csv"));
      log.write_csv(csv, plan.model.num_gpsa_layers + plan.model.num_sa_layers,
                    plan.model.num_gpsa_layers);
    }
    rows.push_back(plan.row);
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "row_id,train_gating,conv_init,train_gpsa,use_gpsa,top1\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.id << ',' << r.train_gating << ',' << r.conv_init << ',' << r.train_gpsa << ','
        << r.use_gpsa << ',' << r.top1 << '\n';
  }
}

}  // namespace gpsa
