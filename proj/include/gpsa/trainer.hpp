#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpsa/data.hpp"
#include "gpsa/model.hpp"

namespace gpsa {

enum class Schedule { cosine, constant };
enum class FreezeSet { gating, gpsa_attention, all_attention };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 5e-4;
  // Effective lr = base_lr * batch_size / 512 when set.
  bool scale_lr_by_batch = true;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 5;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;
  std::set<FreezeSet> freeze;
  std::size_t eval_every = 1;
  // Test images whose attention feeds the logged nonlocality.
  std::size_t nonlocality_batch = 128;
  // Training images re-evaluated for the logged train loss/accuracy; 0 = all.
  std::size_t train_eval_limit = 1024;
  // Test images evaluated per log row; 0 = all.
  std::size_t test_limit = 0;

  double effective_lr() const;
  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Bias-corrected Adam moments for one tensor.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t steps = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One decoupled-weight-decay Adam update of `param` in place.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& state,
                double lr, double weight_decay);

// Linear warmup to base_lr, then half-cosine to zero at `total`.
double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double base_lr);

// -log softmax(logits)[label], recorded on the active tape.
Tensor cross_entropy(const Tensor& logits, std::size_t label);

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
};

EvalResult evaluate(const ConViTModel& model, const LabeledImageSet& set, std::size_t limit = 0);

struct RunLogRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double test_top1 = 0.0;
  double test_top5 = 0.0;
  std::vector<double> nonlocality;  // per layer
  std::vector<double> gating;       // mean sigmoid(lambda) per GPSA layer
};

/// Append-only per-epoch training log.
class RunLog {
 public:
  void append(RunLogRow row);
  const std::vector<RunLogRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  const RunLogRow& back() const { return rows_.back(); }

  // Columns: epoch,lr,train_loss,train_top1,test_top1,test_top5,
  // dloc_0..dloc_{layers-1},gate_0..gate_{gpsa_layers-1}.
  void write_csv(std::ostream& out, std::size_t num_layers, std::size_t num_gpsa_layers) const;

 private:
  std::vector<RunLogRow> rows_;
};

// Trainable parameters that `freeze` holds fixed.
bool is_frozen(const NamedParameter& p, const std::set<FreezeSet>& freeze, const ConViTModel& model);

struct TrainHooks {
  // Called after each logged row; return false to stop early.
  std::function<bool(const RunLogRow&)> on_log;
};

/// Trains in place. Deterministic for a fixed config seed: each epoch's
/// batch order is a permutation drawn from (seed, epoch).
RunLog train(ConViTModel& model, const DatasetPair& data, const TrainConfig& config,
             const TrainHooks& hooks = {});

struct AblationRow {
  std::string id;
  bool train_gating = false;
  bool conv_init = false;
  bool train_gpsa = false;
  bool use_gpsa = false;
  double top1 = 0.0;
};

// The seven gating / conv-init / GPSA configurations, as (row, model, train).
struct AblationPlan {
  AblationRow row;
  ModelConfig model;
  TrainConfig train;
};
std::vector<AblationPlan> ablation_plans(const ModelConfig& base_model, const TrainConfig& base_train);

// Runs every plan; `out_dir` (when set) receives each row's runlog.
std::vector<AblationRow> ablation_suite(const ModelConfig& base_model, const TrainConfig& base_train,
                                        const DatasetPair& data,
                                        const std::optional<std::string>& out_dir = std::nullopt);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace gpsa
