// gpsa-lab: train, evaluate, ablate, inspect and gradient-check ConViT models.
//
// Exit codes: 0 success, 1 numeric or training failure, 2 usage or config
// error, 3 incompatible checkpoint.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpsa/config.hpp"
#include "gpsa/gradcheck.hpp"
#include "gpsa/metrics.hpp"
#include "gpsa/model.hpp"
#include "gpsa/tensor.hpp"
#include "gpsa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIncompatible = 3;

struct Options {
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::optional<std::string> checkpoint;
  std::optional<std::size_t> layer, head, query;
  std::size_t image_index = 0;
  bool mask_pos_embed = false;
  std::string mask_attention;
  std::string inject_fault;
};

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw gpsa::IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void check_data_fits(const gpsa::ModelConfig& m, const gpsa::DatasetPair& data, bool from_checkpoint) {
  const auto& t = data.train;
  std::string problem;
  if (t.channels != m.channels) problem = "channels";
  else if (t.height != m.image_size || t.width != m.image_size) problem = "image size";
  else if (t.num_classes > m.num_classes) problem = "class count";
  if (problem.empty()) return;
  const auto msg = "dataset " + problem + " does not match the model";
  if (from_checkpoint) throw gpsa::IncompatibleError(msg);
  throw gpsa::ConfigError(msg);
}

gpsa::ConViTModel load_model(const Options& opt, const gpsa::RunConfig& run) {
  if (!opt.checkpoint) return gpsa::ConViTModel(run.model);
  try {
    return gpsa::load_checkpoint(*opt.checkpoint).model;
  } catch (const gpsa::IoError& e) {
    throw gpsa::IncompatibleError(e.what());
  } catch (const gpsa::ParseError& e) {
    throw gpsa::IncompatibleError(e.what());
  }
}

void apply_masks(gpsa::ConViTModel& model, const Options& opt) {
  if (opt.mask_pos_embed) model.mask_abs_pos_embed(true);
  // The flag names the pathway that is switched off.
  if (opt.mask_attention == "content") {
    model.mask_attention_mode(gpsa::AttentionMask::position_only);
  } else if (opt.mask_attention == "position") {
    model.mask_attention_mode(gpsa::AttentionMask::content_only);
  }
}

int cmd_train(const Options& opt) {
  const auto run = gpsa::resolve_config(opt.config_path, opt.overrides);
  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  write_json(out / "config.resolved.json", json(run));

  const auto data = gpsa::load_dataset(run.data);
  check_data_fits(run.model, data, false);
  const auto train_cfg = gpsa::scaled_train_config(run);
  gpsa::ConViTModel model(run.model);

  gpsa::TrainHooks hooks;
  hooks.on_log = [](const gpsa::RunLogRow& r) {
    std::cout << "epoch " << r.epoch << " lr " << r.lr << " train_loss " << r.train_loss
              << " test_top1 " << r.test_top1 << '\n';
    return true;
  };
  const auto log = gpsa::train(model, data, train_cfg, hooks);

  gpsa::save_checkpoint(model, (out / "checkpoint").string(), train_cfg.epochs);
  std::ofstream csv(out / "runlog.csv");
  log.write_csv(csv, run.model.num_gpsa_layers + run.model.num_sa_layers, run.model.num_gpsa_layers);
  return kExitOk;
}

int cmd_eval(const Options& opt) {
  const auto run = gpsa::resolve_config(opt.config_path, opt.overrides);
  auto model = load_model(opt, run);
  const auto data = gpsa::load_dataset(run.data);
  check_data_fits(model.config(), data, opt.checkpoint.has_value());
  apply_masks(model, opt);
  const auto r = gpsa::evaluate(model, data.test, run.train.test_limit);

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  write_json(out / "eval.json", {{"loss", r.loss},
                                 {"top1", r.top1},
                                 {"top5", r.top5},
                                 {"mask_pos_embed", opt.mask_pos_embed},
                                 {"mask_attention", opt.mask_attention.empty() ? "none" : opt.mask_attention}});
  std::cout << "top1 " << r.top1 << " top5 " << r.top5 << " loss " << r.loss << '\n';
  return kExitOk;
}

int cmd_ablate(const Options& opt) {
  const auto run = gpsa::resolve_config(opt.config_path, opt.overrides);
  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  write_json(out / "config.resolved.json", json(run));
  const auto data = gpsa::load_dataset(run.data);
  check_data_fits(run.model, data, false);
  const auto rows = gpsa::ablation_suite(run.model, gpsa::scaled_train_config(run), data, out.string());
  std::ofstream csv(out / "ablation.csv");
  gpsa::write_ablation_csv(csv, rows);
  for (const auto& r : rows) std::cout << r.id << ' ' << r.top1 << '\n';
  return kExitOk;
}

int cmd_inspect(const Options& opt) {
  const auto run = gpsa::resolve_config(opt.config_path, opt.overrides);
  auto model = load_model(opt, run);
  const auto data = gpsa::load_dataset(run.data);
  check_data_fits(model.config(), data, opt.checkpoint.has_value());
  apply_masks(model, opt);

  const auto& cfg = model.config();
  const auto num_layers = cfg.num_gpsa_layers + cfg.num_sa_layers;
  if (opt.layer && *opt.layer >= num_layers) throw gpsa::ContractError("--layer out of range");
  if (opt.head && *opt.head >= cfg.num_heads) throw gpsa::ContractError("--head out of range");
  if (opt.query && *opt.query >= cfg.num_patches()) throw gpsa::ContractError("--query out of range");
  if (opt.image_index >= data.test.size()) throw gpsa::ContractError("--image-index out of range");

  const fs::path out(opt.out_dir);
  fs::create_directories(out);

  std::vector<gpsa::Tensor> images;
  const auto n = std::min(run.train.nonlocality_batch, data.test.size());
  for (std::size_t i = 0; i < n; ++i) images.push_back(data.test.image(i));
  const auto report = gpsa::nonlocality_over_batch(model, images);
  std::ofstream nl(out / "nonlocality.csv");
  gpsa::write_nonlocality_csv(nl, report, 0);

  std::ofstream gate(out / "gating.csv");
  if (cfg.num_gpsa_layers > 0) {
    gpsa::write_gating_csv(gate, gpsa::gating_summary(model));
  } else {
    gpsa::write_gating_csv(gate, {});
  }

  gpsa::AttentionRecord record;
  model.forward(data.test.image(opt.image_index), &record);
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (opt.layer && l != *opt.layer) continue;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      if (opt.head && h != *opt.head) continue;
      const auto side = cfg.grid_side();
      const auto q = opt.query.value_or((side / 2) * side + side / 2);  // grid centre
      const auto name = "attn_l" + std::to_string(l) + "_h" + std::to_string(h) + "_q" + std::to_string(q) + ".pgm";
      gpsa::export_attention_map(record, l, h, q, (out / name).string());
    }
  }
  return kExitOk;
}

int cmd_gradcheck(const Options& opt) {
  const auto run = gpsa::resolve_config(opt.config_path, opt.overrides);
  if (!opt.inject_fault.empty()) gpsa::testing::inject_backward_fault(opt.inject_fault);
  auto cfg = gpsa::gradcheck_micro_config();
  cfg.positional_mode = run.model.positional_mode;
  cfg.scale_content = run.model.scale_content;
  const auto report = gpsa::run_gradcheck(cfg, run.model.seed);

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  std::ofstream csv(out / "gradcheck.csv");
  report.write(csv);
  for (const auto& [role, err] : report.role_errors()) std::cout << role << ' ' << err << '\n';
  if (report.passed()) {
    std::cout << "gradcheck passed\n";
    return kExitOk;
  }
  std::string failing;
  for (const auto& e : report.entries) {
    if (!e.passed) failing += (failing.empty() ? "" : ", ") + e.kind + ":" + e.name;
  }
  return fail("gradcheck", "gradient mismatch in " + failing, kExitNumeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and analyse gated positional self-attention models"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "Override a config key: dotted.key=value");
    sub->add_option("--out", opt.out_dir, "Output directory");
  };
  auto add_masks = [&](CLI::App* sub) {
    sub->add_flag("--mask-pos-embed", opt.mask_pos_embed, "Zero the absolute position embedding");
    sub->add_option("--mask-attention", opt.mask_attention, "Switch off one GPSA pathway: content or position")
        ->check(CLI::IsMember({"content", "position"}));
  };

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint and run log");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory")->required();
  add_masks(eval);
  auto* ablate = app.add_subcommand("ablate", "Run the gating and initialization ablation");
  add_common(ablate);
  auto* inspect = app.add_subcommand("inspect", "Write nonlocality, gating and attention maps");
  add_common(inspect);
  inspect->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory");
  inspect->add_option("--layer", opt.layer, "Layer index");
  inspect->add_option("--head", opt.head, "Head index");
  inspect->add_option("--query", opt.query, "Query patch index (default: grid centre)");
  inspect->add_option("--image-index", opt.image_index, "Test image index");
  add_masks(inspect);
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  add_common(gradcheck);
  gradcheck->add_option("--inject-fault", opt.inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitUsage);
  }

  try {
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (ablate->parsed()) return cmd_ablate(opt);
    if (inspect->parsed()) return cmd_inspect(opt);
    return cmd_gradcheck(opt);
  } catch (const gpsa::IncompatibleError& e) {
    return fail("incompatible", e.what(), kExitIncompatible);
  } catch (const gpsa::NumericError& e) {
    return fail("numeric", e.what(), kExitNumeric);
  } catch (const gpsa::ConfigError& e) {
    return fail("config", e.what(), kExitUsage);
  } catch (const gpsa::ContractError& e) {
    return fail("usage", e.what(), kExitUsage);
  } catch (const gpsa::Error& e) {
    return fail("data", e.what(), kExitUsage);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kExitNumeric);
  }
}
