#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "gpsa/config.hpp"

using namespace gpsa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path write_config(const std::string& name, const json& j) {
  const auto p = fs::temp_directory_path() / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("defaults pass their own schema and round trip") {
  const auto d = default_config_json();
  CHECK_NOTHROW(check_against_schema(d));
  CHECK(json(d.get<RunConfig>()) == d);
  for (const char* key : {"model", "train", "data"}) CHECK(d.contains(key));
  CHECK(d["data"]["synthetic"].contains("test_per_class"));
}

TEST_CASE("unknown keys are rejected by dotted name") {
  auto j = default_config_json();
  j["model"]["heads"] = 4;
  CHECK(config_error([&] { check_against_schema(j); }).find("\"model.heads\"") != std::string::npos);
  j = default_config_json();
  j["foo"] = json{{"bar", 1}};
  CHECK(config_error([&] { check_against_schema(j); }).find("\"foo\"") != std::string::npos);
}

TEST_CASE("type mismatches name the key and expected type") {
  auto j = default_config_json();
  j["train"]["epochs"] = "ten";
  const auto msg = config_error([&] { check_against_schema(j); });
  CHECK(msg.find("train.epochs") != std::string::npos);
  CHECK(msg.find("expects") != std::string::npos);
  j["train"]["epochs"] = -3;
  CHECK_FALSE(config_error([&] { check_against_schema(j); }).empty());
  j["train"]["epochs"] = 3;
  j["model"]["conv_init"] = 1;
  CHECK(config_error([&] { check_against_schema(j); }).find("model.conv_init") != std::string::npos);
  j = default_config_json();
  j["train"]["base_lr"] = 1;  // integers are acceptable where a float is expected
  CHECK_NOTHROW(check_against_schema(j));
}

TEST_CASE("overrides parse JSON values and are type checked") {
  auto j = default_config_json();
  apply_override(j, "train.epochs=7");
  apply_override(j, "model.locality_strength=2.5");
  apply_override(j, "model.conv_init=false");
  apply_override(j, "data.kind=mnist");
  apply_override(j, "train.freeze=[\"gating\"]");
  CHECK(j["train"]["epochs"] == 7);
  CHECK(j["model"]["locality_strength"] == 2.5);
  CHECK(j["model"]["conv_init"] == false);
  CHECK(j["data"]["kind"] == "mnist");
  CHECK(j.get<RunConfig>().train.freeze == std::set<FreezeSet>{FreezeSet::gating});

  CHECK(config_error([&] { apply_override(j, "foo.bar=1"); }).find("\"foo.bar\"") != std::string::npos);
  CHECK(config_error([&] { apply_override(j, "train.epochs.x=1"); }).find("train.epochs.x") != std::string::npos);
  CHECK(config_error([&] { apply_override(j, "train.epochs=abc"); }).find("train.epochs") != std::string::npos);
  CHECK_FALSE(config_error([&] { apply_override(j, "no-equals-sign"); }).empty());
}

TEST_CASE("resolve_config layers defaults, file and overrides") {
  json partial{{"model", {{"num_heads", 9}, {"head_dim", 2}}}, {"train", {{"epochs", 4}}}};
  const auto path = write_config("gpsa_partial.json", partial);
  const auto c = resolve_config(path.string(), {"train.epochs=6", "train.warmup_epochs=2"});
  CHECK(c.model.num_heads == 9);
  CHECK(c.model.head_dim == 2);
  CHECK(c.train.epochs == 6);
  CHECK(c.train.warmup_epochs == 2);
  CHECK(c.train.batch_size == TrainConfig{}.batch_size);

  // The resolved form is complete and reproduces itself.
  const auto resolved = write_config("gpsa_resolved.json", json(c));
  CHECK(json(resolve_config(resolved.string(), {})) == json(c));
  fs::remove(path);
  fs::remove(resolved);
}

TEST_CASE("resolve_config rejects invalid settings") {
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.image_size=9"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.num_heads=3"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"train.warmup_epochs=50"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"data.fraction=0"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.positional_mode=diagonal"}), ConfigError);
  CHECK_THROWS_AS(resolve_config("/nonexistent/config.json", {}), ConfigError);
  const auto bad = fs::temp_directory_path() / "gpsa_bad.json";
  std::ofstream(bad) << "{ not json";
  CHECK_THROWS_AS(resolve_config(bad.string(), {}), ConfigError);
  fs::remove(bad);
}

TEST_CASE("subsampled schedules stretch by the epoch multiplier") {
  auto c = resolve_config(std::nullopt, {"data.fraction=0.1", "train.epochs=3", "train.warmup_epochs=1",
                                         "train.eval_every=1"});
  const auto t = scaled_train_config(c);
  CHECK(t.epochs == 30);
  CHECK(t.warmup_epochs == 10);
  CHECK(t.eval_every == 10);
  c.data.fraction = 1.0;
  CHECK(scaled_train_config(c).epochs == 3);
}

TEST_CASE("dataset loading") {
  auto c = resolve_config(std::nullopt, {"data.synthetic.per_class=10", "data.fraction=0.5"});
  const auto d = load_dataset(c.data);
  CHECK(d.train.size() == 15);
  CHECK(d.test.size() == 3 * c.data.synthetic_test_per_class);

  DataConfig cifar;
  cifar.kind = "cifar10";
  unsetenv("GPSA_DATA_ROOT");
  CHECK(config_error([&] { load_dataset(cifar); }).find("GPSA_DATA_ROOT") != std::string::npos);
  cifar.root = "/nonexistent";
  CHECK_THROWS_AS(load_dataset(cifar), Error);
  cifar.kind = "imagenet";
  CHECK_THROWS_AS(load_dataset(cifar), ConfigError);
}
