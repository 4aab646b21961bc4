#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpsa/data.hpp"
#include "gpsa/model.hpp"
#include "gpsa/trainer.hpp"

namespace gpsa {

struct DataConfig {
  // "synthetic", "cifar10" or "mnist".
  std::string kind = "synthetic";
  // Dataset directory; empty falls back to GPSA_DATA_ROOT.
  std::string root;
  double fraction = 1.0;
  std::uint64_t subsample_seed = 0;
  SyntheticSpec synthetic;
  std::size_t synthetic_test_per_class = 32;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Every key with its default value; doubles as the schema.
nlohmann::json default_config_json();

// Rejects keys absent from the schema and values whose JSON type does not
// match the default's. Throws ConfigError naming the offending dotted key.
void check_against_schema(const nlohmann::json& config);

// Applies "a.b.c=value". The value is parsed as JSON, falling back to a
// plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Defaults, then the file (if any), then overrides; validated.
RunConfig resolve_config(const std::optional<std::string>& path,
                         const std::vector<std::string>& overrides);

// Loads and subsamples the configured dataset.
DatasetPair load_dataset(const DataConfig& config);

// Training schedule stretched by the subsample epoch multiplier.
TrainConfig scaled_train_config(const RunConfig& config);

}  // namespace gpsa
