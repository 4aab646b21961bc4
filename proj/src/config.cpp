#include "gpsa/config.hpp"

#include <fstream>

namespace gpsa {

using nlohmann::json;

void to_json(json& j, const DataConfig& c) {
  const auto& s = c.synthetic;
  j = json{{"kind", c.kind},
           {"root", c.root},
           {"fraction", c.fraction},
           {"subsample_seed", c.subsample_seed},
           {"synthetic",
            {{"num_classes", s.num_classes},
             {"per_class", s.per_class},
             {"test_per_class", c.synthetic_test_per_class},
             {"image_size", s.image_size},
             {"channels", s.channels},
             {"blobs_per_class", s.blobs_per_class},
             {"blob_sigma", s.blob_sigma},
             {"jitter", s.jitter},
             {"noise", s.noise},
             {"seed", s.seed}}}};
}

void from_json(const json& j, DataConfig& c) {
  const DataConfig d;
  c.kind = j.value("kind", d.kind);
  c.root = j.value("root", d.root);
  c.fraction = j.value("fraction", d.fraction);
  c.subsample_seed = j.value("subsample_seed", d.subsample_seed);
  const auto s = j.value("synthetic", json::object());
  const auto& ds = d.synthetic;
  c.synthetic.num_classes = s.value("num_classes", ds.num_classes);
  c.synthetic.per_class = s.value("per_class", ds.per_class);
  c.synthetic_test_per_class = s.value("test_per_class", d.synthetic_test_per_class);
  c.synthetic.image_size = s.value("image_size", ds.image_size);
  c.synthetic.channels = s.value("channels", ds.channels);
  c.synthetic.blobs_per_class = s.value("blobs_per_class", ds.blobs_per_class);
  c.synthetic.blob_sigma = s.value("blob_sigma", ds.blob_sigma);
  c.synthetic.jitter = s.value("jitter", ds.jitter);
  c.synthetic.noise = s.value("noise", ds.noise);
  c.synthetic.seed = s.value("seed", ds.seed);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}};
}

void from_json(const json& j, RunConfig& c) {
  c.model = j.value("model", json::object()).get<ModelConfig>();
  c.train = j.value("train", json::object()).get<TrainConfig>();
  c.data = j.value("data", json::object()).get<DataConfig>();
}

json default_config_json() { return json(RunConfig{}); }

namespace {

const char* type_label(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_unsigned()) return "non-negative integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool compatible(const json& schema, const json& value) {
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_number_unsigned()) return value.is_number_unsigned();
  if (schema.is_number()) return value.is_number();
  if (schema.is_string()) return value.is_string();
  if (schema.is_array()) return value.is_array();
  if (schema.is_object()) return value.is_object();
  return false;
}

void check_node(const json& schema, const json& value, const std::string& prefix) {
  for (const auto& [key, v] : value.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key \"" + path + "\"");
    const auto& s = schema.at(key);
    if (!compatible(s, v)) {
      throw ConfigError("config key \"" + path + "\" expects a " + type_label(s) + ", got " +
                        type_label(v));
    }
    if (s.is_object()) check_node(s, v, path);
  }
}

}  // namespace

void check_against_schema(const json& config) {
  if (!config.is_object()) throw ConfigError("config must be a JSON object");
  check_node(default_config_json(), config, "");
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\" is not of the form key=value");
  }
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  const auto schema = default_config_json();
  const json* s = &schema;
  json* node = &config;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!s->is_object() || !s->contains(part)) throw ConfigError("unknown config key \"" + key + "\"");
    s = &s->at(part);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
  check_against_schema(config);
}

RunConfig resolve_config(const std::optional<std::string>& path,
                         const std::vector<std::string>& overrides) {
  json config = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config file " + *path);
    config = json::parse(in, nullptr, false);
    if (config.is_discarded()) throw ConfigError("config file " + *path + " is not valid JSON");
  }
  check_against_schema(config);
  for (const auto& o : overrides) apply_override(config, o);
  RunConfig run;
  try {
    run = config.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  run.model.validate();
  run.train.validate(run.model);
  SubsampleSpec{run.data.fraction, run.data.subsample_seed}.validate();
  return run;
}

DatasetPair load_dataset(const DataConfig& config) {
  DatasetPair pair;
  if (config.kind == "synthetic") {
    pair = synthetic_pair(config.synthetic, config.synthetic_test_per_class);
  } else if (config.kind == "cifar10" || config.kind == "mnist") {
    const auto root = config.root.empty() ? data_root_from_env() : config.root;
    if (root.empty()) {
      throw ConfigError("data.kind=" + config.kind + " needs data.root or GPSA_DATA_ROOT");
    }
    pair = config.kind == "cifar10" ? load_cifar10(root) : load_mnist(root);
  } else {
    throw ConfigError("unknown data.kind \"" + config.kind + "\"");
  }
  pair.train = subsample(pair.train, {config.fraction, config.subsample_seed});
  return pair;
}

TrainConfig scaled_train_config(const RunConfig& config) {
  auto train = config.train;
  const auto mult = SubsampleSpec{config.data.fraction, config.data.subsample_seed}.epoch_multiplier();
  train.epochs *= mult;
  train.warmup_epochs *= mult;
  train.eval_every *= mult;
  return train;
}

}  // namespace gpsa
