#include "gpsa/model.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "gpsa/ops.hpp"

namespace gpsa {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size (" + std::to_string(image_size) +
                      ") must be a positive multiple of patch_size (" +
                      std::to_string(patch_size) + ")");
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (num_gpsa_layers + num_sa_layers == 0) throw ConfigError("model needs at least one block");
  if (num_heads == 0 || head_dim == 0) throw ConfigError("num_heads and head_dim must be positive");
  if (ffn_ratio == 0) throw ConfigError("ffn_ratio must be positive");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (conv_init && num_gpsa_layers > 0) {
    if (!exact_sqrt(num_heads)) {
      throw ConfigError("conv_init requires a perfect-square num_heads, got " +
                        std::to_string(num_heads));
    }
    if (!(locality_strength > 0.0)) throw ConfigError("locality_strength must be positive");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"image_size", c.image_size},
           {"patch_size", c.patch_size},
           {"channels", c.channels},
           {"num_gpsa_layers", c.num_gpsa_layers},
           {"num_sa_layers", c.num_sa_layers},
           {"num_heads", c.num_heads},
           {"head_dim", c.head_dim},
           {"ffn_ratio", c.ffn_ratio},
           {"num_classes", c.num_classes},
           {"locality_strength", c.locality_strength},
           {"conv_init", c.conv_init},
           {"strict_conv_init", c.strict_conv_init},
           {"gate_trainable", c.gate_trainable},
           {"use_abs_pos_embed", c.use_abs_pos_embed},
           {"scale_content", c.scale_content},
           {"positional_mode", c.positional_mode == PositionalMode::gated ? "gated" : "vanilla"},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  const ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.num_gpsa_layers = j.value("num_gpsa_layers", d.num_gpsa_layers);
  c.num_sa_layers = j.value("num_sa_layers", d.num_sa_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.ffn_ratio = j.value("ffn_ratio", d.ffn_ratio);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.locality_strength = j.value("locality_strength", d.locality_strength);
  c.conv_init = j.value("conv_init", d.conv_init);
  c.strict_conv_init = j.value("strict_conv_init", d.strict_conv_init);
  c.gate_trainable = j.value("gate_trainable", d.gate_trainable);
  c.use_abs_pos_embed = j.value("use_abs_pos_embed", d.use_abs_pos_embed);
  c.scale_content = j.value("scale_content", d.scale_content);
  const auto mode = j.value("positional_mode", std::string("gated"));
  if (mode != "gated" && mode != "vanilla") {
    throw ConfigError("positional_mode must be \"gated\" or \"vanilla\", got \"" + mode + "\"");
  }
  c.positional_mode = mode == "gated" ? PositionalMode::gated : PositionalMode::vanilla;
  c.seed = j.value("seed", d.seed);
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const auto d = c.embed_dim();
  const auto hidden = c.ffn_ratio * d;
  const auto attention = 4 * d * d + d;  // per-head Q, K, V slices plus W_out, b_out
  const auto block = attention + 4 * d + (d * hidden + hidden + hidden * d + d);
  std::size_t n = c.patch_dim() * d + d;  // patch projection
  if (c.use_abs_pos_embed) n += c.num_patches() * d;
  n += d;                                        // class token
  n += c.num_gpsa_layers * (block + 4 * c.num_heads);  // + v_pos (3) and gate (1) per head
  n += c.num_sa_layers * block;
  n += 2 * d + d * c.num_classes + c.num_classes;  // final norm + head
  return n;
}

const char* role_name(ParamRole role) {
  switch (role) {
    case ParamRole::embed: return "embed";
    case ParamRole::pos_embed: return "pos_embed";
    case ParamRole::cls_token: return "cls_token";
    case ParamRole::w_qry: return "W_qry";
    case ParamRole::w_key: return "W_key";
    case ParamRole::w_val: return "W_val";
    case ParamRole::w_out: return "W_out";
    case ParamRole::b_out: return "b_out";
    case ParamRole::v_pos: return "v_pos";
    case ParamRole::gate: return "lambda";
    case ParamRole::ffn: return "FFN";
    case ParamRole::layernorm: return "LN";
    case ParamRole::head: return "head";
  }
  return "?";
}

Tensor Linear::forward(const Tensor& x) const {
  return ops::add_bias(ops::matmul(x, weight), bias);
}

Tensor LayerNormParams::forward(const Tensor& x) const { return ops::layernorm(x, gain, bias); }

Tensor Ffn::forward(const Tensor& x) const { return fc2.forward(ops::gelu(fc1.forward(x))); }

namespace {

Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {trunc_normal_tensor({in, out}, 0.02, rng), Tensor::zeros({out}, true)};
}

LayerNormParams make_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

Ffn make_ffn(std::size_t d, std::size_t hidden, Rng& rng) {
  return {make_linear(d, hidden, rng), make_linear(hidden, d, rng)};
}

template <typename Attn>
Tensor residual_block(const Tensor& z, const LayerNormParams& norm1, const Attn& attn,
                      const LayerNormParams& norm2, const Ffn& ffn) {
  auto z1 = ops::add(z, attn(norm1.forward(z)));
  return ops::add(z1, ffn.forward(norm2.forward(z1)));
}

}  // namespace

Tensor block_forward(const Tensor& z, const GpsaBlock& block, const RelPosTable& table,
                     std::vector<Tensor>* maps) {
  return residual_block(
      z, block.norm1, [&](const Tensor& x) { return block.attn.forward(x, table, maps); },
      block.norm2, block.ffn);
}

Tensor block_forward(const Tensor& z, const SaBlock& block, std::vector<Tensor>* maps) {
  return residual_block(
      z, block.norm1, [&](const Tensor& x) { return block.attn.forward(x, maps); }, block.norm2,
      block.ffn);
}

ConViTModel::ConViTModel(const ModelConfig& config)
    : config_((config.validate(), config)),
      table_(PatchGrid{config.grid_side(), config.grid_side()}) {
  Rng rng(config.seed);
  const auto d = config.embed_dim();
  const auto hidden = config.ffn_ratio * d;
  patch_embed = make_linear(config.patch_dim(), d, rng);
  if (config.use_abs_pos_embed) pos_embed = trunc_normal_tensor({config.num_patches(), d}, 0.02, rng);
  cls_token = trunc_normal_tensor({1, d}, 0.02, rng);
  for (std::size_t i = 0; i < config.num_gpsa_layers; ++i) {
    GpsaBlock block{make_norm(d), GpsaLayer(config.num_heads, config.head_dim, rng), make_norm(d),
                    make_ffn(d, hidden, rng)};
    block.attn.scale_content = config.scale_content;
    block.attn.mode = config.positional_mode;
    if (config.conv_init) {
      conv_init(block.attn, {config.locality_strength, config.strict_conv_init});
    }
    if (!config.gate_trainable) {
      for (auto& g : block.attn.gate) {
        g.mutable_data()[0] = 0.0;
        g.set_requires_grad(false);
      }
    }
    gpsa_blocks.push_back(std::move(block));
  }
  for (std::size_t i = 0; i < config.num_sa_layers; ++i) {
    SaBlock block{make_norm(d), SaLayer(config.num_heads, config.head_dim, rng), make_norm(d),
                  make_ffn(d, hidden, rng)};
    block.attn.scale_content = config.scale_content;
    sa_blocks.push_back(std::move(block));
  }
  norm = make_norm(d);
  head = make_linear(d, config.num_classes, rng);
}

std::vector<NamedParameter> ConViTModel::parameters() const {
  std::vector<NamedParameter> out;
  auto add = [&](std::string name, const Tensor& t, ParamRole role, int layer = -1, int head = -1,
                 bool decay = false) { out.push_back({std::move(name), t, role, layer, head, decay}); };
  auto add_norm = [&](const std::string& prefix, const LayerNormParams& n, int layer) {
    add(prefix + ".gain", n.gain, ParamRole::layernorm, layer);
    add(prefix + ".bias", n.bias, ParamRole::layernorm, layer);
  };
  auto add_attn = [&](const std::string& prefix, const MultiHeadWeights& w, int layer) {
    for (std::size_t h = 0; h < w.num_heads(); ++h) {
      const auto hs = std::to_string(h);
      const int hi = static_cast<int>(h);
      add(prefix + ".w_qry." + hs, w.w_qry[h], ParamRole::w_qry, layer, hi, true);
      add(prefix + ".w_key." + hs, w.w_key[h], ParamRole::w_key, layer, hi, true);
      add(prefix + ".w_val." + hs, w.w_val[h], ParamRole::w_val, layer, hi, true);
    }
    add(prefix + ".w_out", w.w_out, ParamRole::w_out, layer, -1, true);
    add(prefix + ".b_out", w.b_out, ParamRole::b_out, layer);
  };
  auto add_ffn = [&](const std::string& prefix, const Ffn& f, int layer) {
    add(prefix + ".fc1.weight", f.fc1.weight, ParamRole::ffn, layer, -1, true);
    add(prefix + ".fc1.bias", f.fc1.bias, ParamRole::ffn, layer);
    add(prefix + ".fc2.weight", f.fc2.weight, ParamRole::ffn, layer, -1, true);
    add(prefix + ".fc2.bias", f.fc2.bias, ParamRole::ffn, layer);
  };

  add("patch_embed.weight", patch_embed.weight, ParamRole::embed, -1, -1, true);
  add("patch_embed.bias", patch_embed.bias, ParamRole::embed);
  if (pos_embed.defined()) add("pos_embed", pos_embed, ParamRole::pos_embed);
  add("cls_token", cls_token, ParamRole::cls_token);
  int layer = 0;
  for (const auto& b : gpsa_blocks) {
    const auto p = "blocks." + std::to_string(layer);
    add_norm(p + ".norm1", b.norm1, layer);
    add_attn(p + ".attn", b.attn.weights, layer);
    for (std::size_t h = 0; h < b.attn.num_heads(); ++h) {
      add(p + ".attn.v_pos." + std::to_string(h), b.attn.pos[h].v_pos, ParamRole::v_pos, layer,
          static_cast<int>(h));
      add(p + ".attn.gate." + std::to_string(h), b.attn.gate[h], ParamRole::gate, layer,
          static_cast<int>(h));
    }
    add_norm(p + ".norm2", b.norm2, layer);
    add_ffn(p + ".ffn", b.ffn, layer);
    ++layer;
  }
  for (const auto& b : sa_blocks) {
    const auto p = "blocks." + std::to_string(layer);
    add_norm(p + ".norm1", b.norm1, layer);
    add_attn(p + ".attn", b.attn.weights, layer);
    add_norm(p + ".norm2", b.norm2, layer);
    add_ffn(p + ".ffn", b.ffn, layer);
    ++layer;
  }
  add_norm("norm", norm, -1);
  add("head.weight", head.weight, ParamRole::head, -1, -1, true);
  add("head.bias", head.bias, ParamRole::head);
  return out;
}

std::size_t ConViTModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<double> extract_patch(const Tensor& image, std::size_t patch_size, std::size_t row,
                                  std::size_t col) {
  const auto channels = image.dim(0), width = image.dim(2);
  const auto hw = image.dim(1) * width;
  std::vector<double> out;
  out.reserve(channels * patch_size * patch_size);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < patch_size; ++y) {
      for (std::size_t x = 0; x < patch_size; ++x) {
        out.push_back(image[c * hw + (row * patch_size + y) * width + col * patch_size + x]);
      }
    }
  }
  return out;
}

Tensor ConViTModel::embed(const Tensor& image) const {
  const auto& c = config_;
  if (image.rank() != 3 || image.dim(0) != c.channels || image.dim(1) != c.image_size ||
      image.dim(2) != c.image_size) {
    throw ShapeError("expected image [" + std::to_string(c.channels) + "x" +
                     std::to_string(c.image_size) + "x" + std::to_string(c.image_size) +
                     "], got " + shape_str(image.shape()));
  }
  const auto side = c.grid_side();
  std::vector<double> patches;
  patches.reserve(c.num_patches() * c.patch_dim());
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t q = 0; q < side; ++q) {
      auto p = extract_patch(image, c.patch_size, r, q);
      patches.insert(patches.end(), p.begin(), p.end());
    }
  }
  auto z = patch_embed.forward(Tensor({c.num_patches(), c.patch_dim()}, std::move(patches)));
  if (pos_embed.defined() && !pos_embed_masked_) z = ops::add(z, pos_embed);
  return z;
}

Tensor ConViTModel::forward(const Tensor& image, AttentionRecord* record) const {
  if (record) *record = AttentionRecord{grid(), {}};
  auto capture = [&](LayerKind kind, bool cls) -> std::vector<Tensor>* {
    if (!record) return nullptr;
    record->layers.push_back({kind, cls, {}});
    return &record->layers.back().heads;
  };
  auto z = embed(image);
  for (const auto& b : gpsa_blocks) z = block_forward(z, b, table_, capture(LayerKind::gpsa, false));
  z = ops::concat_rows({cls_token, z});
  for (const auto& b : sa_blocks) z = block_forward(z, b, capture(LayerKind::sa, true));
  auto logits = head.forward(norm.forward(ops::slice_rows(z, 0, 1)));
  return ops::reshape(logits, {config_.num_classes});
}

void ConViTModel::mask_attention_mode(AttentionMask mode, std::optional<std::size_t> layer) {
  if (gpsa_blocks.empty()) throw ContractError("attention masking needs GPSA layers");
  if (layer && *layer >= gpsa_blocks.size()) {
    throw ContractError("GPSA layer " + std::to_string(*layer) + " out of range");
  }
  std::optional<double> value;
  if (mode == AttentionMask::position_only) value = 1.0;
  if (mode == AttentionMask::content_only) value = 0.0;
  for (std::size_t i = 0; i < gpsa_blocks.size(); ++i) {
    if (!layer || *layer == i) gpsa_blocks[i].attn.gate_override = value;
  }
}

void save_checkpoint(const ConViTModel& model, const std::string& dir, std::size_t step) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  json manifest;
  manifest["config"] = model.config();
  manifest["step"] = step;
  manifest["tensors"] = json::array();
  for (const auto& p : model.parameters()) {
    const auto file = p.name + ".gpsat";
    save_tensor((fs::path(dir) / file).string(), p.tensor);
    manifest["tensors"].push_back({{"name", p.name},
                                   {"file", file},
                                   {"role", role_name(p.role)},
                                   {"layer_index", p.layer},
                                   {"head", p.head}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("bad checkpoint manifest: " + std::string(e.what()));
  }
  LoadedCheckpoint loaded{ConViTModel(manifest.at("config").get<ModelConfig>()),
                          manifest.value("step", std::size_t{0})};
  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) {
    files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
  }
  for (auto& p : loaded.model.parameters()) {
    auto it = files.find(p.name);
    if (it == files.end()) throw IncompatibleError("checkpoint lacks tensor " + p.name);
    auto stored = load_tensor((fs::path(dir) / it->second).string());
    if (stored.shape() != p.tensor.shape()) {
      throw IncompatibleError("tensor " + p.name + " has shape " + shape_str(stored.shape()) +
                              ", model expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
  return loaded;
}

}  // namespace gpsa
