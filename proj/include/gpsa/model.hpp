#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpsa/attention.hpp"
#include "gpsa/attention_record.hpp"
#include "gpsa/tensor.hpp"

namespace gpsa {

struct ModelConfig {
  std::size_t image_size = 8;
  std::size_t patch_size = 2;
  std::size_t channels = 1;
  std::size_t num_gpsa_layers = 1;
  std::size_t num_sa_layers = 1;
  std::size_t num_heads = 4;
  std::size_t head_dim = 4;
  std::size_t ffn_ratio = 4;
  std::size_t num_classes = 3;
  double locality_strength = 1.0;
  bool conv_init = true;
  bool strict_conv_init = false;
  // When false the gates are pinned at logit 0 (sigmoid 0.5) and never trained.
  bool gate_trainable = true;
  bool use_abs_pos_embed = true;
  bool scale_content = true;
  PositionalMode positional_mode = PositionalMode::gated;
  std::uint64_t seed = 0;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t embed_dim() const { return num_heads * head_dim; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  // Throws ConfigError on violated invariants.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

enum class ParamRole {
  embed,
  pos_embed,
  cls_token,
  w_qry,
  w_key,
  w_val,
  w_out,
  b_out,
  v_pos,
  gate,
  ffn,
  layernorm,
  head,
};

const char* role_name(ParamRole role);

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamRole role;
  int layer = -1;  // block index, -1 outside blocks
  int head = -1;
  // Excluded from weight decay: gates, v_pos, biases, norms, tokens.
  bool decay = true;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  Tensor forward(const Tensor& x) const;
};

struct Ffn {
  Linear fc1;
  Linear fc2;
  Tensor forward(const Tensor& x) const;
};

struct GpsaBlock {
  LayerNormParams norm1;
  GpsaLayer attn;
  LayerNormParams norm2;
  Ffn ffn;
};

struct SaBlock {
  LayerNormParams norm1;
  SaLayer attn;
  LayerNormParams norm2;
  Ffn ffn;
};

// Pre-norm residual block: Z1 = Z + Attn(LN(Z)), Z2 = Z1 + FFN(LN(Z1)).
Tensor block_forward(const Tensor& z, const GpsaBlock& block, const RelPosTable& table,
                     std::vector<Tensor>* maps = nullptr);
Tensor block_forward(const Tensor& z, const SaBlock& block, std::vector<Tensor>* maps = nullptr);

enum class AttentionMask { none, content_only, position_only };

/// ConViT: patch embedding, GPSA blocks over patches, class token joined
/// after the last GPSA block, SA blocks, then a linear head on the class
/// token. With zero GPSA layers this is the plain ViT/DeiT baseline.
class ConViTModel {
 public:
  explicit ConViTModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const PatchGrid& grid() const { return table_.grid(); }
  const RelPosTable& table() const { return table_; }

  Linear patch_embed;
  Tensor pos_embed;  // [L x D]; undefined when absolute embeddings are off
  Tensor cls_token;  // [1 x D]
  std::vector<GpsaBlock> gpsa_blocks;
  std::vector<SaBlock> sa_blocks;
  LayerNormParams norm;
  Linear head;

  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;

  // [C x H x W] image -> [L x D] patch embeddings.
  Tensor embed(const Tensor& image) const;
  // Logits of shape [num_classes]; fills `record` when given.
  Tensor forward(const Tensor& image, AttentionRecord* record = nullptr) const;

  void mask_abs_pos_embed(bool on) { pos_embed_masked_ = on; }
  bool abs_pos_embed_masked() const { return pos_embed_masked_; }
  // Overrides sigmoid(gate) in GPSA layers (all of them, or just `layer`).
  void mask_attention_mode(AttentionMask mode, std::optional<std::size_t> layer = std::nullopt);

 private:
  ModelConfig config_;
  RelPosTable table_;
  bool pos_embed_masked_ = false;
};

// Flattens the patch at grid cell (row, col) of a [C x H x W] image.
std::vector<double> extract_patch(const Tensor& image, std::size_t patch_size, std::size_t row,
                                  std::size_t col);

// Checkpoint directory: one binary tensor per parameter plus manifest.json.
void save_checkpoint(const ConViTModel& model, const std::string& dir, std::size_t step);
struct LoadedCheckpoint {
  ConViTModel model;
  std::size_t step = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace gpsa
