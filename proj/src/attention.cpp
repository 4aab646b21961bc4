#include "gpsa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gpsa/ops.hpp"

namespace gpsa {

std::pair<int, int> PatchGrid::offset(std::size_t i, std::size_t j) const {
  return {static_cast<int>(row_of(j)) - static_cast<int>(row_of(i)),
          static_cast<int>(col_of(j)) - static_cast<int>(col_of(i))};
}

double PatchGrid::diameter() const {
  const double dr = static_cast<double>(rows - 1), dc = static_cast<double>(cols - 1);
  return std::sqrt(dr * dr + dc * dc);
}

RelPosTable::RelPosTable(const PatchGrid& grid) : grid_(grid) {
  if (grid.rows == 0 || grid.cols == 0) throw ShapeError("patch grid must be non-empty");
  const auto n = grid.size();
  std::vector<double> data(n * n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto [dr, dc] = grid.offset(i, j);
      double* e = data.data() + (i * n + j) * 3;
      e[0] = dr * dr + dc * dc;
      e[1] = dr;
      e[2] = dc;
    }
  }
  table_ = Tensor({n * n, 3}, std::move(data));
}

std::array<double, 3> RelPosTable::at(std::size_t i, std::size_t j) const {
  const auto n = size();
  const double* e = table_.data().data() + (i * n + j) * 3;
  return {e[0], e[1], e[2]};
}

RelPosTable build_relpos_table(const PatchGrid& grid) { return RelPosTable(grid); }

std::vector<int> kernel_offsets(std::size_t k) {
  std::vector<int> out;
  const int half = static_cast<int>(k / 2);
  if (k % 2 == 1) {
    for (int v = -half; v <= half; ++v) out.push_back(v);
  } else {
    for (int v = -half; v <= half; ++v) {
      if (v != 0) out.push_back(v);
    }
  }
  return out;
}

std::optional<std::size_t> exact_sqrt(std::size_t n) {
  auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (k * k == n) return k;
  return std::nullopt;
}

double trunc_normal(Rng& rng, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double z = dist(rng);
    if (std::abs(z) <= 2.0) return z * std;
  }
}

Tensor trunc_normal_tensor(Shape shape, double std, Rng& rng) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = trunc_normal(rng, std);
  return Tensor(std::move(shape), std::move(data), true);
}

MultiHeadWeights init_multi_head(std::size_t num_heads, std::size_t head_dim, Rng& rng) {
  if (num_heads == 0 || head_dim == 0) throw ConfigError("attention needs heads and head_dim > 0");
  const auto d = num_heads * head_dim;
  MultiHeadWeights w;
  for (std::size_t h = 0; h < num_heads; ++h) {
    w.w_qry.push_back(trunc_normal_tensor({d, head_dim}, 0.02, rng));
    w.w_key.push_back(trunc_normal_tensor({d, head_dim}, 0.02, rng));
    w.w_val.push_back(trunc_normal_tensor({d, head_dim}, 0.02, rng));
  }
  w.w_out = trunc_normal_tensor({d, d}, 0.02, rng);
  w.b_out = Tensor::zeros({d}, true);
  return w;
}

Tensor content_attention(const Tensor& x, const Tensor& w_qry, const Tensor& w_key, bool scale) {
  if (x.cols() != w_qry.rows() || x.cols() != w_key.rows() || w_qry.cols() != w_key.cols()) {
    throw ShapeError("content_attention: X " + shape_str(x.shape()) + ", W_qry " +
                     shape_str(w_qry.shape()) + ", W_key " + shape_str(w_key.shape()));
  }
  auto logits = ops::matmul_bt(ops::matmul(x, w_qry), ops::matmul(x, w_key));
  if (scale) logits = ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(w_qry.cols())));
  return ops::softmax_rows(logits);
}

Tensor positional_scores(const Tensor& v_pos, const RelPosTable& table) {
  if (v_pos.numel() != 3) {
    throw ShapeError("positional_scores: v_pos must have 3 entries, got " +
                     shape_str(v_pos.shape()));
  }
  const auto n = table.size();
  auto flat = ops::matmul(table.as_tensor(), ops::reshape(v_pos, {3, 1}));
  return ops::reshape(flat, {n, n});
}

namespace {

void require_table_length(const Tensor& x, const RelPosTable& table, const char* op) {
  if (x.rows() != table.size()) {
    throw ContractError(std::string(op) + ": sequence length " + std::to_string(x.rows()) +
                        " does not match positional table of " +
                        std::to_string(table.size()) + " patches");
  }
}

Tensor content_logits(const Tensor& x, const MultiHeadWeights& w, std::size_t head, bool scale) {
  auto logits = ops::matmul_bt(ops::matmul(x, w.w_qry[head]), ops::matmul(x, w.w_key[head]));
  if (scale) logits = ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(w.head_dim())));
  return logits;
}

}  // namespace

Tensor psa_attention(const Tensor& x, const GpsaLayer& layer, std::size_t head,
                     const RelPosTable& table) {
  require_table_length(x, table, "psa_attention");
  auto logits = content_logits(x, layer.weights, head, layer.scale_content);
  return ops::softmax_rows(ops::add(logits, positional_scores(layer.pos[head].v_pos, table)));
}

Tensor gpsa_attention(const Tensor& x, const GpsaLayer& layer, std::size_t head,
                      const RelPosTable& table) {
  require_table_length(x, table, "gpsa_attention");
  auto content = ops::softmax_rows(content_logits(x, layer.weights, head, layer.scale_content));
  auto positional = ops::softmax_rows(positional_scores(layer.pos[head].v_pos, table));
  const Tensor weight = layer.gate_override ? Tensor::scalar(*layer.gate_override)
                                            : ops::sigmoid(layer.gate[head]);
  return ops::normalize_rows(ops::lerp(content, positional, weight));
}

Tensor multi_head_forward(const Tensor& x, const MultiHeadWeights& weights,
                          const std::vector<Tensor>& attention) {
  if (attention.size() != weights.num_heads()) {
    throw ShapeError("multi_head_forward: " + std::to_string(attention.size()) +
                     " attention maps for " + std::to_string(weights.num_heads()) + " heads");
  }
  if (x.cols() != weights.embed_dim()) {
    throw ShapeError("multi_head_forward: input " + shape_str(x.shape()) + " vs embed dim " +
                     std::to_string(weights.embed_dim()));
  }
  std::vector<Tensor> heads;
  heads.reserve(attention.size());
  for (std::size_t h = 0; h < attention.size(); ++h) {
    heads.push_back(ops::matmul(attention[h], ops::matmul(x, weights.w_val[h])));
  }
  return ops::add_bias(ops::matmul(ops::concat_cols(heads), weights.w_out), weights.b_out);
}

SaLayer::SaLayer(std::size_t num_heads, std::size_t head_dim, Rng& rng)
    : weights(init_multi_head(num_heads, head_dim, rng)) {}

std::vector<Tensor> SaLayer::attention(const Tensor& x) const {
  std::vector<Tensor> maps;
  for (std::size_t h = 0; h < num_heads(); ++h) {
    maps.push_back(content_attention(x, weights.w_qry[h], weights.w_key[h], scale_content));
  }
  return maps;
}

Tensor SaLayer::forward(const Tensor& x, std::vector<Tensor>* maps) const {
  auto attn = attention(x);
  auto out = multi_head_forward(x, weights, attn);
  if (maps) *maps = std::move(attn);
  return out;
}

GpsaLayer::GpsaLayer(std::size_t num_heads, std::size_t head_dim, Rng& rng)
    : weights(init_multi_head(num_heads, head_dim, rng)) {
  for (std::size_t h = 0; h < num_heads; ++h) {
    pos.push_back({trunc_normal_tensor({3}, 0.02, rng)});
    gate.push_back(Tensor::scalar(1.0, true));
  }
}

std::vector<Tensor> GpsaLayer::attention(const Tensor& x, const RelPosTable& table) const {
  std::vector<Tensor> maps;
  for (std::size_t h = 0; h < num_heads(); ++h) {
    maps.push_back(mode == PositionalMode::gated ? gpsa_attention(x, *this, h, table)
                                                 : psa_attention(x, *this, h, table));
  }
  return maps;
}

Tensor GpsaLayer::forward(const Tensor& x, const RelPosTable& table,
                          std::vector<Tensor>* maps) const {
  auto attn = attention(x, table);
  auto out = multi_head_forward(x, weights, attn);
  if (maps) *maps = std::move(attn);
  return out;
}

void conv_init(GpsaLayer& layer, const ConvInitOptions& options) {
  const auto k = exact_sqrt(layer.num_heads());
  if (!k) {
    throw ConfigError("conv init needs a perfect-square head count, got " +
                      std::to_string(layer.num_heads()));
  }
  if (!(options.locality_strength > 0.0)) {
    throw ConfigError("locality strength must be positive");
  }
  const auto offsets = kernel_offsets(*k);
  const double alpha = options.locality_strength;
  for (std::size_t h = 0; h < layer.num_heads(); ++h) {
    const double d1 = offsets[h / *k], d2 = offsets[h % *k];
    auto v = layer.pos[h].v_pos.mutable_data();
    v[0] = -alpha;
    v[1] = 2.0 * alpha * d1;
    v[2] = 2.0 * alpha * d2;
    layer.gate[h].mutable_data()[0] = options.strict ? kStrictGateLogit : 1.0;
  }
  if (!options.strict) return;
  const auto dh = layer.head_dim();
  for (std::size_t h = 0; h < layer.num_heads(); ++h) {
    auto& w = layer.weights;
    for (auto* t : {&w.w_qry[h], &w.w_key[h], &w.w_val[h]}) {
      auto data = t->mutable_data();
      std::fill(data.begin(), data.end(), 0.0);
    }
    auto val = w.w_val[h].mutable_data();
    for (std::size_t c = 0; c < dh; ++c) val[(h * dh + c) * dh + c] = 1.0;
  }
}

}  // namespace gpsa
