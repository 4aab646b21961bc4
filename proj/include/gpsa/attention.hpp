#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "gpsa/tensor.hpp"

namespace gpsa {

using Rng = std::mt19937_64;

/// Row-major grid of image patches.
struct PatchGrid {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  std::size_t row_of(std::size_t index) const { return index / cols; }
  std::size_t col_of(std::size_t index) const { return index % cols; }
  std::size_t index(std::size_t row, std::size_t col) const { return row * cols + col; }
  // (row_j - row_i, col_j - col_i)
  std::pair<int, int> offset(std::size_t i, std::size_t j) const;
  bool contains(long row, long col) const {
    return row >= 0 && col >= 0 && row < static_cast<long>(rows) && col < static_cast<long>(cols);
  }
  double diameter() const;
  bool operator==(const PatchGrid&) const = default;
};

/// Fixed relative-position encodings r_ij = (|d|^2, d_row, d_col) for every
/// patch pair. Never trained.
class RelPosTable {
 public:
  explicit RelPosTable(const PatchGrid& grid);

  const PatchGrid& grid() const { return grid_; }
  std::size_t size() const { return grid_.size(); }
  std::array<double, 3> at(std::size_t i, std::size_t j) const;
  // [L*L x 3], row i*L + j holds r_ij.
  const Tensor& as_tensor() const { return table_; }

 private:
  PatchGrid grid_;
  Tensor table_;
};

RelPosTable build_relpos_table(const PatchGrid& grid);

/// Per-head positional embedding v_pos in R^3.
struct HeadPosParams {
  Tensor v_pos;

  // Locality strength; meaningful while alpha() > 0.
  double alpha() const { return -v_pos[0]; }
  // Center of attention (row, col) offset.
  std::pair<double, double> center() const {
    return {v_pos[1] / (2.0 * alpha()), v_pos[2] / (2.0 * alpha())};
  }
};

// Centered kernel offsets used to place conv-init heads. Odd k gives
// -(k-1)/2..(k-1)/2; even k skips zero, e.g. k=2 -> {-1,1}, k=4 -> {-2,-1,1,2}.
std::vector<int> kernel_offsets(std::size_t k);

// Inverse of k*k; nullopt when n is not a perfect square.
std::optional<std::size_t> exact_sqrt(std::size_t n);

enum class PositionalMode { gated, vanilla };

// Weights shared by both layer kinds; per-head projection matrices are
// [D_emb x D_h], the output projection is [D_emb x D_emb].
struct MultiHeadWeights {
  std::vector<Tensor> w_qry;
  std::vector<Tensor> w_key;
  std::vector<Tensor> w_val;
  Tensor w_out;
  Tensor b_out;

  std::size_t num_heads() const { return w_qry.size(); }
  std::size_t head_dim() const { return w_qry.front().cols(); }
  std::size_t embed_dim() const { return w_out.rows(); }
};

// Truncated normal (cut at two standard deviations) used for all weights.
double trunc_normal(Rng& rng, double std);
Tensor trunc_normal_tensor(Shape shape, double std, Rng& rng);

MultiHeadWeights init_multi_head(std::size_t num_heads, std::size_t head_dim, Rng& rng);

/// Plain multi-head self-attention.
class SaLayer {
 public:
  SaLayer(std::size_t num_heads, std::size_t head_dim, Rng& rng);

  MultiHeadWeights weights;
  bool scale_content = true;

  std::size_t num_heads() const { return weights.num_heads(); }
  std::size_t head_dim() const { return weights.head_dim(); }
  std::size_t embed_dim() const { return weights.embed_dim(); }

  std::vector<Tensor> attention(const Tensor& x) const;
  // Runs the layer; `maps` receives each head's attention matrix when set.
  Tensor forward(const Tensor& x, std::vector<Tensor>* maps = nullptr) const;
};

/// Gated positional self-attention layer.
///
/// Every head mixes a content softmax with a positional softmax driven by
/// v_pos and the fixed RelPosTable; sigmoid(gate) weights the positional
/// side. In vanilla mode the two score maps are summed before one softmax
/// and the gate is unused.
class GpsaLayer {
 public:
  GpsaLayer(std::size_t num_heads, std::size_t head_dim, Rng& rng);

  MultiHeadWeights weights;
  std::vector<HeadPosParams> pos;
  std::vector<Tensor> gate;  // raw logits, one-element tensors
  bool scale_content = true;
  PositionalMode mode = PositionalMode::gated;
  // Eval-time override of sigmoid(gate) for every head (attention masking).
  std::optional<double> gate_override;

  std::size_t num_heads() const { return weights.num_heads(); }
  std::size_t head_dim() const { return weights.head_dim(); }
  std::size_t embed_dim() const { return weights.embed_dim(); }

  std::vector<Tensor> attention(const Tensor& x, const RelPosTable& table) const;
  Tensor forward(const Tensor& x, const RelPosTable& table,
                 std::vector<Tensor>* maps = nullptr) const;
};

// softmax(X Wq (X Wk)^T [/ sqrt(D_h)])
Tensor content_attention(const Tensor& x, const Tensor& w_qry, const Tensor& w_key, bool scale);
// scores[i][j] = v_pos . r_ij as an [L x L] matrix.
Tensor positional_scores(const Tensor& v_pos, const RelPosTable& table);
// Vanilla positional self-attention for one head of `layer`.
Tensor psa_attention(const Tensor& x, const GpsaLayer& layer, std::size_t head,
                     const RelPosTable& table);
// Gated positional self-attention for one head of `layer`.
Tensor gpsa_attention(const Tensor& x, const GpsaLayer& layer, std::size_t head,
                      const RelPosTable& table);
// concat_h(A^h X W_val^h) W_out + b_out
Tensor multi_head_forward(const Tensor& x, const MultiHeadWeights& weights,
                          const std::vector<Tensor>& attention);

struct ConvInitOptions {
  double locality_strength = 1.0;
  // Full convolutional configuration: W_qry = W_key = 0, W_val = identity
  // slice per head, and a saturated positional gate.
  bool strict = false;
};

void conv_init(GpsaLayer& layer, const ConvInitOptions& options);
// Gate logit written by strict conv init; sigmoid of it equals 1 in doubles.
inline constexpr double kStrictGateLogit = 40.0;

}  // namespace gpsa
