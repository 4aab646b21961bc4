#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "gpsa/attention_record.hpp"
#include "gpsa/model.hpp"

namespace gpsa {

// Drops the class-token row and column (index 0) and renormalizes rows.
Tensor strip_class_token(const Tensor& attention);

// (1/L) sum_ij A_ij |delta_ij|, Euclidean distance in patch units.
double nonlocality_head(const Tensor& attention, const PatchGrid& grid);
// Mean of nonlocality_head over the heads of one recorded layer.
double nonlocality_layer(const AttentionRecord& record, std::size_t layer);

struct NonlocalityReport {
  std::vector<double> per_layer;               // D_loc per layer
  std::vector<std::vector<double>> per_head;   // [layer][head]
  bool batch_averaged = false;
  std::size_t num_images = 1;
};

NonlocalityReport nonlocality_report(const AttentionRecord& record);
// Averages the report over one forward pass per image.
NonlocalityReport nonlocality_over_batch(const ConViTModel& model,
                                         const std::vector<Tensor>& images);
// CSV {epoch, layer, head, d_loc}; head is "mean" for the layer average.
void write_nonlocality_csv(std::ostream& out, const NonlocalityReport& report, std::size_t epoch,
                           bool header = true);

struct LayerGating {
  std::size_t layer = 0;
  std::vector<double> heads;  // sigmoid(lambda_h)
  double mean = 0.0;
};

std::vector<LayerGating> gating_summary(const ConViTModel& model);
void write_gating_csv(std::ostream& out, const std::vector<LayerGating>& summary);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};

// Log-scaled 8-bit rendering of one query row reshaped onto the grid.
GrayImage attention_map_image(const AttentionRecord& record, std::size_t layer, std::size_t head,
                              std::size_t query);
void export_attention_map(const AttentionRecord& record, std::size_t layer, std::size_t head,
                          std::size_t query, const std::string& path);
void write_pgm(const std::string& path, const GrayImage& image);
GrayImage read_pgm(const std::string& path);

inline constexpr double kAttentionLogFloor = 1e-12;

}  // namespace gpsa
