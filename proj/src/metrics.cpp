#include "gpsa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "gpsa/ops.hpp"

namespace gpsa {

Tensor strip_class_token(const Tensor& attention) {
  const auto n = attention.rows();
  if (n < 2 || attention.cols() != n) {
    throw ShapeError("strip_class_token: expected square map with a class token, got " +
                     shape_str(attention.shape()));
  }
  const auto m = n - 1;
  std::vector<double> out(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += (out[i * m + j] = attention.at(i + 1, j + 1));
    if (!(row > 0.0)) throw NumericError("strip_class_token: patch row has no mass");
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= row;
  }
  return Tensor({m, m}, std::move(out));
}

double nonlocality_head(const Tensor& attention, const PatchGrid& grid) {
  const auto n = grid.size();
  if (attention.rank() != 2 || attention.rows() != n || attention.cols() != n) {
    throw ShapeError("nonlocality: attention " + shape_str(attention.shape()) + " vs grid of " +
                     std::to_string(n) + " patches");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto [dr, dc] = grid.offset(i, j);
      total += attention.at(i, j) * std::sqrt(static_cast<double>(dr * dr + dc * dc));
    }
  }
  return total / static_cast<double>(n);
}

namespace {

Tensor patch_map(const LayerAttention& layer, std::size_t head) {
  const auto& a = layer.heads.at(head);
  return layer.has_class_token ? strip_class_token(a) : a;
}

}  // namespace

double nonlocality_layer(const AttentionRecord& record, std::size_t layer) {
  if (layer >= record.layers.size()) {
    throw ContractError("layer " + std::to_string(layer) + " not in attention record");
  }
  const auto& l = record.layers[layer];
  double total = 0.0;
  for (std::size_t h = 0; h < l.heads.size(); ++h) total += nonlocality_head(patch_map(l, h), record.grid);
  return total / static_cast<double>(l.heads.size());
}

NonlocalityReport nonlocality_report(const AttentionRecord& record) {
  NonlocalityReport report;
  for (const auto& l : record.layers) {
    std::vector<double> heads;
    for (std::size_t h = 0; h < l.heads.size(); ++h) {
      heads.push_back(nonlocality_head(patch_map(l, h), record.grid));
    }
    double mean = 0.0;
    for (double v : heads) mean += v;
    report.per_layer.push_back(mean / static_cast<double>(heads.size()));
    report.per_head.push_back(std::move(heads));
  }
  return report;
}

NonlocalityReport nonlocality_over_batch(const ConViTModel& model,
                                         const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("nonlocality batch is empty");
  NonlocalityReport total;
  for (const auto& image : images) {
    AttentionRecord record;
    model.forward(image, &record);
    auto r = nonlocality_report(record);
    if (total.per_layer.empty()) {
      total = std::move(r);
      continue;
    }
    for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
      total.per_layer[l] += r.per_layer[l];
      for (std::size_t h = 0; h < r.per_head[l].size(); ++h) total.per_head[l][h] += r.per_head[l][h];
    }
  }
  const double n = static_cast<double>(images.size());
  for (auto& v : total.per_layer) v /= n;
  for (auto& heads : total.per_head) {
    for (auto& v : heads) v /= n;
  }
  total.batch_averaged = images.size() > 1;
  total.num_images = images.size();
  return total;
}

void write_nonlocality_csv(std::ostream& out, const NonlocalityReport& report, std::size_t epoch,
                           bool header) {
  if (header) out << "epoch,layer,head,d_loc\n";
  out << std::setprecision(17);
  for (std::size_t l = 0; l < report.per_layer.size(); ++l) {
    for (std::size_t h = 0; h < report.per_head[l].size(); ++h) {
      out << epoch << ',' << l << ',' << h << ',' << report.per_head[l][h] << '\n';
    }
    out << epoch << ',' << l << ",mean," << report.per_layer[l] << '\n';
  }
}

std::vector<LayerGating> gating_summary(const ConViTModel& model) {
  if (model.gpsa_blocks.empty()) throw ContractError("gating summary needs GPSA layers");
  std::vector<LayerGating> out;
  for (std::size_t l = 0; l < model.gpsa_blocks.size(); ++l) {
    LayerGating g{l, {}, 0.0};
    for (const auto& gate : model.gpsa_blocks[l].attn.gate) {
      g.heads.push_back(ops::sigmoid_value(gate[0]));
      g.mean += g.heads.back();
    }
    g.mean /= static_cast<double>(g.heads.size());
    out.push_back(std::move(g));
  }
  return out;
}

void write_gating_csv(std::ostream& out, const std::vector<LayerGating>& summary) {
  out << "layer,head,sigma_lambda\n" << std::setprecision(17);
  for (const auto& g : summary) {
    for (std::size_t h = 0; h < g.heads.size(); ++h) out << g.layer << ',' << h << ',' << g.heads[h] << '\n';
    out << g.layer << ",mean," << g.mean << '\n';
  }
}

GrayImage attention_map_image(const AttentionRecord& record, std::size_t layer, std::size_t head,
                              std::size_t query) {
  if (layer >= record.layers.size()) throw ContractError("layer index out of range");
  const auto& l = record.layers[layer];
  if (head >= l.heads.size()) throw ContractError("head index out of range");
  const auto map = patch_map(l, head);
  const auto n = record.grid.size();
  if (query >= n) throw ContractError("query index out of range");

  std::vector<double> logs(n);
  for (std::size_t j = 0; j < n; ++j) logs[j] = std::log(std::max(map.at(query, j), kAttentionLogFloor));
  const auto [lo, hi] = std::minmax_element(logs.begin(), logs.end());
  const double span = *hi - *lo;
  GrayImage img{record.grid.cols, record.grid.rows, std::vector<unsigned char>(n)};
  for (std::size_t j = 0; j < n; ++j) {
    img.pixels[j] = span > 0.0 ? static_cast<unsigned char>(std::lround(255.0 * (logs[j] - *lo) / span))
                               : 255;
  }
  return img;
}

void export_attention_map(const AttentionRecord& record, std::size_t layer, std::size_t head,
                          std::size_t query, const std::string& path) {
  write_pgm(path, attention_map_image(record, layer, head, query));
}

void write_pgm(const std::string& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path);
}

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  GrayImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw ParseError(path + ": not an 8-bit P5 PGM");
  in.get();
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw ParseError(path + ": truncated PGM payload");
  return img;
}

}  // namespace gpsa
