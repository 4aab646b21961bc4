#include "gpsa/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

namespace gpsa {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::string& path) {
  if (offset + 4 > buf.size()) {
    throw ParseError(path + ": truncated header at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void require_payload(const std::vector<unsigned char>& buf, std::size_t offset,
                     std::size_t need, const std::string& path) {
  if (buf.size() < offset + need) {
    throw ParseError(path + ": truncated payload at byte offset " + std::to_string(buf.size()) +
                     " (expected " + std::to_string(offset + need) + " bytes)");
  }
}

// Fisher-Yates with raw engine output so the permutation does not depend on
// the standard library's distribution implementations.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double gaussian(std::mt19937_64& rng) {
  // Box-Muller, deterministic across standard libraries.
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

Tensor LabeledImageSet::image(std::size_t index) const {
  if (index >= size()) throw ContractError("image index " + std::to_string(index) + " out of range");
  const auto n = image_numel();
  const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(index * n);
  return Tensor({channels, height, width}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

std::vector<std::size_t> LabeledImageSet::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

LabeledImageSet LabeledImageSet::select(const std::vector<std::size_t>& indices) const {
  LabeledImageSet out = *this;
  out.pixels.clear();
  out.labels.clear();
  const auto n = image_numel();
  for (auto i : indices) {
    const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * n);
    out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(n));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

void LabeledImageSet::validate() const {
  if (labels.empty()) throw ContractError("dataset is empty");
  if (pixels.size() != labels.size() * image_numel()) {
    throw ContractError("dataset pixel count does not match label count");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ContractError("label " + std::to_string(l) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
}

NormalizationStats fit_normalization(const LabeledImageSet& set) {
  NormalizationStats stats{std::vector<double>(set.channels, 0.0),
                           std::vector<double>(set.channels, 0.0)};
  const auto hw = set.height * set.width;
  const double count = static_cast<double>(set.size() * hw);
  for (std::size_t c = 0; c < set.channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double* p = set.pixels.data() + i * set.image_numel() + c * hw;
      for (std::size_t k = 0; k < hw; ++k) sum += p[k];
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double* p = set.pixels.data() + i * set.image_numel() + c * hw;
      for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - mu) * (p[k] - mu);
    }
    stats.mean[c] = mu;
    stats.std[c] = std::max(std::sqrt(sq / count), 1e-12);
  }
  return stats;
}

void normalize(LabeledImageSet& set, const NormalizationStats& stats) {
  if (stats.mean.size() != set.channels || stats.std.size() != set.channels) {
    throw ContractError("normalization stats do not match channel count");
  }
  const auto hw = set.height * set.width;
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t c = 0; c < set.channels; ++c) {
      double* p = set.pixels.data() + i * set.image_numel() + c * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] = (p[k] - stats.mean[c]) / stats.std[c];
    }
  }
  set.stats = stats;
}

LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path,
                         Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != 0x00000803) {
    throw ParseError(images_path + ": bad IDX image magic at byte offset 0");
  }
  if (read_be32(lab, 0, labels_path) != 0x00000801) {
    throw ParseError(labels_path + ": bad IDX label magic at byte offset 0");
  }
  const auto n = read_be32(img, 4, images_path);
  const auto rows = read_be32(img, 8, images_path);
  const auto cols = read_be32(img, 12, images_path);
  const auto nl = read_be32(lab, 4, labels_path);
  if (n != nl) {
    throw ParseError("IDX image count " + std::to_string(n) + " != label count " +
                     std::to_string(nl));
  }
  if (n == 0 || rows == 0 || cols == 0) throw ParseError(images_path + ": empty IDX dimensions");
  const std::size_t per = std::size_t{rows} * cols;
  require_payload(img, 16, n * per, images_path);
  require_payload(lab, 8, n, labels_path);

  LabeledImageSet set;
  set.channels = 1;
  set.height = rows;
  set.width = cols;
  set.split = split;
  set.pixels.resize(n * per);
  for (std::size_t i = 0; i < n * per; ++i) set.pixels[i] = img[16 + i] / 255.0;
  set.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    set.labels[i] = lab[8 + i];
    max_label = std::max(max_label, set.labels[i]);
  }
  set.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  return set;
}

LabeledImageSet load_cifar_binary(const std::string& path, Split split) {
  return load_cifar_binary(std::vector<std::string>{path}, split);
}

LabeledImageSet load_cifar_binary(const std::vector<std::string>& paths, Split split) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = kPixels + 1;
  LabeledImageSet set;
  set.channels = 3;
  set.height = 32;
  set.width = 32;
  set.num_classes = 10;
  set.split = split;
  for (const auto& path : paths) {
    const auto buf = read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0) {
      throw ParseError(path + ": size " + std::to_string(buf.size()) +
                       " is not a positive multiple of 3073");
    }
    for (std::size_t off = 0; off < buf.size(); off += kRecord) {
      if (buf[off] >= 10) {
        throw ParseError(path + ": label " + std::to_string(buf[off]) + " at byte offset " +
                         std::to_string(off) + " exceeds 9");
      }
      set.labels.push_back(buf[off]);
      for (std::size_t k = 0; k < kPixels; ++k) set.pixels.push_back(buf[off + 1 + k] / 255.0);
    }
  }
  return set;
}

DatasetPair load_cifar10(const std::string& root) {
  const auto dir = fs::path(root) / "cifar-10-batches-bin";
  std::vector<std::string> train_files;
  for (int i = 1; i <= 5; ++i) {
    train_files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
  }
  DatasetPair pair{load_cifar_binary(train_files, Split::train),
                   load_cifar_binary((dir / "test_batch.bin").string(), Split::test)};
  const auto stats = fit_normalization(pair.train);
  normalize(pair.train, stats);
  normalize(pair.test, stats);
  return pair;
}

DatasetPair load_mnist(const std::string& root) {
  const fs::path dir(root);
  DatasetPair pair{load_idx((dir / "train-images-idx3-ubyte").string(),
                            (dir / "train-labels-idx1-ubyte").string(), Split::train),
                   load_idx((dir / "t10k-images-idx3-ubyte").string(),
                            (dir / "t10k-labels-idx1-ubyte").string(), Split::test)};
  const auto stats = fit_normalization(pair.train);
  normalize(pair.train, stats);
  normalize(pair.test, stats);
  return pair;
}

std::string data_root_from_env() {
  const char* root = std::getenv("GPSA_DATA_ROOT");
  return root ? std::string(root) : std::string();
}

std::size_t SubsampleSpec::epoch_multiplier() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(1.0 / fraction)));
}

void SubsampleSpec::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subsample fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
}

std::vector<std::size_t> subsample_indices(const LabeledImageSet& set, const SubsampleSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> by_class(set.num_classes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    by_class.at(static_cast<std::size_t>(set.labels[i])).push_back(i);
  }
  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    // One stream per class keeps each class's order independent of the others.
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + c);
    shuffle(members, rng);
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(members.size()))));
    kept.insert(kept.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

LabeledImageSet subsample(const LabeledImageSet& set, const SubsampleSpec& spec) {
  spec.validate();
  if (set.split == Split::test || spec.fraction == 1.0) return set;
  return set.select(subsample_indices(set, spec));
}

LabeledImageSet synthetic_blobs(const SyntheticSpec& spec, Split split) {
  if (spec.num_classes == 0 || spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0) {
    throw ConfigError("synthetic dataset dimensions must be positive");
  }
  struct Blob {
    double row, col, amplitude;
    std::size_t channel;
  };
  std::mt19937_64 proto_rng(spec.seed);
  const double side = static_cast<double>(spec.image_size);
  std::vector<std::vector<Blob>> prototypes(spec.num_classes);
  for (auto& blobs : prototypes) {
    for (std::size_t b = 0; b < spec.blobs_per_class; ++b) {
      blobs.push_back({uniform01(proto_rng) * (side - 1.0), uniform01(proto_rng) * (side - 1.0),
                       0.5 + uniform01(proto_rng), static_cast<std::size_t>(proto_rng() % spec.channels)});
    }
  }

  std::mt19937_64 rng(spec.seed ^ (split == Split::train ? 0x5EEDULL : 0x7E57ULL) << 32);
  LabeledImageSet set;
  set.channels = spec.channels;
  set.height = set.width = spec.image_size;
  set.num_classes = spec.num_classes;
  set.split = split;
  const auto hw = spec.image_size * spec.image_size;
  const auto jitter_span = 2 * spec.jitter + 1;
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      std::vector<double> img(spec.channels * hw);
      for (auto& v : img) v = spec.noise * gaussian(rng);
      for (const auto& blob : prototypes[c]) {
        const double r0 = blob.row + static_cast<double>(rng() % jitter_span) - static_cast<double>(spec.jitter);
        const double c0 = blob.col + static_cast<double>(rng() % jitter_span) - static_cast<double>(spec.jitter);
        for (std::size_t y = 0; y < spec.image_size; ++y) {
          for (std::size_t x = 0; x < spec.image_size; ++x) {
            const double dy = static_cast<double>(y) - r0, dx = static_cast<double>(x) - c0;
            img[blob.channel * hw + y * spec.image_size + x] +=
                blob.amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * spec.blob_sigma * spec.blob_sigma));
          }
        }
      }
      set.pixels.insert(set.pixels.end(), img.begin(), img.end());
      set.labels.push_back(static_cast<int>(c));
    }
  }
  return set;
}

DatasetPair synthetic_pair(const SyntheticSpec& spec, std::size_t test_per_class) {
  auto test_spec = spec;
  test_spec.per_class = test_per_class;
  DatasetPair pair{synthetic_blobs(spec, Split::train), synthetic_blobs(test_spec, Split::test)};
  const auto stats = fit_normalization(pair.train);
  normalize(pair.train, stats);
  normalize(pair.test, stats);
  return pair;
}

}  // namespace gpsa
