#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gpsa/tensor.hpp"

namespace gpsa {

enum class Split { train, test };

struct NormalizationStats {
  std::vector<double> mean;  // per channel
  std::vector<double> std;
};

/// Images stored as one contiguous N x C x H x W block of doubles.
struct LabeledImageSet {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<double> pixels;
  std::vector<int> labels;
  Split split = Split::train;
  // Set once normalize() has been applied.
  NormalizationStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * height * width; }
  Tensor image(std::size_t index) const;
  std::vector<std::size_t> class_counts() const;
  LabeledImageSet select(const std::vector<std::size_t>& indices) const;
  // Throws ContractError on empty sets or out-of-range labels.
  void validate() const;
};

NormalizationStats fit_normalization(const LabeledImageSet& set);
// Applies (x - mean) / std per channel and records the stats.
void normalize(LabeledImageSet& set, const NormalizationStats& stats);

// IDX (MNIST-style) image + label files. Pixels scaled to [0, 1].
LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path,
                         Split split = Split::train);
// CIFAR binary batch: 1 label byte + 3072 CHW pixel bytes per record.
LabeledImageSet load_cifar_binary(const std::string& path, Split split = Split::train);
LabeledImageSet load_cifar_binary(const std::vector<std::string>& paths, Split split);

struct DatasetPair {
  LabeledImageSet train;
  LabeledImageSet test;
};

// Standard layouts under `root`: cifar-10-batches-bin/ and MNIST's four
// *-ubyte files. Both splits are normalized with train statistics.
DatasetPair load_cifar10(const std::string& root);
DatasetPair load_mnist(const std::string& root);
// Dataset root from GPSA_DATA_ROOT, or empty.
std::string data_root_from_env();

struct SubsampleSpec {
  double fraction = 1.0;
  std::uint64_t seed = 0;

  std::size_t epoch_multiplier() const;
  void validate() const;
};

// Indices kept by a class-stratified subsample. Nested across fractions for
// a fixed seed.
std::vector<std::size_t> subsample_indices(const LabeledImageSet& set, const SubsampleSpec& spec);
// Test splits are returned unchanged.
LabeledImageSet subsample(const LabeledImageSet& set, const SubsampleSpec& spec);

struct SyntheticSpec {
  std::size_t num_classes = 3;
  std::size_t per_class = 256;
  std::size_t image_size = 8;
  std::size_t channels = 1;
  std::size_t blobs_per_class = 2;
  double blob_sigma = 1.0;
  // Pixel jitter applied to each blob's center per sample.
  std::size_t jitter = 1;
  double noise = 0.3;
  std::uint64_t seed = 0;
};

// Class-conditional Gaussian-blob images. Class prototypes depend only on
// `seed`, so train and test splits share them. Not normalized.
LabeledImageSet synthetic_blobs(const SyntheticSpec& spec, Split split = Split::train);
// Train and test splits normalized with train statistics.
DatasetPair synthetic_pair(const SyntheticSpec& spec, std::size_t test_per_class);

}  // namespace gpsa
