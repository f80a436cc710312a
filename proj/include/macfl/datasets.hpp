#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "macfl/rng.hpp"

namespace macfl::data {

/// Non-owning view of b rows of a row-major feature matrix plus their labels.
struct BatchView {
  std::span<const double> features;
  std::span<const int> labels;
  std::size_t dim = 0;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return features.subspan(i * dim, dim); }
};

/// n x d features in [0,1] (for image data) and labels in [0, n_classes).
struct LabeledDataset {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::size_t n_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  /// Trailing IDX dimensions (e.g. {28, 28}); product equals dim.
  std::vector<std::uint32_t> image_dims;

  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  BatchView view() const { return {features, labels, dim}; }
  /// Checks the type invariants; throws InvalidArgument.
  void validate() const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Either file may be gzip-compressed. Pixels are scaled by 1/255.
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes features quantized as round(255 x) and labels as unsigned bytes.
void write_idx(const LabeledDataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels, bool gzip = false);

/// C isotropic unit-variance Gaussian blobs in R^d with means (separation/sqrt 2) e_c, so
/// any two means are `separation` apart. Labels are balanced (n/C each, remainder spread).
LabeledDataset synth_gaussian_classes(std::size_t n, std::size_t dim, std::size_t n_classes,
                                      double separation, Rng& rng);

/// The first `count` rows (or all, if count is 0 or >= n).
LabeledDataset head(const LabeledDataset& ds, std::size_t count);

/// One user's slice of a parent dataset.
struct Shard {
  int owner = 0;
  std::vector<std::size_t> indices;
  std::size_t size() const { return indices.size(); }
};

/// Disjoint uniform-random shards of exactly shard_size rows each.
std::vector<Shard> partition_iid(const LabeledDataset& ds, std::size_t n_users,
                                 std::size_t shard_size, Rng& rng);

/// Label-skewed shards: every class is cut into single-label blocks of
/// shard_size / classes_per_user rows, blocks are taken round-robin over classes
/// and dealt to users at random, classes_per_user blocks each. Every shard
/// therefore carries at most classes_per_user distinct labels.
std::vector<Shard> partition_pathological(const LabeledDataset& ds, std::size_t n_users,
                                          std::size_t shard_size, std::size_t classes_per_user,
                                          Rng& rng);

/// Distinct labels present in a shard, ascending.
std::vector<int> label_support(const LabeledDataset& ds, const Shard& shard);

/// Owned copy of b rows.
struct MiniBatch {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  BatchView view() const { return {features, labels, dim}; }
};

/// Draws batch_size rows uniformly with replacement from the shard.
MiniBatch sample_minibatch(const LabeledDataset& ds, const Shard& shard, std::size_t batch_size,
                           Rng& rng);

/// Copies the given rows (used for full-shard gradients and loss subsets).
MiniBatch gather(const LabeledDataset& ds, std::span<const std::size_t> indices);

}  // namespace macfl::data
