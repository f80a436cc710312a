#include "macfl/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "macfl/errors.hpp"

namespace macfl::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

/// gzFile reads plain files transparently, so one reader covers both cases.
class GzReader {
 public:
  explicit GzReader(const std::filesystem::path& path) : path_(path.string()) {
    file_ = gzopen(path_.c_str(), "rb");
    if (file_ == nullptr) throw IoError("cannot open " + path_);
  }
  ~GzReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(void* dst, std::size_t bytes) {
    auto* out = static_cast<unsigned char*>(dst);
    while (bytes > 0) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
      const int got = gzread(file_, out, chunk);
      if (got <= 0) throw IoError("truncated file " + path_);
      out += got;
      bytes -= static_cast<std::size_t>(got);
    }
  }

  std::uint32_t read_be32() {
    unsigned char b[4];
    read(b, 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
  }

 private:
  std::string path_;
  gzFile file_ = nullptr;
};

class Writer {
 public:
  Writer(const std::filesystem::path& path, bool gzip) : path_(path.string()) {
    file_ = gzopen(path_.c_str(), gzip ? "wb9" : "wbT");
    if (file_ == nullptr) throw IoError("cannot write " + path_);
  }
  ~Writer() {
    if (file_ != nullptr) gzclose(file_);
  }
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void write(const void* src, std::size_t bytes) {
    if (bytes == 0) return;
    if (gzwrite(file_, src, static_cast<unsigned>(bytes)) != static_cast<int>(bytes))
      throw IoError("write failed: " + path_);
  }
  void write_be32(std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    write(b, 4);
  }
  void close() {
    if (gzclose(file_) != Z_OK) throw IoError("close failed: " + path_);
    file_ = nullptr;
  }

 private:
  std::string path_;
  gzFile file_ = nullptr;
};

}  // namespace

void LabeledDataset::validate() const {
  if (n == 0) throw InvalidArgument("dataset must contain at least one sample");
  if (features.size() != n * dim || labels.size() != n)
    throw InvalidArgument("dataset feature/label sizes are inconsistent");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
      throw InvalidArgument("label out of range");
}

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  GzReader img(images);
  if (const auto magic = img.read_be32(); magic != kImageMagic)
    throw FormatError("bad IDX image magic in " + images.string());
  const std::uint32_t n_images = img.read_be32();
  const std::uint32_t rows = img.read_be32();
  const std::uint32_t cols = img.read_be32();

  GzReader lab(labels);
  if (const auto magic = lab.read_be32(); magic != kLabelMagic)
    throw FormatError("bad IDX label magic in " + labels.string());
  const std::uint32_t n_labels = lab.read_be32();
  if (n_images != n_labels)
    throw IntegrityError("image count " + std::to_string(n_images) + " != label count " +
                         std::to_string(n_labels));

  LabeledDataset ds;
  ds.n = n_images;
  ds.dim = std::size_t{rows} * cols;
  ds.image_dims = {rows, cols};
  std::vector<unsigned char> pixels(ds.n * ds.dim);
  img.read(pixels.data(), pixels.size());
  std::vector<unsigned char> raw_labels(ds.n);
  lab.read(raw_labels.data(), raw_labels.size());

  ds.features.resize(pixels.size());
  std::transform(pixels.begin(), pixels.end(), ds.features.begin(),
                 [](unsigned char p) { return static_cast<double>(p) / 255.0; });
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.n_classes = ds.n == 0 ? 0 : static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  ds.validate();
  return ds;
}

void write_idx(const LabeledDataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels, bool gzip) {
  ds.validate();
  // Images are always written as rank-3 IDX (n, rows, cols).
  std::vector<std::uint32_t> dims = ds.image_dims;
  if (dims.size() != 2) dims = {1u, static_cast<std::uint32_t>(ds.dim)};
  {
    Writer w(images, gzip);
    w.write_be32(kImageMagic);
    w.write_be32(static_cast<std::uint32_t>(ds.n));
    for (auto d : dims) w.write_be32(d);
    std::vector<unsigned char> pixels(ds.features.size());
    std::transform(ds.features.begin(), ds.features.end(), pixels.begin(), [](double x) {
      return static_cast<unsigned char>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
    });
    w.write(pixels.data(), pixels.size());
    w.close();
  }
  {
    Writer w(labels, gzip);
    w.write_be32(kLabelMagic);
    w.write_be32(static_cast<std::uint32_t>(ds.n));
    std::vector<unsigned char> raw(ds.labels.begin(), ds.labels.end());
    w.write(raw.data(), raw.size());
    w.close();
  }
}

LabeledDataset synth_gaussian_classes(std::size_t n, std::size_t dim, std::size_t n_classes,
                                      double separation, Rng& rng) {
  if (n_classes < 2) throw InvalidArgument("synthetic data needs at least 2 classes");
  if (n < n_classes) throw InvalidArgument("synthetic data needs n >= n_classes");
  if (dim < n_classes) throw InvalidArgument("synthetic data needs dim >= n_classes");
  if (!(separation > 0.0)) throw InvalidArgument("separation must be positive");

  LabeledDataset ds;
  ds.n = n;
  ds.dim = dim;
  ds.n_classes = n_classes;
  ds.image_dims = {1u, static_cast<std::uint32_t>(dim)};
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % n_classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  const double offset = separation / std::sqrt(2.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  ds.features.resize(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    double* x = ds.features.data() + i * dim;
    for (std::size_t j = 0; j < dim; ++j) x[j] = noise(rng);
    x[static_cast<std::size_t>(ds.labels[i])] += offset;
  }
  return ds;
}

LabeledDataset head(const LabeledDataset& ds, std::size_t count) {
  if (count == 0 || count >= ds.n) return ds;
  LabeledDataset out = ds;
  out.n = count;
  out.features.resize(count * ds.dim);
  out.labels.resize(count);
  return out;
}

std::vector<Shard> partition_iid(const LabeledDataset& ds, std::size_t n_users,
                                 std::size_t shard_size, Rng& rng) {
  if (n_users == 0 || shard_size == 0) throw InvalidArgument("need at least one user and one sample per shard");
  if (n_users * shard_size > ds.n)
    throw InvalidArgument("insufficient data: " + std::to_string(n_users) + " x " +
                          std::to_string(shard_size) + " > " + std::to_string(ds.n));
  std::vector<std::size_t> order(ds.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Shard> shards(n_users);
  for (std::size_t m = 0; m < n_users; ++m) {
    shards[m].owner = static_cast<int>(m);
    shards[m].indices.assign(order.begin() + static_cast<std::ptrdiff_t>(m * shard_size),
                             order.begin() + static_cast<std::ptrdiff_t>((m + 1) * shard_size));
  }
  return shards;
}

std::vector<Shard> partition_pathological(const LabeledDataset& ds, std::size_t n_users,
                                          std::size_t shard_size, std::size_t classes_per_user,
                                          Rng& rng) {
  if (classes_per_user == 0) throw InvalidArgument("classes_per_user must be >= 1");
  if (n_users == 0 || shard_size == 0) throw InvalidArgument("need at least one user and one sample per shard");
  if (shard_size % classes_per_user != 0)
    throw InvalidArgument("shard_size must be a multiple of classes_per_user");
  if (n_users * shard_size > ds.n) throw InvalidArgument("insufficient data for pathological partition");
  const std::size_t block = shard_size / classes_per_user;
  const std::size_t needed = n_users * classes_per_user;

  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < ds.n; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);

  // Round-robin over classes keeps class coverage as even as the data allows.
  std::vector<std::vector<std::size_t>> blocks;
  for (std::size_t round = 0; blocks.size() < needed; ++round) {
    bool any = false;
    for (std::size_t c = 0; c < by_class.size() && blocks.size() < needed; ++c) {
      if ((round + 1) * block > by_class[c].size()) continue;
      any = true;
      blocks.emplace_back(by_class[c].begin() + static_cast<std::ptrdiff_t>(round * block),
                          by_class[c].begin() + static_cast<std::ptrdiff_t>((round + 1) * block));
    }
    if (!any)
      throw InvalidArgument("insufficient per-class data: only " + std::to_string(blocks.size()) +
                            " single-label blocks of " + std::to_string(block) + " rows, need " +
                            std::to_string(needed));
  }
  std::shuffle(blocks.begin(), blocks.end(), rng);

  std::vector<Shard> shards(n_users);
  for (std::size_t m = 0; m < n_users; ++m) {
    shards[m].owner = static_cast<int>(m);
    for (std::size_t k = 0; k < classes_per_user; ++k) {
      const auto& b = blocks[m * classes_per_user + k];
      shards[m].indices.insert(shards[m].indices.end(), b.begin(), b.end());
    }
  }
  return shards;
}

std::vector<int> label_support(const LabeledDataset& ds, const Shard& shard) {
  std::set<int> labels;
  for (auto i : shard.indices) labels.insert(ds.labels[i]);
  return {labels.begin(), labels.end()};
}

MiniBatch sample_minibatch(const LabeledDataset& ds, const Shard& shard, std::size_t batch_size,
                           Rng& rng) {
  if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  if (shard.indices.empty()) throw InvalidArgument("cannot sample from an empty shard");
  std::uniform_int_distribution<std::size_t> pick(0, shard.indices.size() - 1);
  MiniBatch b;
  b.dim = ds.dim;
  b.features.resize(batch_size * ds.dim);
  b.labels.resize(batch_size);
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t i = shard.indices[pick(rng)];
    std::copy_n(ds.features.data() + i * ds.dim, ds.dim, b.features.data() + k * ds.dim);
    b.labels[k] = ds.labels[i];
  }
  return b;
}

MiniBatch gather(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  MiniBatch b;
  b.dim = ds.dim;
  b.features.resize(indices.size() * ds.dim);
  b.labels.resize(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= ds.n) throw InvalidArgument("row index out of range");
    std::copy_n(ds.features.data() + i * ds.dim, ds.dim, b.features.data() + k * ds.dim);
    b.labels[k] = ds.labels[i];
  }
  return b;
}

}  // namespace macfl::data
