#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "macfl/datasets.hpp"
#include "macfl/errors.hpp"
#include "macfl/models.hpp"

using namespace macfl;
using namespace macfl::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "macfl_test_datasets";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t x) {
  return {static_cast<unsigned char>(x >> 24), static_cast<unsigned char>(x >> 16),
          static_cast<unsigned char>(x >> 8), static_cast<unsigned char>(x)};
}

// Features already on the 1/255 grid so the IDX round trip is exact.
LabeledDataset grid_dataset(std::size_t n, std::size_t rows, std::size_t cols) {
  LabeledDataset ds;
  ds.n = n;
  ds.dim = rows * cols;
  ds.image_dims = {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
  for (std::size_t i = 0; i < n * ds.dim; ++i) ds.features.push_back(static_cast<double>((i * 37) % 256) / 255.0);
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(i % 3));
  ds.n_classes = 3;
  return ds;
}

LabeledDataset synth(std::size_t n, std::size_t d, std::size_t C, std::uint64_t seed, double sep = 4.0) {
  auto rng = make_rng(seed, Stream::synthetic_train);
  return synth_gaussian_classes(n, d, C, sep, rng);
}

bool disjoint(const std::vector<Shard>& shards) {
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& s : shards) {
    total += s.size();
    seen.insert(s.indices.begin(), s.indices.end());
  }
  return seen.size() == total;
}

}  // namespace

TEST_CASE("MNIST subset files load with the expected shape") {
  const fs::path root = fs::path(MACFL_SOURCE_DIR) / "data" / "mnist-subset";
  const auto train = load_idx(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz");
  CHECK(train.n == 8000);
  CHECK(train.dim == 784);
  CHECK(train.n_classes == 10);
  const auto test = load_idx(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz");
  CHECK(test.n == 2000);
  for (double x : train.features) {
    REQUIRE(x >= 0.0);
    REQUIRE(x <= 1.0);
  }
}

TEST_CASE("IDX round trip is bit-identical, plain and gzip") {
  const auto ds = grid_dataset(17, 4, 5);
  for (bool gz : {false, true}) {
    const auto img = scratch(gz ? "rt-img.gz" : "rt-img"), lab = scratch(gz ? "rt-lab.gz" : "rt-lab");
    write_idx(ds, img, lab, gz);
    const auto back = load_idx(img, lab);
    CHECK(back.n == ds.n);
    CHECK(back.dim == ds.dim);
    CHECK(back.features == ds.features);
    CHECK(back.labels == ds.labels);
    CHECK(back.image_dims == ds.image_dims);
  }
}

TEST_CASE("IDX errors") {
  const auto ds = grid_dataset(5, 2, 2);
  const auto img = scratch("e-img"), lab = scratch("e-lab");
  write_idx(ds, img, lab);

  SUBCASE("label file carrying the image magic") {
    auto bad = be32(0x803);
    for (auto b : be32(5)) bad.push_back(b);
    for (int i = 0; i < 5; ++i) bad.push_back(0);
    write_bytes(scratch("bad-lab"), bad);
    CHECK_THROWS_AS(load_idx(img, scratch("bad-lab")), FormatError);
  }
  SUBCASE("count mismatch") {
    auto lab4 = be32(0x801);
    for (auto b : be32(4)) lab4.push_back(b);
    for (int i = 0; i < 4; ++i) lab4.push_back(1);
    write_bytes(scratch("lab4"), lab4);
    CHECK_THROWS_AS(load_idx(img, scratch("lab4")), IntegrityError);
  }
  SUBCASE("truncated images") {
    std::ifstream in(img, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
    bytes.resize(bytes.size() - 3);
    write_bytes(scratch("short-img"), bytes);
    CHECK_THROWS_AS(load_idx(scratch("short-img"), lab), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_idx(scratch("nope"), lab), IoError); }
}

TEST_CASE("synthetic blobs") {
  const auto a = synth(300, 12, 3, 5), b = synth(300, 12, 3, 5);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  std::vector<int> count(3, 0);
  for (int y : a.labels) ++count[static_cast<std::size_t>(y)];
  CHECK(count == std::vector<int>{100, 100, 100});

  auto rng = make_rng(1, Stream::synthetic_train);
  CHECK_THROWS_AS(synth_gaussian_classes(100, 5, 1, 1.0, rng), InvalidArgument);
  CHECK_THROWS_AS(synth_gaussian_classes(100, 5, 2, 0.0, rng), InvalidArgument);
}

TEST_CASE("wide-margin blobs are learnable by a softmax model in 200 SGD steps") {
  const auto ds = synth(100, 4, 2, 3, 10.0);
  models::ModelSpec spec{models::ModelKind::softmax, 4, 0, 2, 0.0};
  std::vector<double> w(spec.param_count(), 0.0);
  Shard all;
  for (std::size_t i = 0; i < ds.n; ++i) all.indices.push_back(i);
  auto rng = make_rng(3, Stream::user_batches);
  for (int step = 0; step < 200; ++step) {
    const auto batch = sample_minibatch(ds, all, 10, rng);
    const auto g = models::gradient(spec, w, batch.view());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.1 * g.values[i];
  }
  CHECK(models::evaluate(spec, w, ds, Execution::serial) >= 0.95);
}

TEST_CASE("partition_iid") {
  const auto ds = synth(30000, 10, 10, 8);
  auto rng = make_rng(1, Stream::partition);
  const auto shards = partition_iid(ds, 50, 600, rng);
  CHECK(shards.size() == 50);
  for (const auto& s : shards) CHECK(s.size() == 600);
  CHECK(disjoint(shards));

  const auto small = synth(40, 5, 2, 1);
  auto r1 = make_rng(2, Stream::partition);
  const auto one = partition_iid(small, 1, 40, r1);
  CHECK(std::set<std::size_t>(one[0].indices.begin(), one[0].indices.end()).size() == 40);
  CHECK_THROWS_AS(partition_iid(small, 3, 20, r1), InvalidArgument);
}

TEST_CASE("property: IID shard label histograms stay within 5 points of the global one") {
  const auto ds = synth(30000, 10, 10, 8);
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto rng = make_rng(seed, Stream::partition);
    for (const auto& s : partition_iid(ds, 50, 600, rng)) {
      std::vector<double> h(10, 0.0);
      for (auto i : s.indices) h[static_cast<std::size_t>(ds.labels[i])] += 1.0 / 600.0;
      for (double x : h) worst = std::max(worst, std::abs(x - 0.1));
    }
  }
  CHECK(worst <= 0.05);
}

TEST_CASE("partition_pathological") {
  const auto ds = synth(30000, 10, 10, 8);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto rng = make_rng(seed, Stream::partition);
    const auto shards = partition_pathological(ds, 50, 600, 2, rng);
    std::size_t total = 0;
    for (const auto& s : shards) {
      CHECK(s.size() == 600);
      CHECK(label_support(ds, s).size() <= 2);
      total += s.size();
    }
    CHECK(total == 30000);
    CHECK(disjoint(shards));
  }

  SUBCASE("classes_per_user = C gives broad supports") {
    auto rng = make_rng(4, Stream::partition);
    const auto shards = partition_pathological(ds, 20, 600, 10, rng);
    for (const auto& s : shards) CHECK(label_support(ds, s).size() >= 5);
  }
  SUBCASE("insufficient per-class data") {
    const auto skinny = synth(100, 10, 10, 2);
    auto rng = make_rng(4, Stream::partition);
    // 10 rows per class give two blocks of 4; twelve users need 24.
    CHECK_THROWS_AS(partition_pathological(skinny, 12, 8, 2, rng), InvalidArgument);
  }
}

TEST_CASE("determinism of shards and batches") {
  const auto ds = synth(2000, 6, 4, 3);
  auto a = make_rng(5, Stream::partition), b = make_rng(5, Stream::partition);
  const auto sa = partition_pathological(ds, 10, 100, 2, a);
  const auto sb = partition_pathological(ds, 10, 100, 2, b);
  for (std::size_t m = 0; m < sa.size(); ++m) CHECK(sa[m].indices == sb[m].indices);
  auto ra = make_rng(5, Stream::user_batches), rb = make_rng(5, Stream::user_batches);
  for (int k = 0; k < 20; ++k) {
    const auto x = sample_minibatch(ds, sa[3], 10, ra), y = sample_minibatch(ds, sb[3], 10, rb);
    CHECK(x.features == y.features);
    CHECK(x.labels == y.labels);
  }
}

TEST_CASE("sample_minibatch") {
  const auto ds = synth(200, 3, 2, 9);
  Shard s;
  for (std::size_t i = 0; i < 50; ++i) s.indices.push_back(i * 4);
  auto rng = make_rng(1, Stream::user_batches);
  CHECK(sample_minibatch(ds, s, 10, rng).size() == 10);

  Shard single;
  single.indices = {17};
  for (int k = 0; k < 5; ++k) {
    const auto b = sample_minibatch(ds, single, 1, rng);
    CHECK(b.labels[0] == ds.labels[17]);
    CHECK(std::equal(b.features.begin(), b.features.end(), ds.row(17).begin()));
  }
  CHECK_THROWS_AS(sample_minibatch(ds, Shard{}, 10, rng), InvalidArgument);
  CHECK_THROWS_AS(sample_minibatch(ds, s, 0, rng), InvalidArgument);
}

TEST_CASE("property: with-replacement draws are uniform over the shard") {
  LabeledDataset ds;
  ds.n = 20;
  ds.dim = 1;
  ds.n_classes = 20;
  for (int i = 0; i < 20; ++i) {
    ds.features.push_back(0.0);
    ds.labels.push_back(i);
  }
  Shard s;
  for (std::size_t i = 0; i < 20; ++i) s.indices.push_back(i);
  auto rng = make_rng(8, Stream::user_batches);
  std::vector<double> freq(20, 0.0);
  for (int k = 0; k < 100000; ++k)
    for (int y : sample_minibatch(ds, s, 10, rng).labels) freq[static_cast<std::size_t>(y)] += 1e-6;
  for (double f : freq) CHECK(std::abs(f - 0.05) <= 0.02 * 0.05);
}
