#include "macfl/models.hpp"


#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>

#include "macfl/errors.hpp"

namespace macfl::models {

namespace {

constexpr std::size_t kEvalBlock = 256;
constexpr std::array<char, 8> kCheckpointMagic = {'M', 'A', 'C', 'F', 'L', 'P', 'V', '1'};

void check_dims(const ModelSpec& spec, std::span<const double> params, const data::BatchView& b) {
  if (params.size() != spec.param_count())
    throw InvalidArgument("parameter vector length " + std::to_string(params.size()) +
                          " does not match model (" + std::to_string(spec.param_count()) + ")");
  if (b.dim != spec.input_dim)
    throw InvalidArgument("batch feature dimension " + std::to_string(b.dim) +
                          " does not match model input " + std::to_string(spec.input_dim));
  if (b.features.size() != b.size() * b.dim) throw InvalidArgument("batch block has wrong size");
  for (int y : b.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= spec.n_classes)
      throw InvalidArgument("label out of range for model");
}

// z = W x + b for a row-major W (rows x cols).
void affine(const double* w, const double* b, std::size_t rows, std::size_t cols, const double* x,
            double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc + b[r];
  }
}

// log-sum-exp minus the target logit; probabilities written to p.
double softmax_xent(const double* z, std::size_t n, int y, double* p) {
  const double m = *std::max_element(z, z + n);
  double sum = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    p[c] = std::exp(z[c] - m);
    sum += p[c];
  }
  for (std::size_t c = 0; c < n; ++c) p[c] /= sum;
  return (m + std::log(sum)) - z[static_cast<std::size_t>(y)];
}

struct Forward {
  std::vector<double> hidden;  // mlp only
  std::vector<double> z;
};

void forward(const ModelSpec& spec, const double* w, const double* x, Forward& f) {
  const std::size_t d = spec.input_dim, c = spec.n_classes;
  f.z.resize(c);
  if (spec.kind == ModelKind::softmax) {
    affine(w, w + c * d, c, d, x, f.z.data());
    return;
  }
  const std::size_t h = spec.hidden_dim;
  f.hidden.resize(h);
  affine(w, w + h * d, h, d, x, f.hidden.data());
  for (auto& v : f.hidden) v = std::tanh(v);
  const double* w2 = w + h * d + h;
  affine(w2, w2 + c * h, c, h, f.hidden.data(), f.z.data());
}

}  // namespace

std::string to_string(ModelKind kind) { return kind == ModelKind::softmax ? "softmax" : "mlp"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "softmax") return ModelKind::softmax;
  if (s == "mlp") return ModelKind::mlp;
  throw InvalidArgument("unknown model kind '" + s + "'");
}

std::size_t ModelSpec::param_count() const {
  if (kind == ModelKind::softmax) return n_classes * input_dim + n_classes;
  return hidden_dim * input_dim + hidden_dim + n_classes * hidden_dim + n_classes;
}

std::uint64_t ModelSpec::layout_hash() const {
  // FNV-1a over the fields that determine the parameter layout
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  mix(kind == ModelKind::softmax ? 1 : 2);
  mix(input_dim);
  mix(kind == ModelKind::mlp ? hidden_dim : 0);
  mix(n_classes);
  return h;
}

void ModelSpec::validate() const {
  if (input_dim == 0 || n_classes == 0 || (kind == ModelKind::mlp && hidden_dim == 0))
    throw InvalidArgument("model dimensions must be positive");
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale))
    throw InvalidArgument("init_scale must be finite and non-negative");
}

bool ParamVector::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

ParamVector init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  ParamVector w(spec.param_count(), 0.0);
  if (spec.init_scale == 0.0) return w;
  std::normal_distribution<double> gauss(0.0, spec.init_scale);
  const std::size_t d = spec.input_dim, c = spec.n_classes, h = spec.hidden_dim;
  auto fill = [&](std::size_t offset, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) w[offset + i] = gauss(rng);
  };
  if (spec.kind == ModelKind::softmax) {
    fill(0, c * d);
  } else {
    fill(0, h * d);
    fill(h * d + h, c * h);
  }
  return w;
}

std::vector<double> logits(const ModelSpec& spec, std::span<const double> params,
                           std::span<const double> x) {
  if (x.size() != spec.input_dim || params.size() != spec.param_count())
    throw InvalidArgument("logits: dimension mismatch");
  Forward f;
  forward(spec, params.data(), x.data(), f);
  return f.z;
}

std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) sum += p[c] = std::exp(z[c] - m);
  for (auto& v : p) v /= sum;
  return p;
}

int predict(const ModelSpec& spec, std::span<const double> params, std::span<const double> x) {
  const auto z = logits(spec, params, x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

double loss(const ModelSpec& spec, std::span<const double> params, const data::BatchView& batch) {
  check_dims(spec, params, batch);
  if (batch.size() == 0) throw InvalidArgument("loss of an empty batch");
  Forward f;
  std::vector<double> p(spec.n_classes);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    forward(spec, params.data(), batch.row(i).data(), f);
    total += softmax_xent(f.z.data(), spec.n_classes, batch.labels[i], p.data());
  }
  return total / static_cast<double>(batch.size());
}

GradEstimate gradient(const ModelSpec& spec, std::span<const double> params,
                      const data::BatchView& batch) {
  check_dims(spec, params, batch);
  const std::size_t b = batch.size();
  if (b == 0) throw InvalidArgument("gradient of an empty batch");
  const std::size_t d = spec.input_dim, c = spec.n_classes, h = spec.hidden_dim;
  const double inv_b = 1.0 / static_cast<double>(b);

  GradEstimate g;
  g.values.assign(spec.param_count(), 0.0);
  Forward f;
  std::vector<double> p(c), dh(h);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* x = batch.row(i).data();
    const int y = batch.labels[i];
    forward(spec, params.data(), x, f);
    total += softmax_xent(f.z.data(), c, y, p.data());
    p[static_cast<std::size_t>(y)] -= 1.0;  // dL/dz

    if (spec.kind == ModelKind::softmax) {
      double* gw = g.values.data();
      double* gb = gw + c * d;
      for (std::size_t k = 0; k < c; ++k) {
        const double dz = p[k] * inv_b;
        double* row = gw + k * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += dz * x[j];
        gb[k] += dz;
      }
      continue;
    }

    double* gw1 = g.values.data();
    double* gb1 = gw1 + h * d;
    double* gw2 = gb1 + h;
    double* gb2 = gw2 + c * h;
    const double* w2 = params.data() + h * d + h;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      const double dz = p[k] * inv_b;
      double* row = gw2 + k * h;
      const double* wrow = w2 + k * h;
      for (std::size_t j = 0; j < h; ++j) {
        row[j] += dz * f.hidden[j];
        dh[j] += wrow[j] * dz;
      }
      gb2[k] += dz;
    }
    for (std::size_t j = 0; j < h; ++j) {
      const double da = dh[j] * (1.0 - f.hidden[j] * f.hidden[j]);
      double* row = gw1 + j * d;
      for (std::size_t q = 0; q < d; ++q) row[q] += da * x[q];
      gb1[j] += da;
    }
  }
  g.batch_loss = total * inv_b;
  return g;
}

GradientFn gradient_fn(const ModelSpec& spec) {
  return [spec](std::span<const double> w, const data::BatchView& b) { return gradient(spec, w, b); };
}

GradEstimate meta_gradient(const GradientFn& grad, std::span<const double> params,
                           const data::BatchView& batch_a, const data::BatchView& batch_b,
                           double rho) {
  if (!(rho >= 0.0)) throw InvalidArgument("rho must be >= 0");
  if (rho == 0.0) return grad(params, batch_b);
  const GradEstimate inner = grad(params, batch_a);
  std::vector<double> shifted(params.begin(), params.end());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= rho * inner.values[i];
  return grad(shifted, batch_b);
}

GradEstimate meta_gradient(const ModelSpec& spec, std::span<const double> params,
                           const data::BatchView& batch_a, const data::BatchView& batch_b,
                           double rho) {
  return meta_gradient(gradient_fn(spec), params, batch_a, batch_b, rho);
}

EvalResult evaluate_full(const ModelSpec& spec, std::span<const double> params,
                         const data::BatchView& rows, Execution exec) {
  check_dims(spec, params, rows);
  const std::size_t n = rows.size();
  if (n == 0) throw InvalidArgument("cannot evaluate on an empty dataset");
  const std::size_t n_blocks = (n + kEvalBlock - 1) / kEvalBlock;
  std::vector<long> correct(n_blocks, 0);
  std::vector<double> loss_sum(n_blocks, 0.0);

  auto run_block = [&](std::size_t blk) {
    Forward f;
    std::vector<double> p(spec.n_classes);
    const std::size_t end = std::min(n, (blk + 1) * kEvalBlock);
    long hits = 0;
    double acc = 0.0;
    for (std::size_t i = blk * kEvalBlock; i < end; ++i) {
      forward(spec, params.data(), rows.row(i).data(), f);
      const int y = rows.labels[i];
      acc += softmax_xent(f.z.data(), spec.n_classes, y, p.data());
      const auto best = std::max_element(f.z.begin(), f.z.end()) - f.z.begin();
      hits += best == y ? 1 : 0;
    }
    correct[blk] = hits;
    loss_sum[blk] = acc;
  };

  if (exec == Execution::parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(n_blocks); ++blk)
      run_block(static_cast<std::size_t>(blk));
  } else {
    for (std::size_t blk = 0; blk < n_blocks; ++blk) run_block(blk);
  }

  long hits = 0;
  double total = 0.0;
  for (std::size_t blk = 0; blk < n_blocks; ++blk) {
    hits += correct[blk];
    total += loss_sum[blk];
  }
  return {static_cast<double>(hits) / static_cast<double>(n), total / static_cast<double>(n)};
}

double evaluate(const ModelSpec& spec, std::span<const double> params,
                const data::LabeledDataset& ds, Execution exec) {
  return evaluate_full(spec, params, ds.view(), exec).accuracy;
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParamVector& params) {
  if (params.size() != spec.param_count())
    throw InvalidArgument("checkpoint parameters do not match model spec");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  auto put_u64 = [&out](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_u64(spec.layout_hash());
  for (double v : params.values) put_u64(std::bit_cast<std::uint64_t>(v));
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

ParamVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  auto get_u64 = [&in, &path]() {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated checkpoint " + path.string());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
    return v;
  };
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size())) throw IoError("truncated checkpoint " + path.string());
  if (magic != kCheckpointMagic) throw FormatError("bad checkpoint magic in " + path.string());
  if (get_u64() != spec.layout_hash())
    throw IntegrityError("checkpoint was written for a different model layout");
  ParamVector w(spec.param_count());
  for (auto& v : w.values) v = std::bit_cast<double>(get_u64());
  if (in.peek() != std::ifstream::traits_type::eof())
    throw IntegrityError("checkpoint has trailing data");
  return w;
}

}  // namespace macfl::models
