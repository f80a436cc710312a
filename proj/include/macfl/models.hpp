#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "macfl/datasets.hpp"
#include "macfl/parallel.hpp"
#include "macfl/rng.hpp"

namespace macfl::models {

enum class ModelKind { softmax, mlp };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

/// Layout: softmax = [W (C x d), b (C)]; mlp = [W1 (H x d), b1 (H), W2 (C x H), b2 (C)],
/// all row-major, tanh hidden units.
struct ModelSpec {
  ModelKind kind = ModelKind::softmax;
  std::size_t input_dim = 784;
  std::size_t hidden_dim = 64;
  std::size_t n_classes = 10;
  double init_scale = 0.01;

  std::size_t param_count() const;
  /// Hash of the layout-determining fields, stored in checkpoints.
  std::uint64_t layout_hash() const;
  void validate() const;
};

/// Flat model weights w.
struct ParamVector {
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(std::vector<double> v) : values(std::move(v)) {}
  explicit ParamVector(std::size_t n, double fill = 0.0) : values(n, fill) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  std::span<const double> span() const { return values; }
  bool all_finite() const;
  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

struct GradEstimate {
  std::vector<double> values;
  double batch_loss = 0.0;
};

/// Gradient of some loss at w on a batch. Model-backed oracles come from
/// `gradient_fn(spec)`; tests plug in closed-form toys.
using GradientFn = std::function<GradEstimate(std::span<const double>, const data::BatchView&)>;

/// Gaussian(0, init_scale^2) weights, zero biases.
ParamVector init_params(const ModelSpec& spec, Rng& rng);

/// Mean cross-entropy of the batch.
double loss(const ModelSpec& spec, std::span<const double> params, const data::BatchView& batch);

/// Exact gradient of `loss`.
GradEstimate gradient(const ModelSpec& spec, std::span<const double> params,
                      const data::BatchView& batch);

GradientFn gradient_fn(const ModelSpec& spec);

/// First-order meta-gradient g(w - rho g(w, batch_a), batch_b).
GradEstimate meta_gradient(const GradientFn& grad, std::span<const double> params,
                           const data::BatchView& batch_a, const data::BatchView& batch_b,
                           double rho);
GradEstimate meta_gradient(const ModelSpec& spec, std::span<const double> params,
                           const data::BatchView& batch_a, const data::BatchView& batch_b,
                           double rho);

/// Class scores (logits) of one sample.
std::vector<double> logits(const ModelSpec& spec, std::span<const double> params,
                           std::span<const double> x);
std::vector<double> softmax(std::span<const double> z);

/// Argmax class, ties broken toward the smallest index.
int predict(const ModelSpec& spec, std::span<const double> params, std::span<const double> x);

/// Accuracy and mean loss over a batch view, computed in fixed 256-row blocks
/// whose partial sums are combined in block order.
struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};
EvalResult evaluate_full(const ModelSpec& spec, std::span<const double> params,
                         const data::BatchView& rows, Execution exec = Execution::parallel);

/// Argmax accuracy in [0,1].
double evaluate(const ModelSpec& spec, std::span<const double> params,
                const data::LabeledDataset& ds, Execution exec = Execution::parallel);

/// Little-endian float64 payload behind a 16-byte header: 8-byte magic
/// "MACFLPV1" then the 64-bit layout hash.
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParamVector& params);
ParamVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace macfl::models
