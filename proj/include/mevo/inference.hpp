#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mevo/stats.hpp"
#include "mevo/tensor_store.hpp"

namespace mevo {

enum class Activation { tanh, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Fully-connected classifier. Layer i owns "layer{i}.weight" with shape
/// [out, in] and "layer{i}.bias" with shape [out].
struct MlpSpec {
  std::vector<std::size_t> layer_dims{2, 16, 16, 6};
  Activation activation = Activation::tanh;

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t classes() const { return layer_dims.back(); }

  static std::string weight_name(std::size_t layer);
  static std::string bias_name(std::size_t layer);

  void validate() const;
  SchemaPtr schema() const;

  /// Round-trips through a checkpoint's "__metadata__" map.
  std::map<std::string, std::string> to_metadata() const;
  static MlpSpec from_metadata(const std::map<std::string, std::string>& metadata);

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Row-major feature matrix with integer labels.
struct Batch {
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(features).subspan(i * dim, dim);
  }
  void push_back(std::span<const float> x, int label);
  void validate(std::size_t classes) const;
  Batch prefix(std::size_t n) const;
  static Batch concat(std::span<const Batch> parts);
};

struct Logits {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values).subspan(i * cols, cols);
  }
};

Logits forward(const MlpSpec& spec, const FlatVector& weights, const Batch& batch);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const float> v);

std::vector<int> predict(const MlpSpec& spec, const FlatVector& weights, const Batch& batch);
double accuracy(const MlpSpec& spec, const FlatVector& weights, const Batch& batch);
/// Unweighted mean over classes of per-class F1; classes absent from both
/// labels and predictions are skipped.
double macro_f1(const MlpSpec& spec, const FlatVector& weights, const Batch& batch);

/// d log p(label | x) / d theta, in schema order, computed in double precision.
std::vector<double> log_likelihood_gradient(const MlpSpec& spec, const FlatVector& weights,
                                            std::span<const float> x, int label);

enum class FisherLabels { sampled, empirical };

FisherState fisher_diagonal(const MlpSpec& spec, const FlatVector& weights, const Batch& batch,
                            FisherLabels labels = FisherLabels::sampled, std::size_t draws = 1,
                            std::uint64_t seed = 0);

GramState capture_grams(const MlpSpec& spec, const FlatVector& weights, const Batch& batch);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
FlatVector init_weights(const MlpSpec& spec, std::uint64_t seed);

struct TrainHyper {
  double lr = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD on mean cross-entropy; the shuffle stream is keyed by (seed, epoch).
FlatVector train(const MlpSpec& spec, const FlatVector& init, const Batch& data,
                 const TrainHyper& hyper);

}  // namespace mevo
