#include "mevo/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"
#include "mevo/rng.hpp"

namespace mevo {

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw InvalidArgument("unknown activation '" + s + "'");
}

std::string MlpSpec::weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string MlpSpec::bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

void MlpSpec::validate() const {
  if (layer_dims.size() < 2) throw InvalidArgument("an MLP needs at least one linear layer");
  for (std::size_t d : layer_dims) {
    if (d == 0) throw InvalidArgument("layer dimensions must be positive");
  }
}

SchemaPtr MlpSpec::schema() const {
  validate();
  std::vector<std::pair<std::string, Shape>> tensors;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const auto in = static_cast<std::int64_t>(layer_dims[l]);
    const auto out = static_cast<std::int64_t>(layer_dims[l + 1]);
    tensors.emplace_back(weight_name(l), Shape{out, in});
    tensors.emplace_back(bias_name(l), Shape{out});
  }
  return std::make_shared<const ParamSchema>(std::move(tensors));
}

std::map<std::string, std::string> MlpSpec::to_metadata() const {
  std::string dims;
  for (std::size_t i = 0; i < layer_dims.size(); ++i) {
    if (i) dims += ',';
    dims += std::to_string(layer_dims[i]);
  }
  return {{"mlp.layer_dims", dims}, {"mlp.activation", to_string(activation)}};
}

MlpSpec MlpSpec::from_metadata(const std::map<std::string, std::string>& metadata) {
  auto dims_it = metadata.find("mlp.layer_dims");
  auto act_it = metadata.find("mlp.activation");
  if (dims_it == metadata.end() || act_it == metadata.end()) {
    throw FormatError("checkpoint metadata does not describe an MLP");
  }
  MlpSpec spec;
  spec.layer_dims.clear();
  std::stringstream ss(dims_it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      spec.layer_dims.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw FormatError("bad mlp.layer_dims entry '" + item + "'");
    }
  }
  spec.activation = activation_from_string(act_it->second);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Batch

void Batch::push_back(std::span<const float> x, int label) {
  if (dim == 0 && features.empty()) dim = x.size();
  if (x.size() != dim) throw InvalidArgument("feature row has the wrong width");
  features.insert(features.end(), x.begin(), x.end());
  labels.push_back(label);
}

void Batch::validate(std::size_t classes) const {
  if (features.size() != dim * labels.size()) throw InvalidArgument("batch feature/label counts disagree");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw InvalidArgument("label out of range");
  }
}

Batch Batch::prefix(std::size_t n) const {
  n = std::min(n, size());
  Batch out;
  out.dim = dim;
  out.features.assign(features.begin(), features.begin() + static_cast<std::ptrdiff_t>(n * dim));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Batch Batch::concat(std::span<const Batch> parts) {
  Batch out;
  for (const Batch& b : parts) {
    if (b.empty()) continue;
    if (out.dim == 0) out.dim = b.dim;
    if (b.dim != out.dim) throw InvalidArgument("cannot concatenate batches of different widths");
    out.features.insert(out.features.end(), b.features.begin(), b.features.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward (float, SIMD dot products)

namespace {

void check_inputs(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  const SchemaPtr expected = spec.schema();
  if (!weights.schema() || !(*weights.schema() == *expected)) {
    throw SchemaMismatch("weights do not match the MLP layout");
  }
  if (!batch.empty() && batch.dim != spec.input_dim()) {
    throw InvalidArgument("batch width " + std::to_string(batch.dim) + " does not match input dimension " +
                          std::to_string(spec.input_dim()));
  }
  batch.validate(spec.classes());
}

struct LayerView {
  std::span<const float> weight;  // [out, in]
  std::span<const float> bias;
  std::size_t in;
  std::size_t out;
};

std::vector<LayerView> layer_views(const MlpSpec& spec, const FlatVector& weights) {
  std::vector<LayerView> views;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    views.push_back(LayerView{weights.tensor(MlpSpec::weight_name(l)), weights.tensor(MlpSpec::bias_name(l)),
                              spec.layer_dims[l], spec.layer_dims[l + 1]});
  }
  return views;
}

float activate(Activation a, float z) { return a == Activation::tanh ? std::tanh(z) : std::max(z, 0.0f); }
double activate(Activation a, double z) { return a == Activation::tanh ? std::tanh(z) : std::max(z, 0.0); }

double activation_derivative(Activation a, double z, double h) {
  return a == Activation::tanh ? 1.0 - h * h : (z > 0.0 ? 1.0 : 0.0);
}

}  // namespace

Logits forward(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  check_inputs(spec, weights, batch);
  const auto layers = layer_views(spec, weights);
  Logits logits{batch.size(), spec.classes(), std::vector<float>(batch.size() * spec.classes())};

  std::size_t widest = *std::max_element(spec.layer_dims.begin(), spec.layer_dims.end());
  std::vector<float> cur(widest), next(widest);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto x = batch.row(i);
    std::copy(x.begin(), x.end(), cur.begin());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const LayerView& L = layers[l];
      const std::span<const float> input(cur.data(), L.in);
      const bool last = l + 1 == layers.size();
      for (std::size_t o = 0; o < L.out; ++o) {
        const float z = kernels::dot(L.weight.subspan(o * L.in, L.in), input) + L.bias[o];
        next[o] = last ? z : activate(spec.activation, z);
      }
      std::swap(cur, next);
    }
    std::copy(cur.begin(), cur.begin() + static_cast<std::ptrdiff_t>(spec.classes()),
              logits.values.begin() + static_cast<std::ptrdiff_t>(i * spec.classes()));
  }
  return logits;
}

std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c) {
    if (v[c] > v[best]) best = c;
  }
  return best;
}

std::vector<int> predict(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  const Logits logits = forward(spec, weights, batch);
  std::vector<int> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out[i] = static_cast<int>(argmax(logits.row(i)));
  return out;
}

double accuracy(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const auto pred = predict(spec, weights, batch);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double macro_f1(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const auto pred = predict(spec, weights, batch);
  const std::size_t C = spec.classes();
  std::vector<std::size_t> tp(C), fp(C), fn(C);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = static_cast<std::size_t>(pred[i]);
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    if (p == y) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++present;
  }
  return present ? sum / static_cast<double>(present) : 0.0;
}

// ---------------------------------------------------------------------------
// Double-precision forward/backward used by gradients, Fisher, Grams and training.

namespace {

struct Trace {
  std::vector<std::vector<double>> inputs;  // input to each layer
  std::vector<std::vector<double>> pre;     // pre-activation of each layer
  std::vector<double> probs;                // softmax of the final layer
};

Trace trace_forward(const MlpSpec& spec, const std::vector<LayerView>& layers, std::span<const float> x) {
  Trace t;
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerView& L = layers[l];
    std::vector<double> z(L.out);
    for (std::size_t o = 0; o < L.out; ++o) {
      double s = L.bias[o];
      for (std::size_t k = 0; k < L.in; ++k) s += static_cast<double>(L.weight[o * L.in + k]) * h[k];
      z[o] = s;
    }
    t.inputs.push_back(h);
    h.resize(L.out);
    const bool last = l + 1 == layers.size();
    for (std::size_t o = 0; o < L.out; ++o) h[o] = last ? z[o] : activate(spec.activation, z[o]);
    t.pre.push_back(std::move(z));
  }
  const auto& logits = t.pre.back();
  const double mx = *std::max_element(logits.begin(), logits.end());
  t.probs.resize(logits.size());
  double total = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) total += t.probs[c] = std::exp(logits[c] - mx);
  for (double& p : t.probs) p /= total;
  return t;
}

// Adds scale * d log p(label|x) / d theta into grad (schema order).
void backward(const MlpSpec& spec, const std::vector<LayerView>& layers, const SchemaPtr& schema,
              const Trace& t, int label, double scale, std::span<double> grad) {
  std::vector<double> delta(t.probs.size());
  for (std::size_t c = 0; c < delta.size(); ++c) {
    delta[c] = (static_cast<int>(c) == label ? 1.0 : 0.0) - t.probs[c];
  }
  for (std::size_t l = layers.size(); l-- > 0;) {
    const LayerView& L = layers[l];
    const ParamSlot& ws = schema->slot(MlpSpec::weight_name(l));
    const ParamSlot& bs = schema->slot(MlpSpec::bias_name(l));
    const auto& input = t.inputs[l];
    for (std::size_t o = 0; o < L.out; ++o) {
      const double d = scale * delta[o];
      grad[bs.offset + o] += d;
      for (std::size_t k = 0; k < L.in; ++k) grad[ws.offset + o * L.in + k] += d * input[k];
    }
    if (l == 0) break;
    std::vector<double> prev(L.in, 0.0);
    for (std::size_t k = 0; k < L.in; ++k) {
      double s = 0.0;
      for (std::size_t o = 0; o < L.out; ++o) s += static_cast<double>(L.weight[o * L.in + k]) * delta[o];
      prev[k] = s * activation_derivative(spec.activation, t.pre[l - 1][k], input[k]);
    }
    delta = std::move(prev);
  }
}

}  // namespace

std::vector<double> log_likelihood_gradient(const MlpSpec& spec, const FlatVector& weights,
                                            std::span<const float> x, int label) {
  Batch one;
  one.push_back(x, label);
  check_inputs(spec, weights, one);
  const auto layers = layer_views(spec, weights);
  std::vector<double> grad(weights.size(), 0.0);
  backward(spec, layers, weights.schema(), trace_forward(spec, layers, x), label, 1.0, grad);
  return grad;
}

FisherState fisher_diagonal(const MlpSpec& spec, const FlatVector& weights, const Batch& batch,
                            FisherLabels labels, std::size_t draws, std::uint64_t seed) {
  if (draws == 0) throw InvalidArgument("Fisher estimation needs at least one draw");
  if (batch.empty()) throw InvalidArgument("empty batch");
  check_inputs(spec, weights, batch);
  const auto layers = layer_views(spec, weights);
  const std::size_t per_example = labels == FisherLabels::sampled ? draws : 1;

  std::vector<double> sum(weights.size(), 0.0);
  std::vector<double> grad(weights.size());
  CounterRng rng = CounterRng::stream(seed, 0x66697368);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trace t = trace_forward(spec, layers, batch.row(i));
    for (std::size_t m = 0; m < per_example; ++m) {
      int y = batch.labels[i];
      if (labels == FisherLabels::sampled) {
        const double u = rng.uniform01();
        double cum = 0.0;
        y = static_cast<int>(t.probs.size()) - 1;
        for (std::size_t c = 0; c < t.probs.size(); ++c) {
          cum += t.probs[c];
          if (u < cum) {
            y = static_cast<int>(c);
            break;
          }
        }
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      backward(spec, layers, weights.schema(), t, y, 1.0, grad);
      for (std::size_t j = 0; j < grad.size(); ++j) sum[j] += grad[j] * grad[j];
    }
  }
  const double count = static_cast<double>(batch.size() * per_example);
  std::vector<float> diag(sum.size());
  for (std::size_t j = 0; j < sum.size(); ++j) diag[j] = static_cast<float>(sum[j] / count);
  return FisherState{FlatVector(weights.schema(), std::move(diag)), batch.size() * per_example};
}

GramState capture_grams(const MlpSpec& spec, const FlatVector& weights, const Batch& batch) {
  check_inputs(spec, weights, batch);
  const auto layers = layer_views(spec, weights);
  GramState state;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    state.layers.push_back(LayerGram{MlpSpec::weight_name(l), Eigen::MatrixXd::Zero(
                                                                  static_cast<Eigen::Index>(layers[l].in),
                                                                  static_cast<Eigen::Index>(layers[l].in))});
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trace t = trace_forward(spec, layers, batch.row(i));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Eigen::Map<const Eigen::VectorXd> a(t.inputs[l].data(), static_cast<Eigen::Index>(t.inputs[l].size()));
      state.layers[l].gram.noalias() += a * a.transpose();
    }
  }
  state.samples = batch.size();
  return state;
}

FlatVector init_weights(const MlpSpec& spec, std::uint64_t seed) {
  const SchemaPtr schema = spec.schema();
  FlatVector w(schema);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.layer_dims[l]));
    CounterRng rng = CounterRng::stream(seed, 0x696e6974, l);
    for (float& v : w.tensor(MlpSpec::weight_name(l))) v = static_cast<float>(rng.uniform(-bound, bound));
    for (float& v : w.tensor(MlpSpec::bias_name(l))) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return w;
}

FlatVector train(const MlpSpec& spec, const FlatVector& init, const Batch& data, const TrainHyper& hyper) {
  check_inputs(spec, init, data);
  if (data.empty()) throw InvalidArgument("empty batch");
  if (hyper.batch_size == 0) throw InvalidArgument("batch_size must be positive");
  FlatVector w = init;
  std::vector<std::size_t> order(data.size());
  std::vector<double> grad(w.size());
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng = CounterRng::stream(hyper.seed, 0x7368756666, epoch);
    deterministic_shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, b = 0; start < order.size(); start += hyper.batch_size, ++b) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      const auto layers = layer_views(spec, w);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const Trace t = trace_forward(spec, layers, data.row(i));
        loss -= std::log(t.probs[static_cast<std::size_t>(data.labels[i])]) * scale;
        backward(spec, layers, w.schema(), t, data.labels[i], scale, grad);
      }
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      // grad holds the mean log-likelihood gradient; ascend it.
      auto values = w.values();
      for (std::size_t j = 0; j < values.size(); ++j) {
        values[j] = static_cast<float>(static_cast<double>(values[j]) + hyper.lr * grad[j]);
      }
    }
  }
  return w;
}

}  // namespace mevo
