#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mevo/inference.hpp"
#include "mevo/stats.hpp"
#include "mevo/tensor_store.hpp"

namespace mevo {

enum class MergeMethod { simple, fisher, regmean, ties, greedy_soup, pairwise_interp };

std::string to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& s);

/// Method selector plus the parameters each method reads. Only the fields
/// relevant to the chosen method are consulted.
struct MergeSpec {
  MergeMethod method = MergeMethod::simple;
  std::vector<double> weights;  // per-model; empty means uniform
  double alpha = 0.9;           // RegMean off-diagonal scale, 1/(1+gamma)
  double trim_fraction = 0.2;   // TIES keep rate k
  double lambda = 1.0;          // TIES rescale
  double interp = 0.5;          // pairwise_interp coefficient on the first model
  bool ties_per_tensor = false;

  void validate() const;
};

/// Dev-set scorer used by greedy soup and the grid searches.
using ScoreFn = std::function<double(const FlatVector&)>;

/// Method-specific side inputs for merge().
struct MergeAux {
  std::span<const FisherState> fishers;
  std::span<const GramState> grams;
  const FlatVector* theta_pre = nullptr;
  ScoreFn dev_score;
};

/// Lower bound applied to every Fisher entry at merge time.
inline constexpr double kFisherFloor = 1e-8;

FlatVector merge(std::span<const FlatVector> models, const MergeSpec& spec, const MergeAux& aux = {});

/// Uniform (or weighted) mean, accumulated in double. Identical inputs return
/// bitwise the same vector.
FlatVector simple_average(std::span<const FlatVector> models, std::span<const double> weights = {});

/// Per coordinate: sum_i w_i F'_ij theta_ij / sum_i w_i F'_ij with F' = max(F, floor).
FlatVector fisher_merge(std::span<const FlatVector> models, std::span<const FisherState> fishers,
                        std::span<const double> weights = {}, double floor = kFisherFloor);

FlatVector regmean_merge(std::span<const FlatVector> models, std::span<const GramState> grams, double alpha);

struct RegmeanDiagnostics {
  std::vector<std::string> ridged_layers;
};
FlatVector regmean_merge(std::span<const FlatVector> models, std::span<const GramState> grams, double alpha,
                         RegmeanDiagnostics* diagnostics);

/// Keep count ceil(k*d) for TIES trimming.
std::size_t ties_keep_count(double k, std::size_t d);
/// Zero all but the top-keep entries of tau by magnitude; ties go to the lower index.
std::vector<float> ties_trim(std::span<const float> tau, std::size_t keep);
FlatVector ties_merge(std::span<const FlatVector> models, const FlatVector& theta_pre, double k, double lambda,
                      bool per_tensor = false);

struct SoupResult {
  FlatVector merged;
  std::vector<std::size_t> ingredients;  // indices into the input, in acceptance order
  double score = 0.0;
  std::vector<double> individual_scores;
};
SoupResult greedy_soup(std::span<const FlatVector> models, const ScoreFn& dev_score);

/// alpha*a + (1-alpha)*b, accumulated in double.
FlatVector interpolate(const FlatVector& a, const FlatVector& b, double alpha);

/// Fine-tuned endpoint relative to a base; the delta is derived on demand so
/// that base + 1*delta reproduces the endpoint exactly.
struct TaskVector {
  FlatVector base;
  FlatVector endpoint;

  FlatVector delta() const { return subtract(endpoint, base); }
};

struct GridPoint {
  double value = 0.0;
  double score = 0.0;
};

struct SearchResult {
  double best_value = 0.0;
  double best_score = 0.0;
  std::vector<GridPoint> table;
};

/// {0.10, 0.15, ..., 0.90}.
std::vector<double> default_coefficient_grid();

/// Evaluates objective at each grid value; argmax with ties to the smaller value.
SearchResult coefficient_search(std::span<const double> grid, const std::function<double(double)>& objective);
SearchResult pairwise_interp_search(const FlatVector& a, const FlatVector& b, std::span<const double> grid,
                                    const ScoreFn& dev_score);

struct LandscapeGrid {
  std::vector<double> a_values;
  std::vector<double> b_values;
  std::vector<double> scores;  // row-major [a][b]

  double at(std::size_t ia, std::size_t ib) const { return scores[ia * b_values.size() + ib]; }
};

/// base + a*tau1 + b*tau2 over the grid, computed in double from the endpoints.
FlatVector landscape_point(const FlatVector& base, const TaskVector& tau1, const TaskVector& tau2, double a,
                           double b);
LandscapeGrid landscape_slice(const FlatVector& theta_pre, const TaskVector& tau1, const TaskVector& tau2,
                              std::span<const double> grid_a, std::span<const double> grid_b, const ScoreFn& score);

std::string landscape_csv(const LandscapeGrid& grid);
std::string landscape_svg(const LandscapeGrid& grid, const std::string& title);
std::string search_csv(const SearchResult& result);

/// Averages the logit rows of several models and takes the argmax per example
/// (ties to the lowest class index).
std::vector<int> ensemble_logits(std::span<const Logits> logits);
std::vector<int> ensemble_predict(const MlpSpec& spec, std::span<const FlatVector> models, const Batch& batch);
double ensemble_accuracy(const MlpSpec& spec, std::span<const FlatVector> models, const Batch& batch);

}  // namespace mevo
