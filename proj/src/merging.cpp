#include "mevo/merging.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"

namespace mevo {

std::string to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::simple: return "simple";
    case MergeMethod::fisher: return "fisher";
    case MergeMethod::regmean: return "regmean";
    case MergeMethod::ties: return "ties";
    case MergeMethod::greedy_soup: return "greedy_soup";
    case MergeMethod::pairwise_interp: return "pairwise_interp";
  }
  return "unknown";
}

MergeMethod merge_method_from_string(const std::string& s) {
  for (MergeMethod m : {MergeMethod::simple, MergeMethod::fisher, MergeMethod::regmean, MergeMethod::ties,
                        MergeMethod::greedy_soup, MergeMethod::pairwise_interp}) {
    if (to_string(m) == s) return m;
  }
  throw InvalidArgument("unknown merge method '" + s + "'");
}

void MergeSpec::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("regmean alpha must lie in (0, 1]");
  if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) throw InvalidArgument("ties k must lie in (0, 1]");
  if (!std::isfinite(lambda)) throw InvalidArgument("ties lambda must be finite");
  if (!(interp >= 0.0 && interp <= 1.0)) throw InvalidArgument("interp must lie in [0, 1]");
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("merge weights must be finite and non-negative");
  }
}

namespace {

void require_models(std::span<const FlatVector> models) {
  if (models.empty()) throw InvalidArgument("merge needs at least one model");
  require_same_schema(models);
}

std::vector<double> resolve_weights(std::span<const double> weights, std::size_t n) {
  if (weights.empty()) return std::vector<double>(n, 1.0);
  if (weights.size() != n) throw InvalidArgument("expected one merge weight per model");
  return {weights.begin(), weights.end()};
}

}  // namespace

// ---------------------------------------------------------------------------

FlatVector simple_average(std::span<const FlatVector> models, std::span<const double> weights) {
  require_models(models);
  const auto w = resolve_weights(weights, models.size());
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) throw InvalidArgument("merge weights sum to zero");
  std::vector<double> acc(models[0].size(), 0.0);
  for (std::size_t i = 0; i < models.size(); ++i) kernels::accumulate(w[i], models[i].values(), acc);
  FlatVector out(models[0].schema());
  kernels::scale_div(acc, total, out.values());
  return out;
}

FlatVector fisher_merge(std::span<const FlatVector> models, std::span<const FisherState> fishers,
                        std::span<const double> weights, double floor) {
  require_models(models);
  if (fishers.size() != models.size()) throw MissingAux("fisher merge needs one Fisher state per model");
  const auto w = resolve_weights(weights, models.size());
  const std::size_t d = models[0].size();
  std::vector<double> num(d, 0.0), den(d, 0.0);
  for (std::size_t i = 0; i < models.size(); ++i) {
    require_same_schema(models[i], fishers[i].diag);
    std::vector<float> floored(fishers[i].diag.values().begin(), fishers[i].diag.values().end());
    for (float& f : floored) {
      if (f < 0.0f || std::isnan(f)) throw InvalidArgument("negative Fisher entry in model " + std::to_string(i));
      f = std::max(f, static_cast<float>(floor));
    }
    kernels::weighted_accumulate(w[i], floored, models[i].values(), num, den);
  }
  FlatVector out(models[0].schema());
  kernels::ratio(num, den, 0.0, out.values());
  return out;
}

// ---------------------------------------------------------------------------
// RegMean

FlatVector regmean_merge(std::span<const FlatVector> models, std::span<const GramState> grams, double alpha) {
  return regmean_merge(models, grams, alpha, nullptr);
}

FlatVector regmean_merge(std::span<const FlatVector> models, std::span<const GramState> grams, double alpha,
                         RegmeanDiagnostics* diagnostics) {
  require_models(models);
  if (grams.size() != models.size()) throw MissingAux("regmean needs one Gram state per model");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("regmean alpha must lie in (0, 1]");

  // Parameters without a Gram matrix are averaged.
  FlatVector out = simple_average(models);
  const ParamSchema& schema = *models[0].schema();
  if (grams[0].layers.empty()) throw MissingAux("regmean Gram states cover no linear layers");
  for (std::size_t i = 1; i < grams.size(); ++i) {
    if (grams[i].layers.size() != grams[0].layers.size()) {
      throw SchemaMismatch("models carry Gram matrices for different layer sets");
    }
  }

  for (const LayerGram& layer : grams[0].layers) {
    const ParamSlot& slot = schema.slot(layer.weight_name);
    if (slot.shape.size() != 2) throw SchemaMismatch("regmean layer '" + layer.weight_name + "' is not a matrix");
    const auto rows = static_cast<Eigen::Index>(slot.shape[0]);  // out
    const auto cols = static_cast<Eigen::Index>(slot.shape[1]);  // in

    Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(cols, cols);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(cols, rows);
    for (std::size_t i = 0; i < models.size(); ++i) {
      const LayerGram* g = grams[i].find(layer.weight_name);
      if (!g || g->gram.rows() != cols || g->gram.cols() != cols) {
        throw SchemaMismatch("Gram matrix for '" + layer.weight_name + "' missing or mis-shaped in model " +
                             std::to_string(i));
      }
      Eigen::MatrixXd scaled = alpha * g->gram;
      scaled.diagonal() = g->gram.diagonal();
      const auto w = models[i].tensor(layer.weight_name);
      const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(w.data(),
                                                                                                       rows, cols);
      lhs += scaled;
      rhs.noalias() += scaled * W.cast<double>().transpose();
    }

    const double trace = lhs.trace();
    if (!(trace > 0.0)) continue;  // no activation statistics; keep the average

    Eigen::MatrixXd solution;
    Eigen::LLT<Eigen::MatrixXd> llt(lhs);
    if (llt.info() == Eigen::Success && llt.rcond() > 1e-12) {
      solution = llt.solve(rhs);
    } else {
      const double ridge = 1e-6 * trace / static_cast<double>(cols);
      Eigen::MatrixXd reg = lhs;
      reg.diagonal().array() += ridge;
      solution = reg.ldlt().solve(rhs);
      if (diagnostics) diagnostics->ridged_layers.push_back(layer.weight_name);
    }
    if (!solution.allFinite()) throw NumericalError("regmean solve produced non-finite weights");

    auto dst = out.tensor(layer.weight_name);
    for (Eigen::Index o = 0; o < rows; ++o) {
      for (Eigen::Index k = 0; k < cols; ++k) dst[static_cast<std::size_t>(o * cols + k)] = static_cast<float>(solution(k, o));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TIES

std::size_t ties_keep_count(double k, std::size_t d) {
  if (!(k > 0.0 && k <= 1.0)) throw InvalidArgument("ties k must lie in (0, 1]");
  const double p = k * static_cast<double>(d);
  const double r = std::round(p);
  // k*d is often an integer that double arithmetic lands a hair above.
  const auto keep = std::abs(p - r) <= 1e-9 * std::max(1.0, p) ? r : std::ceil(p);
  return std::min(d, static_cast<std::size_t>(keep));
}

std::vector<float> ties_trim(std::span<const float> tau, std::size_t keep) {
  std::vector<float> out(tau.size(), 0.0f);
  keep = std::min(keep, tau.size());
  if (keep == 0) return out;
  std::vector<std::size_t> idx(tau.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&tau](std::size_t a, std::size_t b) {
    const float ma = std::abs(tau[a]), mb = std::abs(tau[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(), before);
  for (std::size_t i = 0; i < keep; ++i) out[idx[i]] = tau[idx[i]];
  return out;
}

FlatVector ties_merge(std::span<const FlatVector> models, const FlatVector& theta_pre, double k, double lambda,
                      bool per_tensor) {
  require_models(models);
  require_same_schema(models[0], theta_pre);
  const std::size_t d = theta_pre.size();
  const std::size_t keep_global = ties_keep_count(k, d);

  std::vector<std::vector<float>> trimmed;
  std::vector<float> tau(d);
  for (const FlatVector& m : models) {
    kernels::sub(m.values(), theta_pre.values(), tau);
    if (!per_tensor) {
      trimmed.push_back(ties_trim(tau, keep_global));
      continue;
    }
    std::vector<float> t(d, 0.0f);
    for (const ParamSlot& slot : theta_pre.schema()->slots()) {
      const auto part = ties_trim(std::span<const float>(tau).subspan(slot.offset, slot.length),
                                  ties_keep_count(k, slot.length));
      std::copy(part.begin(), part.end(), t.begin() + static_cast<std::ptrdiff_t>(slot.offset));
    }
    trimmed.push_back(std::move(t));
  }

  FlatVector out(theta_pre.schema());
  for (std::size_t j = 0; j < d; ++j) {
    double total = 0.0;
    for (const auto& t : trimmed) total += t[j];
    const int elected = (total > 0.0) - (total < 0.0);
    double agree = 0.0;
    std::size_t count = 0;
    if (elected != 0) {
      for (const auto& t : trimmed) {
        const float v = t[j];
        if (v != 0.0f && ((v > 0.0f) - (v < 0.0f)) == elected) {
          agree += v;
          ++count;
        }
      }
    }
    const double merged = count ? agree / static_cast<double>(count) : 0.0;
    out[j] = static_cast<float>(static_cast<double>(theta_pre[j]) + lambda * merged);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Greedy soup

SoupResult greedy_soup(std::span<const FlatVector> models, const ScoreFn& dev_score) {
  require_models(models);
  if (!dev_score) throw MissingAux("greedy soup needs a dev-set scorer");
  SoupResult result;
  result.individual_scores.reserve(models.size());
  for (const FlatVector& m : models) result.individual_scores.push_back(dev_score(m));

  std::vector<std::size_t> order(models.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return result.individual_scores[a] > result.individual_scores[b];
  });

  result.ingredients = {order[0]};
  result.merged = models[order[0]];
  result.score = result.individual_scores[order[0]];
  for (std::size_t r = 1; r < order.size(); ++r) {
    std::vector<FlatVector> trial;
    for (std::size_t i : result.ingredients) trial.push_back(models[i]);
    trial.push_back(models[order[r]]);
    FlatVector candidate = simple_average(trial);
    const double s = dev_score(candidate);
    if (s >= result.score) {
      result.ingredients.push_back(order[r]);
      result.merged = std::move(candidate);
      result.score = s;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

FlatVector merge(std::span<const FlatVector> models, const MergeSpec& spec, const MergeAux& aux) {
  require_models(models);
  spec.validate();
  if (models.size() == 1) return models[0];
  switch (spec.method) {
    case MergeMethod::simple:
      return simple_average(models, spec.weights);
    case MergeMethod::fisher:
      if (aux.fishers.empty()) throw MissingAux("fisher merge requires Fisher states");
      return fisher_merge(models, aux.fishers, spec.weights);
    case MergeMethod::regmean:
      if (aux.grams.empty()) throw MissingAux("regmean merge requires Gram states");
      return regmean_merge(models, aux.grams, spec.alpha);
    case MergeMethod::ties:
      if (!aux.theta_pre) throw MissingAux("ties merge requires the pre-trained weights");
      return ties_merge(models, *aux.theta_pre, spec.trim_fraction, spec.lambda, spec.ties_per_tensor);
    case MergeMethod::greedy_soup:
      if (!aux.dev_score) throw MissingAux("greedy soup requires a dev evaluator");
      return greedy_soup(models, aux.dev_score).merged;
    case MergeMethod::pairwise_interp:
      if (models.size() != 2) throw InvalidArgument("pairwise_interp merges exactly two models");
      return interpolate(models[0], models[1], spec.interp);
  }
  throw InvalidArgument("unhandled merge method");
}

FlatVector interpolate(const FlatVector& a, const FlatVector& b, double alpha) {
  require_same_schema(a, b);
  std::vector<double> acc(a.size(), 0.0);
  kernels::accumulate(alpha, a.values(), acc);
  kernels::accumulate(1.0 - alpha, b.values(), acc);
  FlatVector out(a.schema());
  kernels::scale_div(acc, 1.0, out.values());
  return out;
}

// ---------------------------------------------------------------------------
// Grid searches

std::vector<double> default_coefficient_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 16; ++i) grid.push_back(static_cast<double>(10 + 5 * i) / 100.0);
  return grid;
}

SearchResult coefficient_search(std::span<const double> grid, const std::function<double(double)>& objective) {
  if (grid.empty()) throw InvalidArgument("coefficient grid is empty");
  SearchResult result;
  for (double v : grid) {
    const double s = objective(v);
    result.table.push_back({v, s});
    const bool first = result.table.size() == 1;
    if (first || s > result.best_score || (s == result.best_score && v < result.best_value)) {
      result.best_value = v;
      result.best_score = s;
    }
  }
  return result;
}

SearchResult pairwise_interp_search(const FlatVector& a, const FlatVector& b, std::span<const double> grid,
                                    const ScoreFn& dev_score) {
  return coefficient_search(grid, [&](double alpha) { return dev_score(interpolate(a, b, alpha)); });
}

FlatVector landscape_point(const FlatVector& base, const TaskVector& tau1, const TaskVector& tau2, double a,
                           double b) {
  require_same_schema(base, tau1.base);
  require_same_schema(base, tau1.endpoint);
  require_same_schema(base, tau2.base);
  require_same_schema(base, tau2.endpoint);
  FlatVector out(base.schema());
  for (std::size_t j = 0; j < base.size(); ++j) {
    const double d1 = static_cast<double>(tau1.endpoint[j]) - static_cast<double>(tau1.base[j]);
    const double d2 = static_cast<double>(tau2.endpoint[j]) - static_cast<double>(tau2.base[j]);
    out[j] = static_cast<float>(static_cast<double>(base[j]) + a * d1 + b * d2);
  }
  return out;
}

LandscapeGrid landscape_slice(const FlatVector& theta_pre, const TaskVector& tau1, const TaskVector& tau2,
                              std::span<const double> grid_a, std::span<const double> grid_b, const ScoreFn& score) {
  LandscapeGrid grid{{grid_a.begin(), grid_a.end()}, {grid_b.begin(), grid_b.end()}, {}};
  grid.scores.reserve(grid_a.size() * grid_b.size());
  for (double a : grid_a) {
    for (double b : grid_b) grid.scores.push_back(score(landscape_point(theta_pre, tau1, tau2, a, b)));
  }
  return grid;
}

namespace {
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string landscape_csv(const LandscapeGrid& grid) {
  std::string out = "a,b,score\n";
  for (std::size_t i = 0; i < grid.a_values.size(); ++i) {
    for (std::size_t j = 0; j < grid.b_values.size(); ++j) {
      out += fmt(grid.a_values[i]) + "," + fmt(grid.b_values[j]) + "," + fmt(grid.at(i, j)) + "\n";
    }
  }
  return out;
}

std::string search_csv(const SearchResult& result) {
  std::string out = "value,score\n";
  for (const auto& p : result.table) out += fmt(p.value) + "," + fmt(p.score) + "\n";
  return out;
}

// Heatmap of the slice: one rect per cell, a-axis horizontal, b-axis vertical
// (b increasing upward), blue (low) to yellow (high).
std::string landscape_svg(const LandscapeGrid& grid, const std::string& title) {
  const std::size_t na = grid.a_values.size(), nb = grid.b_values.size();
  const double cell = 24.0, margin = 48.0;
  const double w = margin * 2 + cell * static_cast<double>(na);
  const double h = margin * 2 + cell * static_cast<double>(nb);
  double lo = 0.0, hi = 1.0;
  if (!grid.scores.empty()) {
    lo = *std::min_element(grid.scores.begin(), grid.scores.end());
    hi = *std::max_element(grid.scores.begin(), grid.scores.end());
  }
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<text x=\"" << margin << "\" y=\"" << margin / 2 << "\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      const double t = hi > lo ? (grid.at(i, j) - lo) / (hi - lo) : 0.5;
      const int r = static_cast<int>(40 + 215 * t), g = static_cast<int>(60 + 170 * t),
                b = static_cast<int>(160 - 120 * t);
      svg << "<rect x=\"" << margin + cell * static_cast<double>(i) << "\" y=\""
          << margin + cell * static_cast<double>(nb - 1 - j) << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << r << "," << g << "," << b << ")\"><title>a=" << grid.a_values[i]
          << " b=" << grid.b_values[j] << " score=" << grid.at(i, j) << "</title></rect>\n";
    }
  }
  svg << "<text x=\"" << w / 2 << "\" y=\"" << h - margin / 4 << "\" font-size=\"12\">a</text>\n";
  svg << "<text x=\"" << margin / 4 << "\" y=\"" << h / 2 << "\" font-size=\"12\">b</text>\n";
  svg << "<text x=\"" << margin << "\" y=\"" << h - margin / 2 << "\" font-size=\"10\">min " << lo << "  max " << hi
      << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

// ---------------------------------------------------------------------------

std::vector<int> ensemble_logits(std::span<const Logits> logits) {
  if (logits.empty()) throw InvalidArgument("ensemble needs at least one model");
  const std::size_t rows = logits[0].rows, cols = logits[0].cols;
  for (const Logits& l : logits) {
    if (l.cols != cols || l.rows != rows) throw InvalidArgument("ensemble members disagree on output dimension");
  }
  std::vector<int> labels(rows);
  std::vector<double> avg(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::fill(avg.begin(), avg.end(), 0.0);
    for (const Logits& l : logits) {
      const auto r = l.row(i);
      for (std::size_t c = 0; c < cols; ++c) avg[c] += r[c];
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (avg[c] / static_cast<double>(logits.size()) > avg[best] / static_cast<double>(logits.size())) best = c;
    }
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

std::vector<int> ensemble_predict(const MlpSpec& spec, std::span<const FlatVector> models, const Batch& batch) {
  std::vector<Logits> logits;
  for (const FlatVector& m : models) logits.push_back(forward(spec, m, batch));
  return ensemble_logits(logits);
}

double ensemble_accuracy(const MlpSpec& spec, std::span<const FlatVector> models, const Batch& batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const auto pred = ensemble_predict(spec, models, batch);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace mevo
