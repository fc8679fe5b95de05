#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mevo/evaluator.hpp"
#include "mevo/merging.hpp"
#include "mevo/rng.hpp"
#include "mevo/tensor_store.hpp"

namespace mevo {

enum class EvolveMode { simple, combined };
enum class UpdateSemantics { synchronous, sequential };

std::string to_string(UpdateSemantics u);
UpdateSemantics update_semantics_from_string(const std::string& s);

struct EvolveConfig {
  double scale_factor = 0.5;     // F
  double crossover_ratio = 0.5;  // Cr
  std::size_t generations = 1;   // G
  std::uint64_t seed = 0;
  EvolveMode mode = EvolveMode::simple;
  MergeSpec merge;  // consulted in combined mode
  UpdateSemantics update = UpdateSemantics::synchronous;
  /// Upper bound on concurrent offspring scoring; 0 defers to evaluator capacity.
  std::size_t max_workers = 0;

  void validate() const;
};

struct Population {
  std::vector<FlatVector> members;
  std::vector<std::optional<double>> fitness;
  std::uint64_t generation = 0;
  std::uint64_t seed = 0;  // generator state: streams are keyed by (seed, generation, member)

  static Population from_members(std::vector<FlatVector> members, std::uint64_t seed);
  std::size_t size() const { return members.size(); }
  bool bitwise_equal(const Population& other) const;
};

/// Per-member statistics that merge methods need for a (possibly mutated)
/// member in a given population slot.
class AuxProvider {
 public:
  virtual ~AuxProvider() = default;
  virtual FisherState fisher(const FlatVector& weights, std::size_t slot) const = 0;
  virtual GramState grams(const FlatVector& weights, std::size_t slot) const = 0;
};

/// Everything combined-mode scoring needs besides the population itself.
struct MergeContext {
  const AuxProvider* aux = nullptr;
  const FlatVector* theta_pre = nullptr;
};

struct EvalInterval {
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
};

struct GenerationRecord {
  std::uint64_t generation = 0;
  double best = 0.0;
  double mean = 0.0;
  std::size_t replacements = 0;
  double t_mutate_ms = 0.0;
  double t_eval_ms = 0.0;
  std::vector<EvalInterval> eval_intervals;
};

struct EvolveTrace {
  double initial_best = 0.0;
  double initial_mean = 0.0;
  std::vector<GenerationRecord> generations;

  std::string to_csv() const;
};

/// theta_i + F * (theta_r1 - theta_r2) with r1 != r2, both != i, drawn by
/// rejection from rng. F == 0 returns theta_i unchanged.
FlatVector mutate(const Population& pop, std::size_t i, double scale_factor, CounterRng& rng,
                  std::size_t* r1_out = nullptr, std::size_t* r2_out = nullptr);

/// Takes mutant[j] where the j-th uniform draw is <= Cr, else parent[j].
FlatVector crossover(const FlatVector& parent, const FlatVector& mutant, double crossover_ratio, CounterRng& rng);

/// The member stream used for offspring `i` of generation `generation`.
CounterRng member_stream(std::uint64_t seed, std::uint64_t generation, std::size_t i);

/// Offspring i of the current generation: mutate + crossover from member_stream.
FlatVector make_offspring(const Population& pop, std::size_t i, const EvolveConfig& cfg);

/// Simple mode: evaluator score of the candidate. Combined mode: score of the
/// population merged with the candidate substituted at `slot`.
double score_candidate(const FlatVector& candidate, const Population& pop, std::size_t slot, const EvolveConfig& cfg,
                       Evaluator& evaluator, const MergeContext& ctx = {});

/// Merges a population under cfg.merge, computing aux statistics through ctx.
FlatVector merge_population(std::span<const FlatVector> members, const EvolveConfig& cfg, Evaluator& evaluator,
                            const MergeContext& ctx);

/// One generation. Scores unscored parents first. The input is never modified;
/// an evaluator failure propagates as EvaluationError before any replacement.
std::pair<Population, GenerationRecord> step_generation(const Population& pop, const EvolveConfig& cfg,
                                                        Evaluator& evaluator, const MergeContext& ctx = {});

struct EvolveResult {
  Population population;
  EvolveTrace trace;
  FlatVector best;  // argmax member (simple) or merged final population (combined)
  std::size_t best_index = 0;
};

EvolveResult evolve(const Population& pop, const EvolveConfig& cfg, Evaluator& evaluator,
                    const MergeContext& ctx = {});

/// Highest fitness, ties to the lowest index. Requires every member scored.
std::size_t best_member(const Population& pop);

}  // namespace mevo
