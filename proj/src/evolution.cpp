#include "mevo/evolution.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"

namespace mevo {

using Clock = std::chrono::steady_clock;

std::string to_string(UpdateSemantics u) { return u == UpdateSemantics::synchronous ? "synchronous" : "sequential"; }

UpdateSemantics update_semantics_from_string(const std::string& s) {
  if (s == "synchronous") return UpdateSemantics::synchronous;
  if (s == "sequential") return UpdateSemantics::sequential;
  throw InvalidArgument("unknown update semantics '" + s + "'");
}

void EvolveConfig::validate() const {
  if (!(scale_factor >= 0.0 && scale_factor <= 2.0)) throw InvalidArgument("scale factor F must lie in [0, 2]");
  if (!(crossover_ratio >= 0.0 && crossover_ratio <= 1.0)) throw InvalidArgument("crossover ratio Cr must lie in [0, 1]");
  if (generations < 1) throw InvalidArgument("generations must be at least 1");
  if (mode == EvolveMode::combined) merge.validate();
}

Population Population::from_members(std::vector<FlatVector> members, std::uint64_t seed) {
  require_same_schema(members);
  Population pop;
  pop.fitness.assign(members.size(), std::nullopt);
  pop.members = std::move(members);
  pop.seed = seed;
  return pop;
}

bool Population::bitwise_equal(const Population& other) const {
  if (members.size() != other.members.size() || generation != other.generation) return false;
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (!members[i].bitwise_equal(other.members[i])) return false;
  }
  return fitness == other.fitness;
}

// ---------------------------------------------------------------------------

FlatVector mutate(const Population& pop, std::size_t i, double scale_factor, CounterRng& rng, std::size_t* r1_out,
                  std::size_t* r2_out) {
  const std::size_t n = pop.size();
  if (n < 3) throw InvalidArgument("population too small: mutation needs at least 3 members, have " + std::to_string(n));
  if (i >= n) throw InvalidArgument("member index out of range");
  std::size_t r1 = 0, r2 = 0;
  do {
    r1 = static_cast<std::size_t>(rng.below(n));
  } while (r1 == i);
  do {
    r2 = static_cast<std::size_t>(rng.below(n));
  } while (r2 == i || r2 == r1);
  if (r1_out) *r1_out = r1;
  if (r2_out) *r2_out = r2;

  const FlatVector& base = pop.members[i];
  if (scale_factor == 0.0) return base;
  FlatVector out(base.schema());
  kernels::diff_axpy(static_cast<float>(scale_factor), base.values(), pop.members[r1].values(),
                     pop.members[r2].values(), out.values());
  return out;
}

FlatVector crossover(const FlatVector& parent, const FlatVector& mutant, double crossover_ratio, CounterRng& rng) {
  require_same_schema(parent, mutant);
  std::vector<std::uint8_t> take(parent.size());
  for (auto& t : take) t = rng.uniform01() <= crossover_ratio ? 1 : 0;
  FlatVector out(parent.schema());
  kernels::blend(take, parent.values(), mutant.values(), out.values());
  return out;
}

CounterRng member_stream(std::uint64_t seed, std::uint64_t generation, std::size_t i) {
  return CounterRng::stream(seed, generation, i);
}

FlatVector make_offspring(const Population& pop, std::size_t i, const EvolveConfig& cfg) {
  CounterRng rng = member_stream(pop.seed, pop.generation, i);
  const FlatVector mutant = mutate(pop, i, cfg.scale_factor, rng);
  return crossover(pop.members[i], mutant, cfg.crossover_ratio, rng);
}

// ---------------------------------------------------------------------------
// Combined-mode merging

namespace {

bool needs_fisher(const EvolveConfig& cfg) { return cfg.merge.method == MergeMethod::fisher; }
bool needs_grams(const EvolveConfig& cfg) { return cfg.merge.method == MergeMethod::regmean; }

// Aux statistics for every member of a population, computed once.
struct MemberAux {
  std::vector<FisherState> fishers;
  std::vector<GramState> grams;
};

MemberAux compute_member_aux(std::span<const FlatVector> members, const EvolveConfig& cfg, const MergeContext& ctx) {
  MemberAux aux;
  if (!needs_fisher(cfg) && !needs_grams(cfg)) return aux;
  if (!ctx.aux) throw MissingAux(to_string(cfg.merge.method) + " merging needs an aux provider");
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (needs_fisher(cfg)) aux.fishers.push_back(ctx.aux->fisher(members[i], i));
    if (needs_grams(cfg)) aux.grams.push_back(ctx.aux->grams(members[i], i));
  }
  return aux;
}

FlatVector merge_with_aux(std::span<const FlatVector> members, const MemberAux& aux, const EvolveConfig& cfg,
                          Evaluator& evaluator, const MergeContext& ctx) {
  MergeAux merge_aux;
  merge_aux.fishers = aux.fishers;
  merge_aux.grams = aux.grams;
  merge_aux.theta_pre = ctx.theta_pre;
  merge_aux.dev_score = [&evaluator](const FlatVector& w) { return evaluator.evaluate(w, Split::dev).score; };
  return merge(members, cfg.merge, merge_aux);
}

// Score of the population with `candidate` placed at `slot`; `aux` describes the
// population as it stands and is patched for the slot.
double combined_score(const FlatVector& candidate, std::span<const FlatVector> members, std::size_t slot,
                      const MemberAux& aux, const EvolveConfig& cfg, Evaluator& evaluator, const MergeContext& ctx) {
  std::vector<FlatVector> trial(members.begin(), members.end());
  trial[slot] = candidate;
  MemberAux patched = aux;
  if (needs_fisher(cfg)) patched.fishers[slot] = ctx.aux->fisher(candidate, slot);
  if (needs_grams(cfg)) patched.grams[slot] = ctx.aux->grams(candidate, slot);
  return evaluator.evaluate(merge_with_aux(trial, patched, cfg, evaluator, ctx), Split::dev).score;
}

double score_with_aux(const FlatVector& candidate, const Population& pop, std::size_t slot, const MemberAux& aux,
                      const EvolveConfig& cfg, Evaluator& evaluator, const MergeContext& ctx) {
  if (cfg.mode == EvolveMode::simple) return evaluator.evaluate(candidate, Split::dev).score;
  return combined_score(candidate, pop.members, slot, aux, cfg, evaluator, ctx);
}

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now().time_since_epoch()).count();
}

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::size_t worker_count(const EvolveConfig& cfg, Evaluator& evaluator, std::size_t jobs) {
  std::size_t w = std::max<std::size_t>(1, evaluator.info().capacity);
  if (cfg.max_workers > 0) w = std::min(w, cfg.max_workers);
  return std::min(w, std::max<std::size_t>(1, jobs));
}

// Runs job(i) for i in [0, n) on up to `workers` threads. Rethrows the failure
// of the lowest failing index as EvaluationError.
template <typename Job>
void run_indexed(std::size_t n, std::size_t workers, Job&& job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(worker);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const EvaluationError&) {
      throw;
    } catch (const std::exception& e) {
      throw EvaluationError(i, e.what());
    }
  }
}

void summarize(const Population& pop, double& best, double& mean) {
  best = -std::numeric_limits<double>::infinity();
  mean = 0.0;
  for (const auto& f : pop.fitness) {
    best = std::max(best, *f);
    mean += *f;
  }
  mean /= static_cast<double>(pop.size());
}

void score_parents(Population& pop, const EvolveConfig& cfg, Evaluator& evaluator, const MergeContext& ctx,
                   GenerationRecord* record) {
  const bool missing = std::any_of(pop.fitness.begin(), pop.fitness.end(), [](const auto& f) { return !f; });
  if (!missing) return;
  const auto start = Clock::now();
  if (cfg.mode == EvolveMode::combined) {
    double score = 0.0;
    try {
      score = evaluator.evaluate(merge_population(pop.members, cfg, evaluator, ctx), Split::dev).score;
    } catch (const EvaluationError&) {
      throw;
    } catch (const std::exception& e) {
      throw EvaluationError(0, e.what());
    }
    for (auto& f : pop.fitness) {
      if (!f) f = score;
    }
  } else {
    std::vector<double> scores(pop.size());
    run_indexed(pop.size(), worker_count(cfg, evaluator, pop.size()), [&](std::size_t i) {
      if (!pop.fitness[i]) scores[i] = evaluator.evaluate(pop.members[i], Split::dev).score;
    });
    for (std::size_t i = 0; i < pop.size(); ++i) {
      if (!pop.fitness[i]) pop.fitness[i] = scores[i];
    }
  }
  if (record) record->t_eval_ms += ms_since(start);
}

}  // namespace

FlatVector merge_population(std::span<const FlatVector> members, const EvolveConfig& cfg, Evaluator& evaluator,
                            const MergeContext& ctx) {
  return merge_with_aux(members, compute_member_aux(members, cfg, ctx), cfg, evaluator, ctx);
}

double score_candidate(const FlatVector& candidate, const Population& pop, std::size_t slot, const EvolveConfig& cfg,
                       Evaluator& evaluator, const MergeContext& ctx) {
  if (slot >= pop.size()) throw InvalidArgument("slot out of range");
  require_same_schema(candidate, pop.members[slot]);
  try {
    const MemberAux aux = cfg.mode == EvolveMode::combined ? compute_member_aux(pop.members, cfg, ctx) : MemberAux{};
    return score_with_aux(candidate, pop, slot, aux, cfg, evaluator, ctx);
  } catch (const EvaluationError&) {
    throw;
  } catch (const std::exception& e) {
    throw EvaluationError(slot, e.what());
  }
}

std::pair<Population, GenerationRecord> step_generation(const Population& input, const EvolveConfig& cfg,
                                                        Evaluator& evaluator, const MergeContext& ctx) {
  cfg.validate();
  if (input.size() < 3) throw InvalidArgument("population too small: evolution needs at least 3 members");
  Population pop = input;
  GenerationRecord record;
  record.generation = pop.generation + 1;
  score_parents(pop, cfg, evaluator, ctx, &record);

  const std::size_t n = pop.size();
  std::vector<EvalInterval> intervals(n);

  if (cfg.update == UpdateSemantics::synchronous) {
    const auto t0 = Clock::now();
    std::vector<FlatVector> offspring;
    offspring.reserve(n);
    for (std::size_t i = 0; i < n; ++i) offspring.push_back(make_offspring(pop, i, cfg));
    record.t_mutate_ms += ms_since(t0);

    const auto t1 = Clock::now();
    MemberAux aux;
    std::vector<double> scores(n);
    try {
      if (cfg.mode == EvolveMode::combined) aux = compute_member_aux(pop.members, cfg, ctx);
    } catch (const std::exception& e) {
      throw EvaluationError(0, e.what());
    }
    run_indexed(n, worker_count(cfg, evaluator, n), [&](std::size_t i) {
      intervals[i].start_ns = now_ns();
      scores[i] = score_with_aux(offspring[i], pop, i, aux, cfg, evaluator, ctx);
      intervals[i].end_ns = now_ns();
    });
    record.t_eval_ms += ms_since(t1);

    for (std::size_t i = 0; i < n; ++i) {
      if (scores[i] > *pop.fitness[i]) {
        pop.members[i] = std::move(offspring[i]);
        pop.fitness[i] = scores[i];
        ++record.replacements;
      }
    }
  } else {
    MemberAux aux;
    for (std::size_t i = 0; i < n; ++i) {
      const auto t0 = Clock::now();
      FlatVector child = make_offspring(pop, i, cfg);
      record.t_mutate_ms += ms_since(t0);

      const auto t1 = Clock::now();
      double score = 0.0;
      try {
        if (cfg.mode == EvolveMode::combined && i == 0) aux = compute_member_aux(pop.members, cfg, ctx);
        intervals[i].start_ns = now_ns();
        score = score_with_aux(child, pop, i, aux, cfg, evaluator, ctx);
        intervals[i].end_ns = now_ns();
      } catch (const std::exception& e) {
        throw EvaluationError(i, e.what());
      }
      record.t_eval_ms += ms_since(t1);
      if (score > *pop.fitness[i]) {
        pop.members[i] = std::move(child);
        pop.fitness[i] = score;
        ++record.replacements;
        if (cfg.mode == EvolveMode::combined) {
          if (needs_fisher(cfg)) aux.fishers[i] = ctx.aux->fisher(pop.members[i], i);
          if (needs_grams(cfg)) aux.grams[i] = ctx.aux->grams(pop.members[i], i);
        }
      }
    }
  }

  record.eval_intervals = std::move(intervals);
  summarize(pop, record.best, record.mean);
  ++pop.generation;
  return {std::move(pop), std::move(record)};
}

std::size_t best_member(const Population& pop) {
  if (pop.size() == 0) throw InvalidArgument("empty population");
  std::size_t best = 0;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    if (!pop.fitness[i]) throw InvalidArgument("member " + std::to_string(i) + " has no fitness");
    if (*pop.fitness[i] > *pop.fitness[best]) best = i;
  }
  return best;
}

EvolveResult evolve(const Population& input, const EvolveConfig& cfg, Evaluator& evaluator, const MergeContext& ctx) {
  cfg.validate();
  if (input.size() < 3) throw InvalidArgument("population too small: evolution needs at least 3 members");
  EvolveResult result;
  Population pop = input;
  score_parents(pop, cfg, evaluator, ctx, nullptr);
  summarize(pop, result.trace.initial_best, result.trace.initial_mean);

  for (std::size_t g = 0; g < cfg.generations; ++g) {
    auto [next, record] = step_generation(pop, cfg, evaluator, ctx);
    pop = std::move(next);
    result.trace.generations.push_back(std::move(record));
  }

  result.best_index = best_member(pop);
  result.best = cfg.mode == EvolveMode::simple ? pop.members[result.best_index]
                                               : merge_population(pop.members, cfg, evaluator, ctx);
  result.population = std::move(pop);
  return result;
}

std::string EvolveTrace::to_csv() const {
  std::string out = "generation,best,mean,replacements,t_mutate_ms,t_eval_ms\n";
  char buf[256];
  const std::uint64_t first = generations.empty() ? 1 : generations.front().generation;
  std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,0,0,0\n", static_cast<unsigned long long>(first - 1),
                initial_best, initial_mean);
  out += buf;
  for (const auto& r : generations) {
    std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%zu,%.6f,%.6f\n", static_cast<unsigned long long>(r.generation),
                  r.best, r.mean, r.replacements, r.t_mutate_ms, r.t_eval_ms);
    out += buf;
  }
  return out;
}

}  // namespace mevo
