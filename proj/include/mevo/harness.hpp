#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mevo/datasets.hpp"
#include "mevo/evaluator.hpp"
#include "mevo/evolution.hpp"
#include "mevo/inference.hpp"
#include "mevo/merging.hpp"

namespace mevo {

struct PartitionConfig {
  bool non_iid = false;  // false: one model per domain
  std::size_t n_parts = 2;
  std::size_t per_part = 1000;
  double skew = 3.0;
};

struct TrainingConfig {
  TrainHyper pre{0.1, 5, 32, 0};
  TrainHyper finetune{0.1, 5, 32, 0};
};

struct ExperimentConfig {
  std::size_t n_domains = 5;
  DomainTemplate domain;
  std::uint64_t data_seed = 7;
  PartitionConfig partition;
  MlpSpec model;
  TrainingConfig training;
  std::uint64_t init_seed = 11;

  // Population source: empty checkpoint list means train from this config.
  std::optional<std::filesystem::path> pre_checkpoint;
  std::vector<std::filesystem::path> member_checkpoints;

  EvolveConfig evolve = [] {
    EvolveConfig e;
    e.generations = 60;
    return e;
  }();
  MergeSpec merge_defaults;
  FisherLabels fisher_labels = FisherLabels::sampled;
  std::size_t fisher_draws = 1;

  std::vector<std::string> methods{"simple", "evolver"};
  Metric metric = Metric::accuracy;
  std::vector<std::uint64_t> seeds{1};
  /// "evolution": seeds vary evolution and Fisher sampling only;
  /// "all": seeds also vary data generation and training.
  std::string seed_scope = "all";
  bool pairwise = false;
  double dev_fraction = 1.0;
  std::filesystem::path out_dir = "mevo-out";

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Data, population and evaluators for one seed.
struct Workspace {
  SplitSet data;
  FlatVector theta_pre;
  std::vector<FlatVector> members;
  std::vector<Batch> slot_dev;   // dev data associated with each population slot
  std::vector<Batch> slot_test;  // test data associated with each slot (in-domain columns)
  std::vector<std::string> column_names;
};

/// Generates the data for `seed` (when seed_scope is "all") and trains or
/// loads the population.
Workspace build_workspace(const ExperimentConfig& cfg, std::uint64_t seed);

SplitSet build_data(const ExperimentConfig& cfg, std::uint64_t seed);

struct PopulationFiles {
  std::filesystem::path pre;
  std::vector<std::filesystem::path> members;
  std::filesystem::path manifest;
};

/// Trains theta_pre on pooled data and fine-tunes one member per domain (or
/// partition); writes every checkpoint plus population.json into out_dir.
PopulationFiles build_population(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

/// AuxProvider backed by the MLP engine; slot i uses slot_dev[i].
class MlpAuxProvider final : public AuxProvider {
 public:
  MlpAuxProvider(MlpSpec spec, std::vector<Batch> slot_batches, FisherLabels labels, std::size_t draws,
                 std::uint64_t seed);
  FisherState fisher(const FlatVector& weights, std::size_t slot) const override;
  GramState grams(const FlatVector& weights, std::size_t slot) const override;

 private:
  MlpSpec spec_;
  std::vector<Batch> batches_;
  FisherLabels labels_;
  std::size_t draws_;
  std::uint64_t seed_;
};

/// A method name from the config: a merge method, "ensemble", "evolver"
/// (simple mode) or "evolver+<merge method>" (combined mode).
struct MethodSpec {
  std::string name;
  bool evolver = false;
  bool ensemble = false;
  std::optional<MergeMethod> merge;

  static MethodSpec parse(const std::string& name);
};

struct CellOutcome {
  std::optional<FlatVector> merged;     // absent for ensemble
  std::vector<FlatVector> ensemble;     // members for ensemble
  std::optional<EvolveResult> evolve;
  std::string error;
};

/// Runs one method on a population. Errors are captured, not thrown.
CellOutcome run_method(const MethodSpec& method, std::span<const FlatVector> members, const FlatVector& theta_pre,
                       const ExperimentConfig& cfg, std::uint64_t seed, Evaluator& fitness,
                       const AuxProvider& aux);

struct ReportCell {
  std::vector<double> columns;  // per-domain, in-domain macro, OOD macro
  std::string error;
};

struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::vector<std::uint64_t> seeds;
  // cells[row][seed index]
  std::vector<std::vector<ReportCell>> cells;

  /// Mean over seeds that produced a value; NaN if none.
  std::vector<double> mean(std::size_t row) const;
  std::size_t row_index(const std::string& name) const;
  std::size_t in_domain_column() const { return columns.size() - 2; }
  std::size_t ood_column() const { return columns.size() - 1; }

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct ExperimentOptions {
  std::optional<std::vector<std::string>> evaluator_command;  // external fitness
  bool write_files = true;
};

ReportTable run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& options = {});

struct TimeModel {
  double t1_s = 0.0;           // mutate+crossover per individual
  double t2_s = 0.0;           // inference per dev sample
  double predicted_s = 0.0;    // G * N * (t1 + L * t2)
  double measured_s = 0.0;
  double ratio = 0.0;          // measured / predicted
  bool flagged = false;        // deviation beyond a factor of 2
};

/// When per_sample_s is absent, t2 is estimated from the first generation's
/// evaluation time and the model extrapolates to all G generations.
TimeModel time_report(const EvolveTrace& trace, std::size_t dev_length, std::size_t population, std::size_t generations,
                      std::optional<double> per_sample_s = std::nullopt);

nlohmann::json run_manifest(const ExperimentConfig& cfg, const EvolveConfig& evolve, const ParamSchema& schema,
                            const EvaluatorInfo& evaluator);

std::string hex64(std::uint64_t v);
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

}  // namespace mevo
