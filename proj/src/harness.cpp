#include "mevo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"
#include "mevo/rng.hpp"

namespace mevo {

using json = nlohmann::json;

namespace {

TrainHyper hyper_from_json(const json& j, TrainHyper h) {
  h.lr = j.value("lr", h.lr);
  h.epochs = j.value("epochs", h.epochs);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.seed = j.value("seed", h.seed);
  return h;
}

json hyper_to_json(const TrainHyper& h) {
  return {{"lr", h.lr}, {"epochs", h.epochs}, {"batch_size", h.batch_size}, {"seed", h.seed}};
}

std::uint64_t scoped(std::uint64_t base, const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.seed_scope == "all" ? mix64(base ^ mix64(seed + 0x5eed)) : base;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (c == '+' || c == '/' || c == ' ') c = '_';
  }
  return s;
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (methods.empty()) throw InvalidArgument("config lists no methods");
  if (seeds.empty()) throw InvalidArgument("config lists no seeds");
  if (seed_scope != "evolution" && seed_scope != "all") throw InvalidArgument("seed_scope must be 'evolution' or 'all'");
  if (!(dev_fraction > 0.0 && dev_fraction <= 1.0)) throw InvalidArgument("dev_fraction must lie in (0, 1]");
  model.validate();
  domain.validate();
  if (model.input_dim() != 2) throw InvalidArgument("synthetic domains have 2 input features");
  if (model.classes() != domain.classes) throw InvalidArgument("model output width must equal the class count");
  for (const auto& m : methods) MethodSpec::parse(m);
  evolve.validate();
  merge_defaults.validate();
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const json& d = j["dataset"];
      c.n_domains = d.value("n_domains", c.n_domains);
      c.domain.classes = d.value("classes", c.domain.classes);
      c.domain.radius = d.value("radius", c.domain.radius);
      c.domain.noise = d.value("noise", c.domain.noise);
      c.domain.train = d.value("train", c.domain.train);
      if (d.contains("dev")) c.domain.dev = d["dev"].get<std::size_t>();
      c.domain.test = d.value("test", c.domain.test);
      c.domain.n_ood = d.value("n_ood", c.domain.n_ood);
      c.data_seed = d.value("seed", c.data_seed);
      if (d.contains("partition")) {
        const json& p = d["partition"];
        c.partition.non_iid = p.value("mode", std::string("domains")) == "non_iid";
        c.partition.n_parts = p.value("n_parts", c.partition.n_parts);
        c.partition.per_part = p.value("per_part", c.partition.per_part);
        c.partition.skew = p.value("skew", c.partition.skew);
      }
    }
    if (j.contains("model")) {
      c.model.layer_dims = j["model"].value("layer_dims", c.model.layer_dims);
      c.model.activation = activation_from_string(j["model"].value("activation", std::string("tanh")));
      c.init_seed = j["model"].value("init_seed", c.init_seed);
    }
    if (j.contains("training")) {
      if (j["training"].contains("pre")) c.training.pre = hyper_from_json(j["training"]["pre"], c.training.pre);
      if (j["training"].contains("finetune")) {
        c.training.finetune = hyper_from_json(j["training"]["finetune"], c.training.finetune);
      }
    }
    if (j.contains("population")) {
      const json& p = j["population"];
      if (p.value("source", std::string("train")) == "checkpoints") {
        c.pre_checkpoint = p.at("pre").get<std::string>();
        for (const auto& m : p.at("members")) c.member_checkpoints.emplace_back(m.get<std::string>());
      }
    }
    if (j.contains("evolve")) {
      const json& e = j["evolve"];
      c.evolve.scale_factor = e.value("F", c.evolve.scale_factor);
      c.evolve.crossover_ratio = e.value("Cr", c.evolve.crossover_ratio);
      c.evolve.generations = e.value("generations", c.evolve.generations);
      c.evolve.update = update_semantics_from_string(e.value("update", to_string(c.evolve.update)));
      c.evolve.max_workers = e.value("max_workers", c.evolve.max_workers);
    }
    if (j.contains("merge")) {
      const json& m = j["merge"];
      c.merge_defaults.alpha = m.value("alpha", c.merge_defaults.alpha);
      c.merge_defaults.trim_fraction = m.value("k", c.merge_defaults.trim_fraction);
      c.merge_defaults.lambda = m.value("lambda", c.merge_defaults.lambda);
      c.merge_defaults.interp = m.value("interp", c.merge_defaults.interp);
      c.merge_defaults.ties_per_tensor = m.value("ties_per_tensor", false);
      c.fisher_draws = m.value("fisher_draws", c.fisher_draws);
      c.fisher_labels = m.value("fisher_labels", std::string("sampled")) == "empirical" ? FisherLabels::empirical
                                                                                       : FisherLabels::sampled;
    }
    c.methods = j.value("methods", c.methods);
    c.metric = metric_from_string(j.value("metric", std::string("accuracy")));
    c.seeds = j.value("seeds", c.seeds);
    c.seed_scope = j.value("seed_scope", c.seed_scope);
    c.pairwise = j.value("pairwise", c.pairwise);
    c.dev_fraction = j.value("dev_fraction", c.dev_fraction);
    c.out_dir = j.value("out", c.out_dir.string());
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad config: ") + e.what());
  }
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json j;
  j["dataset"] = {{"n_domains", n_domains},   {"classes", domain.classes}, {"radius", domain.radius},
                  {"noise", domain.noise},    {"train", domain.train},     {"dev", domain.dev_count()},
                  {"test", domain.test},      {"n_ood", domain.n_ood},     {"seed", data_seed},
                  {"partition",
                   {{"mode", partition.non_iid ? "non_iid" : "domains"},
                    {"n_parts", partition.n_parts},
                    {"per_part", partition.per_part},
                    {"skew", partition.skew}}}};
  j["model"] = {{"layer_dims", model.layer_dims}, {"activation", to_string(model.activation)}, {"init_seed", init_seed}};
  j["training"] = {{"pre", hyper_to_json(training.pre)}, {"finetune", hyper_to_json(training.finetune)}};
  if (pre_checkpoint) {
    json members = json::array();
    for (const auto& m : member_checkpoints) members.push_back(m.string());
    j["population"] = {{"source", "checkpoints"}, {"pre", pre_checkpoint->string()}, {"members", members}};
  } else {
    j["population"] = {{"source", "train"}};
  }
  j["evolve"] = {{"F", evolve.scale_factor},
                 {"Cr", evolve.crossover_ratio},
                 {"generations", evolve.generations},
                 {"update", to_string(evolve.update)},
                 {"max_workers", evolve.max_workers}};
  j["merge"] = {{"alpha", merge_defaults.alpha},
                {"k", merge_defaults.trim_fraction},
                {"lambda", merge_defaults.lambda},
                {"interp", merge_defaults.interp},
                {"ties_per_tensor", merge_defaults.ties_per_tensor},
                {"fisher_draws", fisher_draws},
                {"fisher_labels", fisher_labels == FisherLabels::sampled ? "sampled" : "empirical"}};
  j["methods"] = methods;
  j["metric"] = to_string(metric);
  j["seeds"] = seeds;
  j["seed_scope"] = seed_scope;
  j["pairwise"] = pairwise;
  j["dev_fraction"] = dev_fraction;
  j["out"] = out_dir.string();
  return j;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Data and population

SplitSet build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const std::size_t n = cfg.partition.non_iid ? 1 : cfg.n_domains;
  SplitSet data = make_domains(n, cfg.domain, scoped(cfg.data_seed, cfg, seed));
  if (cfg.dev_fraction < 1.0) data = dev_fraction(data, cfg.dev_fraction);
  return data;
}

namespace {

struct TrainedPopulation {
  FlatVector pre;
  std::vector<FlatVector> members;
  std::vector<Batch> member_train;
};

TrainedPopulation train_population(const ExperimentConfig& cfg, const SplitSet& data, std::uint64_t seed) {
  TrainedPopulation out;
  const FlatVector init = init_weights(cfg.model, scoped(cfg.init_seed, cfg, seed));
  TrainHyper pre = cfg.training.pre;
  pre.seed = scoped(pre.seed, cfg, seed);

  if (cfg.partition.non_iid) {
    const Batch& source = data.domains[0].train;
    const auto props = skew_proportions(cfg.partition.n_parts, cfg.domain.classes, cfg.partition.skew);
    out.member_train = non_iid_partition(source, cfg.domain.classes, cfg.partition.per_part, props,
                                         scoped(cfg.data_seed + 1, cfg, seed));
  } else {
    for (const auto& d : data.domains) out.member_train.push_back(d.train);
  }
  out.pre = train(cfg.model, init, Batch::concat(out.member_train), pre);
  for (std::size_t i = 0; i < out.member_train.size(); ++i) {
    TrainHyper ft = cfg.training.finetune;
    ft.seed = scoped(ft.seed, cfg, seed) + 1 + i;
    out.members.push_back(train(cfg.model, out.pre, out.member_train[i], ft));
  }
  return out;
}

FlatVector load_weights(const std::filesystem::path& path, const MlpSpec& spec) {
  const TensorMap map = load_checkpoint(path);
  return flatten(map, spec.schema());
}

}  // namespace

Workspace build_workspace(const ExperimentConfig& cfg, std::uint64_t seed) {
  Workspace ws;
  ws.data = build_data(cfg, seed);
  if (cfg.pre_checkpoint) {
    ws.theta_pre = load_weights(*cfg.pre_checkpoint, cfg.model);
    for (const auto& p : cfg.member_checkpoints) ws.members.push_back(load_weights(p, cfg.model));
  } else {
    TrainedPopulation pop = train_population(cfg, ws.data, seed);
    ws.theta_pre = std::move(pop.pre);
    ws.members = std::move(pop.members);
  }
  if (cfg.partition.non_iid) {
    ws.slot_dev.assign(ws.members.size(), ws.data.domains[0].dev);
    ws.slot_test.push_back(ws.data.domains[0].test);
    ws.column_names.push_back("d0");
  } else {
    if (ws.members.size() != ws.data.domains.size()) {
      throw InvalidArgument("population size must equal the number of domains");
    }
    for (const auto& d : ws.data.domains) {
      ws.slot_dev.push_back(d.dev);
      ws.slot_test.push_back(d.test);
      ws.column_names.push_back("d" + std::to_string(d.id));
    }
  }
  return ws;
}

PopulationFiles build_population(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const SplitSet data = build_data(cfg, cfg.seeds.front());
  const TrainedPopulation pop = train_population(cfg, data, cfg.seeds.front());
  InProcessEvaluator dev_eval(cfg.model, data.dev_batches(), data.test_batches(), cfg.metric);

  PopulationFiles files;
  json manifest;
  manifest["config"] = cfg.to_json();
  manifest["schema_hash"] = hex64(pop.pre.schema()->hash());
  auto write = [&](const FlatVector& w, const std::string& name, json extra) {
    TensorMap map = unflatten(w);
    map.metadata() = cfg.model.to_metadata();
    const auto path = out_dir / name;
    save_checkpoint(map, path);
    const auto bytes = encode_checkpoint(map);
    extra["file"] = name;
    extra["fnv1a"] = hex64(fnv1a(bytes));
    manifest["checkpoints"].push_back(extra);
    return path;
  };
  files.pre = write(pop.pre, "pre.safetensors", {{"role", "pre"}});
  for (std::size_t i = 0; i < pop.members.size(); ++i) {
    json extra = {{"role", "member"}, {"slot", i}};
    if (!cfg.partition.non_iid) {
      extra["own_domain_dev"] = accuracy(cfg.model, pop.members[i], data.domains[i].dev);
      extra["pre_own_domain_dev"] = accuracy(cfg.model, pop.pre, data.domains[i].dev);
    }
    files.members.push_back(write(pop.members[i], "model_" + std::to_string(i) + ".safetensors", extra));
  }
  files.manifest = out_dir / "population.json";
  write_text(files.manifest, manifest.dump(2) + "\n");
  return files;
}

// ---------------------------------------------------------------------------
// Aux provider

MlpAuxProvider::MlpAuxProvider(MlpSpec spec, std::vector<Batch> slot_batches, FisherLabels labels, std::size_t draws,
                               std::uint64_t seed)
    : spec_(std::move(spec)), batches_(std::move(slot_batches)), labels_(labels), draws_(draws), seed_(seed) {}

FisherState MlpAuxProvider::fisher(const FlatVector& weights, std::size_t slot) const {
  if (slot >= batches_.size()) throw InvalidArgument("no aux data for slot " + std::to_string(slot));
  return fisher_diagonal(spec_, weights, batches_[slot], labels_, draws_, mix64(seed_ + slot));
}

GramState MlpAuxProvider::grams(const FlatVector& weights, std::size_t slot) const {
  if (slot >= batches_.size()) throw InvalidArgument("no aux data for slot " + std::to_string(slot));
  return capture_grams(spec_, weights, batches_[slot]);
}

// ---------------------------------------------------------------------------
// Methods

MethodSpec MethodSpec::parse(const std::string& name) {
  MethodSpec m;
  m.name = name;
  if (name == "ensemble") {
    m.ensemble = true;
  } else if (name == "evolver") {
    m.evolver = true;
  } else if (name.rfind("evolver+", 0) == 0) {
    m.evolver = true;
    m.merge = merge_method_from_string(name.substr(8));
  } else {
    m.merge = merge_method_from_string(name);
  }
  return m;
}

CellOutcome run_method(const MethodSpec& method, std::span<const FlatVector> members, const FlatVector& theta_pre,
                       const ExperimentConfig& cfg, std::uint64_t seed, Evaluator& fitness, const AuxProvider& aux) {
  CellOutcome out;
  try {
    if (method.ensemble) {
      out.ensemble.assign(members.begin(), members.end());
      return out;
    }
    if (method.evolver) {
      EvolveConfig ec = cfg.evolve;
      ec.seed = seed;
      if (method.merge) {
        ec.mode = EvolveMode::combined;
        ec.merge = cfg.merge_defaults;
        ec.merge.method = *method.merge;
      }
      const MergeContext ctx{&aux, &theta_pre};
      std::vector<FlatVector> init(members.begin(), members.end());
      EvolveResult r = evolve(Population::from_members(std::move(init), seed), ec, fitness, ctx);
      out.merged = r.best;
      out.evolve = std::move(r);
      return out;
    }
    MergeSpec spec = cfg.merge_defaults;
    spec.method = *method.merge;
    if (spec.method == MergeMethod::pairwise_interp && members.size() == 2) {
      const auto grid = default_coefficient_grid();
      spec.interp = pairwise_interp_search(members[0], members[1], grid, [&fitness](const FlatVector& w) {
                      return fitness.evaluate(w, Split::dev).score;
                    }).best_value;
    }
    std::vector<FisherState> fishers;
    std::vector<GramState> grams;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (spec.method == MergeMethod::fisher) fishers.push_back(aux.fisher(members[i], i));
      if (spec.method == MergeMethod::regmean) grams.push_back(aux.grams(members[i], i));
    }
    MergeAux ma;
    ma.fishers = fishers;
    ma.grams = grams;
    ma.theta_pre = &theta_pre;
    ma.dev_score = [&fitness](const FlatVector& w) { return fitness.evaluate(w, Split::dev).score; };
    out.merged = merge(members, spec, ma);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

std::vector<double> ReportTable::mean(std::size_t row) const {
  std::vector<double> out(columns.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const ReportCell& cell : cells[row]) {
      if (cell.error.empty() && !std::isnan(cell.columns[c])) {
        sum += cell.columns[c];
        ++n;
      }
    }
    if (n) out[c] = sum / static_cast<double>(n);
  }
  return out;
}

std::size_t ReportTable::row_index(const std::string& name) const {
  auto it = std::find(rows.begin(), rows.end(), name);
  if (it == rows.end()) throw InvalidArgument("no report row '" + name + "'");
  return static_cast<std::size_t>(it - rows.begin());
}

std::string ReportTable::to_csv() const {
  std::string out = "method,seed";
  for (const auto& c : columns) out += "," + c;
  out += ",error\n";
  char buf[64];
  auto emit = [&](const std::string& row, const std::string& seed, const std::vector<double>& vals,
                  const std::string& err) {
    out += row + "," + seed;
    for (double v : vals) {
      if (std::isnan(v)) {
        out += ",";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.6f", v);
        out += buf;
      }
    }
    std::string e = err;
    std::replace(e.begin(), e.end(), ',', ';');
    std::replace(e.begin(), e.end(), '\n', ' ');
    out += "," + e + "\n";
  };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const ReportCell& cell = cells[r][s];
      const std::vector<double> vals =
          cell.error.empty() ? cell.columns : std::vector<double>(columns.size(), std::numeric_limits<double>::quiet_NaN());
      emit(rows[r], std::to_string(seeds[s]), vals, cell.error);
    }
    emit(rows[r], "mean", mean(r), "");
  }
  return out;
}

json ReportTable::to_json() const {
  json j;
  j["columns"] = columns;
  j["seeds"] = seeds;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    json row;
    row["method"] = rows[r];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const ReportCell& cell = cells[r][s];
      json c = {{"seed", seeds[s]}};
      if (cell.error.empty()) {
        c["values"] = cell.columns;
      } else {
        c["error"] = cell.error;
      }
      row["per_seed"].push_back(c);
    }
    json m = json::array();
    for (double v : mean(r)) m.push_back(std::isnan(v) ? json(nullptr) : json(v));
    row["mean"] = m;
    j["rows"].push_back(row);
  }
  return j;
}

namespace {

double metric_on(const ExperimentConfig& cfg, const FlatVector& w, const Batch& b) {
  return cfg.metric == Metric::accuracy ? accuracy(cfg.model, w, b) : macro_f1(cfg.model, w, b);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Columns for one model (or ensemble) restricted to the slots in `domains`.
std::vector<double> score_columns(const ExperimentConfig& cfg, const Workspace& ws, const std::vector<std::size_t>& domains,
                                  const CellOutcome& cell) {
  std::vector<double> cols(ws.column_names.size() + 2, std::numeric_limits<double>::quiet_NaN());
  auto score = [&](const Batch& b) {
    if (!cell.ensemble.empty()) return ensemble_accuracy(cfg.model, cell.ensemble, b);
    return metric_on(cfg, *cell.merged, b);
  };
  std::vector<double> in;
  for (std::size_t d : domains) {
    if (d >= ws.slot_test.size()) continue;
    cols[d] = score(ws.slot_test[d]);
    in.push_back(cols[d]);
  }
  if (cfg.partition.non_iid) {
    cols[0] = score(ws.slot_test[0]);
    in = {cols[0]};
  }
  cols[cols.size() - 2] = mean_of(in);
  std::vector<double> ood;
  for (const Batch& b : ws.data.ood_batches()) ood.push_back(score(b));
  cols[cols.size() - 1] = mean_of(ood);
  return cols;
}

std::vector<std::vector<std::size_t>> member_groups(const ExperimentConfig& cfg, std::size_t n) {
  std::vector<std::vector<std::size_t>> groups;
  if (!cfg.pairwise) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    groups.push_back(all);
    return groups;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) groups.push_back({i, j});
  }
  return groups;
}

// Averages per-group column vectors: a column is averaged over the groups that produced it.
std::vector<double> average_columns(const std::vector<std::vector<double>>& per_group) {
  std::vector<double> out(per_group.front().size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < out.size(); ++c) {
    std::vector<double> vals;
    for (const auto& g : per_group) {
      if (!std::isnan(g[c])) vals.push_back(g[c]);
    }
    out[c] = mean_of(vals);
  }
  return out;
}

}  // namespace

ReportTable run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& options) {
  cfg.validate();
  ReportTable table;
  table.seeds = cfg.seeds;
  table.rows = {"avg_individual", "best_individual"};
  for (const auto& m : cfg.methods) table.rows.push_back(m);
  table.cells.assign(table.rows.size(), std::vector<ReportCell>(cfg.seeds.size()));
  if (options.write_files) std::filesystem::create_directories(cfg.out_dir);

  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    const std::uint64_t seed = cfg.seeds[s];
    Workspace ws;
    try {
      ws = build_workspace(cfg, seed);
    } catch (const std::exception& e) {
      for (auto& row : table.cells) row[s].error = std::string("population: ") + e.what();
      continue;
    }
    if (table.columns.empty()) {
      table.columns = ws.column_names;
      table.columns.push_back("in_domain");
      table.columns.push_back("ood");
    }
    const auto groups = member_groups(cfg, ws.members.size());

    // Individual baselines.
    {
      std::vector<std::vector<double>> per_member;
      for (std::size_t i = 0; i < ws.members.size(); ++i) {
        CellOutcome single;
        single.merged = ws.members[i];
        std::vector<std::size_t> all(ws.slot_test.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        per_member.push_back(score_columns(cfg, ws, all, single));
      }
      table.cells[0][s].columns = average_columns(per_member);
      const std::size_t in_col = per_member.front().size() - 2;
      std::size_t best = 0;
      for (std::size_t i = 1; i < per_member.size(); ++i) {
        if (per_member[i][in_col] > per_member[best][in_col]) best = i;
      }
      table.cells[1][s].columns = per_member[best];
    }

    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
      const MethodSpec method = MethodSpec::parse(cfg.methods[m]);
      ReportCell& cell = table.cells[2 + m][s];
      std::vector<std::vector<double>> per_group;
      for (const auto& group : groups) {
        std::vector<FlatVector> members;
        std::vector<Batch> devs, tests, aux_batches;
        for (std::size_t i : group) {
          members.push_back(ws.members[i]);
          aux_batches.push_back(ws.slot_dev[i]);
        }
        if (cfg.partition.non_iid) {
          devs = {ws.data.domains[0].dev};
        } else {
          for (std::size_t i : group) devs.push_back(ws.slot_dev[i]);
        }
        MlpAuxProvider aux(cfg.model, aux_batches, cfg.fisher_labels, cfg.fisher_draws, mix64(seed ^ 0xf15e));

        std::unique_ptr<Evaluator> fitness;
        try {
          if (options.evaluator_command) {
            if (cfg.pairwise) throw InvalidArgument("external evaluators score the full population only");
            std::vector<std::string> argv = *options.evaluator_command;
            for (auto& a : argv) {
              if (auto pos = a.find("{seed}"); pos != std::string::npos) a.replace(pos, 6, std::to_string(seed));
            }
            SessionOptions so;
            so.checkpoint_metadata = cfg.model.to_metadata();
            fitness = std::make_unique<ExternalEvaluator>(argv, so);
          } else {
            fitness = std::make_unique<InProcessEvaluator>(cfg.model, devs, tests, cfg.metric);
          }
        } catch (const std::exception& e) {
          cell.error = e.what();
          break;
        }

        const CellOutcome outcome = run_method(method, members, ws.theta_pre, cfg, seed, *fitness, aux);
        if (!outcome.error.empty()) {
          cell.error = outcome.error;
          break;
        }
        try {
          per_group.push_back(score_columns(cfg, ws, group, outcome));
        } catch (const std::exception& e) {
          cell.error = e.what();
          break;
        }
        if (options.write_files && outcome.evolve) {
          std::string stem = file_safe(cfg.methods[m]) + "_seed" + std::to_string(seed);
          if (cfg.pairwise) stem += "_pair" + std::to_string(group[0]) + std::to_string(group[1]);
          write_text(cfg.out_dir / ("trace_" + stem + ".csv"), outcome.evolve->trace.to_csv());
          EvolveConfig ec = cfg.evolve;
          ec.seed = seed;
          write_text(cfg.out_dir / ("run_" + stem + ".json"),
                     run_manifest(cfg, ec, *ws.theta_pre.schema(), fitness->info()).dump(2) + "\n");
        }
      }
      if (cell.error.empty()) cell.columns = average_columns(per_group);
    }
  }

  if (options.write_files) {
    write_text(cfg.out_dir / "report.csv", table.to_csv());
    json j = table.to_json();
    j["config"] = cfg.to_json();
    j["kernels"] = std::string(kernels::active_name());
    write_text(cfg.out_dir / "report.json", j.dump(2) + "\n");
  }
  return table;
}

// ---------------------------------------------------------------------------

TimeModel time_report(const EvolveTrace& trace, std::size_t dev_length, std::size_t population, std::size_t generations,
                      std::optional<double> per_sample_s) {
  TimeModel tm;
  if (generations == 0 || population == 0) return tm;
  double mutate_ms = 0.0, eval_ms = 0.0;
  for (const auto& g : trace.generations) {
    mutate_ms += g.t_mutate_ms;
    eval_ms += g.t_eval_ms;
  }
  tm.measured_s = (mutate_ms + eval_ms) / 1000.0;
  const std::size_t g_measured = std::max<std::size_t>(1, trace.generations.size());
  tm.t1_s = mutate_ms / 1000.0 / static_cast<double>(g_measured * population);
  if (per_sample_s) {
    tm.t2_s = *per_sample_s;
  } else if (!trace.generations.empty() && dev_length > 0) {
    tm.t2_s = trace.generations.front().t_eval_ms / 1000.0 / static_cast<double>(population * dev_length);
  }
  tm.predicted_s = static_cast<double>(generations * population) *
                   (tm.t1_s + static_cast<double>(dev_length) * tm.t2_s);
  tm.ratio = tm.predicted_s > 0.0 ? tm.measured_s / tm.predicted_s : 0.0;
  tm.flagged = tm.predicted_s > 0.0 && (tm.ratio > 2.0 || tm.ratio < 0.5);
  return tm;
}

json run_manifest(const ExperimentConfig& cfg, const EvolveConfig& evolve, const ParamSchema& schema,
                  const EvaluatorInfo& evaluator) {
  json j;
  j["config"] = cfg.to_json();
  j["evolve"] = {{"F", evolve.scale_factor},
                 {"Cr", evolve.crossover_ratio},
                 {"generations", evolve.generations},
                 {"seed", evolve.seed},
                 {"mode", evolve.mode == EvolveMode::simple ? "simple" : "combined"},
                 {"merge_method", to_string(evolve.merge.method)},
                 {"update", to_string(evolve.update)}};
  j["seed"] = evolve.seed;
  j["schema_hash"] = hex64(schema.hash());
  j["evaluator"] = {{"name", evaluator.name}, {"version", evaluator.version}, {"capacity", evaluator.capacity}};
  j["kernels"] = std::string(kernels::active_name());
  return j;
}

}  // namespace mevo
