#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mevo/error.hpp"
#include "mevo/harness.hpp"
#include "mevo/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mevo;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string evaluator;
  std::optional<std::size_t> generations;
  std::optional<double> scale_factor;
  std::optional<double> crossover;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("--seed-override", c.seed, "run this seed instead of the configured list");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--evaluator", c.evaluator, "external evaluator command; {seed} is substituted");
  app->add_option("--generations", c.generations, "G");
  app->add_option("--scale-factor", c.scale_factor, "F");
  app->add_option("--crossover", c.crossover, "Cr");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::load(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.generations) cfg.evolve.generations = *c.generations;
  if (c.scale_factor) cfg.evolve.scale_factor = *c.scale_factor;
  if (c.crossover) cfg.evolve.crossover_ratio = *c.crossover;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

std::unique_ptr<Evaluator> fitness_for(const ExperimentConfig& cfg, const Common& c, const Workspace& ws,
                                       std::uint64_t seed) {
  if (!c.evaluator.empty()) {
    auto argv = split_command(c.evaluator);
    for (auto& a : argv) {
      if (auto pos = a.find("{seed}"); pos != std::string::npos) a.replace(pos, 6, std::to_string(seed));
    }
    SessionOptions so;
    so.checkpoint_metadata = cfg.model.to_metadata();
    return std::make_unique<ExternalEvaluator>(argv, so);
  }
  return std::make_unique<InProcessEvaluator>(cfg.model, ws.data.dev_batches(), ws.data.test_batches(), cfg.metric);
}

void save_weights(const ExperimentConfig& cfg, const FlatVector& w, const fs::path& path) {
  TensorMap map = unflatten(w);
  map.metadata() = cfg.model.to_metadata();
  save_checkpoint(map, path);
}

MlpAuxProvider aux_for(const ExperimentConfig& cfg, const Workspace& ws, std::uint64_t seed) {
  return MlpAuxProvider(cfg.model, ws.slot_dev, cfg.fisher_labels, cfg.fisher_draws, mix64(seed ^ 0xf15e));
}

int cmd_build_population(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const PopulationFiles files = build_population(cfg, cfg.out_dir);
  std::printf("wrote %zu members and %s\n", files.members.size(), files.manifest.string().c_str());
  return 0;
}

int cmd_evolve(const Common& c, const std::string& method_name) {
  const ExperimentConfig cfg = load(c);
  const std::uint64_t seed = cfg.seeds.front();
  const Workspace ws = build_workspace(cfg, seed);
  auto fitness = fitness_for(cfg, c, ws, seed);
  const MlpAuxProvider aux = aux_for(cfg, ws, seed);
  const MethodSpec method = MethodSpec::parse(method_name);
  if (!method.evolver) throw InvalidArgument("--method must be 'evolver' or 'evolver+<merge method>'");
  const CellOutcome out = run_method(method, ws.members, ws.theta_pre, cfg, seed, *fitness, aux);
  if (!out.error.empty()) throw Error(out.error);

  fs::create_directories(cfg.out_dir);
  const std::string stem = "seed" + std::to_string(seed);
  write_file(cfg.out_dir / ("trace_" + stem + ".csv"), out.evolve->trace.to_csv());
  save_weights(cfg, *out.merged, cfg.out_dir / ("evolved_" + stem + ".safetensors"));
  EvolveConfig ec = cfg.evolve;
  ec.seed = seed;
  write_file(cfg.out_dir / ("run_" + stem + ".json"),
             run_manifest(cfg, ec, *ws.theta_pre.schema(), fitness->info()).dump(2) + "\n");

  const auto& tr = out.evolve->trace;
  std::printf("generation 0: best %.6f mean %.6f\n", tr.initial_best, tr.initial_mean);
  for (const auto& g : tr.generations) {
    std::printf("generation %llu: best %.6f mean %.6f replaced %zu\n", static_cast<unsigned long long>(g.generation),
                g.best, g.mean, g.replacements);
  }
  std::printf("test: %.6f\n", fitness->evaluate(*out.merged, Split::test).score);
  return 0;
}

int cmd_merge(const Common& c, const std::string& method_name) {
  const ExperimentConfig cfg = load(c);
  const std::uint64_t seed = cfg.seeds.front();
  const Workspace ws = build_workspace(cfg, seed);
  auto fitness = fitness_for(cfg, c, ws, seed);
  const MlpAuxProvider aux = aux_for(cfg, ws, seed);
  const MethodSpec method = MethodSpec::parse(method_name);
  if (method.evolver || method.ensemble) throw InvalidArgument("merge takes a merge method name");
  const CellOutcome out = run_method(method, ws.members, ws.theta_pre, cfg, seed, *fitness, aux);
  if (!out.error.empty()) throw Error(out.error);
  fs::create_directories(cfg.out_dir);
  const fs::path path = cfg.out_dir / ("merged_" + method_name + ".safetensors");
  save_weights(cfg, *out.merged, path);
  std::printf("%s: dev %.6f test %.6f -> %s\n", method_name.c_str(), fitness->evaluate(*out.merged, Split::dev).score,
              fitness->evaluate(*out.merged, Split::test).score, path.string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const ExperimentConfig cfg = load(c);
  const SplitSet data = build_data(cfg, cfg.seeds.front());
  const TensorMap map = load_checkpoint(checkpoint);
  const FlatVector w = flatten(map, cfg.model.schema());
  for (const auto& d : data.domains) {
    std::printf("domain %zu: dev %.6f test %.6f\n", d.id, accuracy(cfg.model, w, d.dev), accuracy(cfg.model, w, d.test));
  }
  for (const auto& d : data.ood) std::printf("ood %zu: test %.6f\n", d.id, accuracy(cfg.model, w, d.test));
  return 0;
}

std::vector<double> parse_grid(const std::string& spec) {
  // "lo:hi:n" inclusive, n points
  double lo = 0, hi = 0;
  unsigned n = 0;
  if (std::sscanf(spec.c_str(), "%lf:%lf:%u", &lo, &hi, &n) != 3 || n < 1) {
    throw InvalidArgument("grid must be lo:hi:n, got '" + spec + "'");
  }
  std::vector<double> g(n);
  for (unsigned i = 0; i < n; ++i) g[i] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
  return g;
}

int cmd_landscape(const Common& c, std::size_t m1, std::size_t m2, const std::string& grid_spec) {
  const ExperimentConfig cfg = load(c);
  const std::uint64_t seed = cfg.seeds.front();
  const Workspace ws = build_workspace(cfg, seed);
  if (m1 >= ws.members.size() || m2 >= ws.members.size() || m1 == m2) throw InvalidArgument("bad member pair");
  InProcessEvaluator eval(cfg.model, {ws.slot_dev[m1], ws.slot_dev[m2]}, {}, cfg.metric);
  const TaskVector t1{ws.theta_pre, ws.members[m1]};
  const TaskVector t2{ws.theta_pre, ws.members[m2]};
  const auto grid = parse_grid(grid_spec);
  const LandscapeGrid g = landscape_slice(ws.theta_pre, t1, t2, grid, grid,
                                          [&](const FlatVector& w) { return eval.evaluate(w, Split::dev).score; });
  fs::create_directories(cfg.out_dir);
  const std::string stem = "landscape_" + std::to_string(m1) + "_" + std::to_string(m2);
  write_file(cfg.out_dir / (stem + ".csv"), landscape_csv(g));
  write_file(cfg.out_dir / (stem + ".svg"),
             landscape_svg(g, "dev score, members " + std::to_string(m1) + " and " + std::to_string(m2)));
  std::printf("wrote %s.csv and %s.svg\n", stem.c_str(), stem.c_str());
  return 0;
}

int cmd_coeff_search(const Common& c, const std::string& objective, std::size_t m1, std::size_t m2) {
  const ExperimentConfig cfg = load(c);
  const std::uint64_t seed = cfg.seeds.front();
  const Workspace ws = build_workspace(cfg, seed);
  const auto grid = default_coefficient_grid();
  SearchResult r;
  if (objective == "interp") {
    if (m1 >= ws.members.size() || m2 >= ws.members.size() || m1 == m2) throw InvalidArgument("bad member pair");
    InProcessEvaluator eval(cfg.model, {ws.slot_dev[m1], ws.slot_dev[m2]}, {}, cfg.metric);
    r = pairwise_interp_search(ws.members[m1], ws.members[m2], grid,
                               [&](const FlatVector& w) { return eval.evaluate(w, Split::dev).score; });
  } else if (objective == "scale-factor") {
    auto fitness = fitness_for(cfg, c, ws, seed);
    r = coefficient_search(grid, [&](double f) {
      EvolveConfig ec = cfg.evolve;
      ec.scale_factor = f;
      ec.seed = seed;
      const EvolveResult er = evolve(Population::from_members(ws.members, seed), ec, *fitness);
      return er.trace.generations.empty() ? er.trace.initial_best : er.trace.generations.back().best;
    });
  } else {
    throw InvalidArgument("objective must be 'interp' or 'scale-factor'");
  }
  fs::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / ("search_" + objective + ".csv"), search_csv(r));
  std::printf("best %s = %.2f (dev %.6f)\n", objective.c_str(), r.best_value, r.best_score);
  return 0;
}

int cmd_report(const Common& c) {
  const ExperimentConfig cfg = load(c);
  ExperimentOptions opts;
  if (!c.evaluator.empty()) opts.evaluator_command = split_command(c.evaluator);
  const ReportTable t = run_experiment(cfg, opts);
  std::printf("%-24s", "method");
  for (const auto& col : t.columns) std::printf(" %9s", col.c_str());
  std::printf("\n");
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    std::printf("%-24s", t.rows[r].c_str());
    for (double v : t.mean(r)) std::printf(" %9.4f", v);
    for (const auto& cell : t.cells[r]) {
      if (!cell.error.empty()) {
        std::printf("  [error: %s]", cell.error.c_str());
        break;
      }
    }
    std::printf("\n");
  }
  return 0;
}

int cmd_serve(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const SplitSet data = build_data(cfg, cfg.seeds.front());
  InProcessEvaluator eval(cfg.model, data.dev_batches(), data.test_batches(), cfg.metric);
  EvaluatorInfo info{"mevo-serve", "1", 1};
  serve_protocol(std::cin, std::cout, info, [&](const fs::path& path, Split split, const std::string& metric) {
    if (metric != to_string(cfg.metric)) throw InvalidArgument("unsupported metric '" + metric + "'");
    const TensorMap map = load_checkpoint(path);
    return eval.evaluate(flatten(map, cfg.model.schema()), split);
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolutionary model merging on weight vectors"};
  app.require_subcommand(1);
  Common c;
  std::string method = "evolver", checkpoint, grid = "-0.5:1.5:9", objective = "interp";
  std::size_t m1 = 0, m2 = 1;

  auto* build = app.add_subcommand("build-population", "train theta_pre and the fine-tuned members");
  auto* evo = app.add_subcommand("evolve", "evolve the population for one seed");
  auto* mrg = app.add_subcommand("merge", "merge the population with one method");
  auto* ev = app.add_subcommand("eval", "score a checkpoint on every domain");
  auto* land = app.add_subcommand("landscape", "2-D slice along two task vectors");
  auto* coeff = app.add_subcommand("coeff-search", "grid search over a merge coefficient");
  auto* rep = app.add_subcommand("report", "run every configured method and seed");
  auto* serve = app.add_subcommand("serve", "answer evaluator protocol requests on stdin/stdout");
  for (auto* sub : {build, evo, mrg, ev, land, coeff, rep, serve}) add_common(sub, c);
  evo->add_option("--method", method, "evolver or evolver+<merge method>");
  mrg->add_option("--method", method, "merge method")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  for (auto* sub : {land, coeff}) {
    sub->add_option("--first", m1, "first member index");
    sub->add_option("--second", m2, "second member index");
  }
  land->add_option("--grid", grid, "lo:hi:n for both axes");
  coeff->add_option("--objective", objective, "interp or scale-factor");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*build) return cmd_build_population(c);
    if (*evo) return cmd_evolve(c, method);
    if (*mrg) return cmd_merge(c, method);
    if (*ev) return cmd_eval(c, checkpoint);
    if (*land) return cmd_landscape(c, m1, m2, grid);
    if (*coeff) return cmd_coeff_search(c, objective, m1, m2);
    if (*rep) return cmd_report(c);
    if (*serve) return cmd_serve(c);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mevo: %s\n", e.what());
    return 1;
  }
  return 0;
}
