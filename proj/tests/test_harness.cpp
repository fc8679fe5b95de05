#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "mevo/error.hpp"
#include "mevo/harness.hpp"

using namespace mevo;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json small_json() {
  return {{"dataset", {{"n_domains", 3}, {"noise", 0.15}, {"train", 240}, {"test", 120}, {"n_ood", 1}, {"seed", 3}}},
          {"model", {{"layer_dims", {2, 8, 6}}, {"init_seed", 5}}},
          {"training",
           {{"pre", {{"lr", 0.1}, {"epochs", 2}, {"batch_size", 32}}},
            {"finetune", {{"lr", 0.1}, {"epochs", 2}, {"batch_size", 32}}}}},
          {"evolve", {{"generations", 3}}},
          {"methods", {"simple"}},
          {"seeds", {1}}};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mevo-harness-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("config parsing and round trip") {
  const ExperimentConfig d = ExperimentConfig::from_json(json::object());
  CHECK(d.n_domains == 5);
  CHECK(d.evolve.scale_factor == 0.5);
  CHECK(d.evolve.crossover_ratio == 0.5);
  CHECK(d.methods == std::vector<std::string>{"simple", "evolver"});

  json j = small_json();
  j["evolve"] = {{"F", 0.3}, {"Cr", 0.7}, {"generations", 9}, {"update", "sequential"}};
  j["merge"] = {{"alpha", 0.5}, {"k", 0.3}, {"lambda", 0.8}};
  j["pairwise"] = true;
  j["dev_fraction"] = 0.25;
  const ExperimentConfig c = ExperimentConfig::from_json(j);
  CHECK(c.n_domains == 3);
  CHECK(c.domain.train == 240);
  CHECK(c.model.layer_dims == std::vector<std::size_t>{2, 8, 6});
  CHECK(c.evolve.scale_factor == 0.3);
  CHECK(c.evolve.crossover_ratio == 0.7);
  CHECK(c.evolve.generations == 9);
  CHECK(c.evolve.update == UpdateSemantics::sequential);
  CHECK(c.merge_defaults.alpha == 0.5);
  CHECK(c.merge_defaults.trim_fraction == 0.3);
  CHECK(c.merge_defaults.lambda == 0.8);
  CHECK(c.pairwise);
  CHECK(c.dev_fraction == 0.25);
  CHECK(ExperimentConfig::from_json(c.to_json()).to_json() == c.to_json());

  json bad = small_json();
  bad["model"]["layer_dims"] = {2, 8, 5};
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad).validate(), InvalidArgument);
  bad = small_json();
  bad["methods"] = {"nonsense"};
  CHECK_THROWS(ExperimentConfig::from_json(bad).validate());
}

TEST_CASE("method names") {
  const MethodSpec e = MethodSpec::parse("evolver");
  CHECK(e.evolver);
  CHECK_FALSE(e.merge.has_value());
  const MethodSpec et = MethodSpec::parse("evolver+ties");
  CHECK(et.evolver);
  CHECK(et.merge == MergeMethod::ties);
  CHECK(MethodSpec::parse("ensemble").ensemble);
  const MethodSpec f = MethodSpec::parse("fisher");
  CHECK_FALSE(f.evolver);
  CHECK(f.merge == MergeMethod::fisher);
  CHECK_THROWS_AS(MethodSpec::parse("evolver+magic"), InvalidArgument);
  CHECK_THROWS_AS(MethodSpec::parse("magic"), InvalidArgument);
}

TEST_CASE("population build is deterministic and reloadable") {
  const ExperimentConfig cfg = ExperimentConfig::from_json(small_json());
  const fs::path a = temp_dir("pop-a"), b = temp_dir("pop-b");
  const PopulationFiles fa = build_population(cfg, a);
  const PopulationFiles fb = build_population(cfg, b);
  REQUIRE(fa.members.size() == 3);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a)) ++files;
  CHECK(files == 5);
  CHECK(slurp(fa.pre) == slurp(fb.pre));
  for (std::size_t i = 0; i < 3; ++i) CHECK(slurp(fa.members[i]) == slurp(fb.members[i]));

  const json manifest = json::parse(slurp(fa.manifest));
  CHECK(manifest["schema_hash"] == hex64(cfg.model.schema()->hash()));
  REQUIRE(manifest["checkpoints"].size() == 4);
  for (const auto& c : manifest["checkpoints"]) {
    const std::string bytes = slurp(a / c["file"].get<std::string>());
    CHECK(c["fnv1a"] == hex64(fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()))));
    if (c["role"] == "member") CHECK(c["own_domain_dev"].get<double>() >= c["pre_own_domain_dev"].get<double>());
  }

  const Workspace trained = build_workspace(cfg, 1);
  ExperimentConfig from_files = cfg;
  from_files.pre_checkpoint = fa.pre;
  from_files.member_checkpoints = fa.members;
  const Workspace loaded = build_workspace(from_files, 1);
  CHECK(loaded.theta_pre.bitwise_equal(trained.theta_pre));
  for (std::size_t i = 0; i < 3; ++i) CHECK(loaded.members[i].bitwise_equal(trained.members[i]));
  CHECK(loaded.column_names == std::vector<std::string>{"d0", "d1", "d2"});
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a({}) == 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a(a) == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("report cells match direct scoring") {
  json j = small_json();
  j["methods"] = {"simple", "ensemble"};
  j["seeds"] = {1, 2};
  const ExperimentConfig cfg = ExperimentConfig::from_json(j);
  ExperimentOptions opt;
  opt.write_files = false;
  const ReportTable t = run_experiment(cfg, opt);
  CHECK(t.rows == std::vector<std::string>{"avg_individual", "best_individual", "simple", "ensemble"});
  CHECK(t.columns == std::vector<std::string>{"d0", "d1", "d2", "in_domain", "ood"});

  for (std::size_t s = 0; s < 2; ++s) {
    const Workspace ws = build_workspace(cfg, cfg.seeds[s]);
    std::vector<double> per_member;
    for (const auto& m : ws.members) {
      std::vector<double> acc;
      for (const auto& b : ws.slot_test) acc.push_back(accuracy(cfg.model, m, b));
      per_member.push_back(mean(acc));
    }
    CHECK(t.cells[0][s].columns[3] == doctest::Approx(mean(per_member)).epsilon(1e-12));
    CHECK(t.cells[1][s].columns[3] == *std::max_element(per_member.begin(), per_member.end()));

    const FlatVector avg = simple_average(ws.members);
    for (std::size_t d = 0; d < 3; ++d) {
      CHECK(t.cells[2][s].columns[d] == accuracy(cfg.model, avg, ws.slot_test[d]));
      CHECK(t.cells[3][s].columns[d] == ensemble_accuracy(cfg.model, ws.members, ws.slot_test[d]));
    }
    CHECK(t.cells[2][s].columns[4] == accuracy(cfg.model, avg, ws.data.ood[0].test));
  }
  const auto m = t.mean(2);
  CHECK(m[3] == doctest::Approx((t.cells[2][0].columns[3] + t.cells[2][1].columns[3]) / 2));

  const std::string csv = t.to_csv();
  CHECK(csv.rfind("method,seed,d0,d1,d2,in_domain,ood,error\n", 0) == 0);
  CHECK(csv.find("\nsimple,mean,") != std::string::npos);
  CHECK(csv.find("\nensemble,2,") != std::string::npos);
}

TEST_CASE("pairwise groups average over every pair") {
  json j = small_json();
  j["methods"] = {"simple", "evolver"};
  j["pairwise"] = true;
  const ExperimentConfig cfg = ExperimentConfig::from_json(j);
  ExperimentOptions opt;
  opt.write_files = false;
  const ReportTable t = run_experiment(cfg, opt);
  const Workspace ws = build_workspace(cfg, 1);

  std::vector<double> in_domain;
  std::vector<std::vector<double>> per_domain(3);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      const std::vector<FlatVector> pair{ws.members[a], ws.members[b]};
      const FlatVector avg = simple_average(pair);
      const double sa = accuracy(cfg.model, avg, ws.slot_test[a]), sb = accuracy(cfg.model, avg, ws.slot_test[b]);
      per_domain[a].push_back(sa);
      per_domain[b].push_back(sb);
      in_domain.push_back((sa + sb) / 2);
    }
  }
  CHECK(t.cells[2][0].columns[3] == doctest::Approx(mean(in_domain)).epsilon(1e-12));
  for (std::size_t d = 0; d < 3; ++d) CHECK(t.cells[2][0].columns[d] == doctest::Approx(mean(per_domain[d])).epsilon(1e-12));
  // two members cannot supply distinct donors; the evolver cell records the error alone
  CHECK_FALSE(t.cells[3][0].error.empty());
  CHECK(t.cells[2][0].error.empty());
  CHECK(std::isnan(t.mean(3)[3]));
}

TEST_CASE("experiment outputs") {
  const fs::path out = temp_dir("run");
  json j = small_json();
  j["methods"] = {"evolver", "evolver+ties", "greedy_soup"};
  j["out"] = out.string();
  const ExperimentConfig cfg = ExperimentConfig::from_json(j);
  const ReportTable t = run_experiment(cfg);
  CHECK(fs::exists(out / "report.csv"));
  CHECK(fs::exists(out / "trace_evolver_seed1.csv"));
  CHECK(fs::exists(out / "trace_evolver_ties_seed1.csv"));
  const json run = json::parse(slurp(out / "run_evolver_seed1.json"));
  CHECK(run["seed"] == 1);
  CHECK(run["schema_hash"] == hex64(cfg.model.schema()->hash()));
  CHECK(run["evolve"]["generations"] == 3);
  const json report = json::parse(slurp(out / "report.json"));
  CHECK(report.contains("kernels"));
  CHECK(report["config"] == cfg.to_json());
  for (std::size_t r = 0; r < t.rows.size(); ++r) CHECK(t.cells[r][0].error.empty());

  const std::string trace = slurp(out / "trace_evolver_seed1.csv");
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 1 + 1 + 3);

  // a broken population source fails every cell of that seed, not the run
  json broken = j;
  broken["population"] = {{"source", "checkpoints"}, {"pre", (out / "missing.safetensors").string()},
                          {"members", {(out / "missing.safetensors").string()}}};
  broken["seeds"] = {1};
  ExperimentOptions opt;
  opt.write_files = false;
  const ReportTable tb = run_experiment(ExperimentConfig::from_json(broken), opt);
  for (const auto& row : tb.cells) CHECK(row[0].error.rfind("population:", 0) == 0);
  fs::remove_all(out);
}

TEST_CASE("time model arithmetic") {
  EvolveTrace trace;
  CHECK(time_report(trace, 100, 5, 0).predicted_s == 0.0);
  for (int g = 0; g < 4; ++g) {
    GenerationRecord r;
    r.t_mutate_ms = 2.0;
    r.t_eval_ms = g == 0 ? 50.0 : 40.0;
    trace.generations.push_back(r);
  }
  const TimeModel tm = time_report(trace, 100, 5, 4);
  CHECK(tm.t1_s == doctest::Approx(8.0 / 1000.0 / 20.0));
  CHECK(tm.t2_s == doctest::Approx(50.0 / 1000.0 / 500.0));
  CHECK(tm.predicted_s == doctest::Approx(20 * (0.0004 + 100 * 0.0001)));
  CHECK(tm.measured_s == doctest::Approx(0.178));
  CHECK(tm.ratio == doctest::Approx(0.178 / 0.208));
  CHECK_FALSE(tm.flagged);
  const TimeModel slow = time_report(trace, 100, 5, 4, 1e-3);
  CHECK(slow.flagged);
}
