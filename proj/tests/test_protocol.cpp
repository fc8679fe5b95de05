#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <algorithm>
#include <unistd.h>

#include <json.hpp>

#include "helpers.hpp"
#include "mevo/datasets.hpp"
#include "mevo/error.hpp"
#include "mevo/evaluator.hpp"
#include "mevo/evolution.hpp"
#include "mevo/harness.hpp"

using namespace mevo;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> mock(const std::string& mode, int capacity = 1, int n_ok = 0) {
  return {MOCK_EVALUATOR, mode, std::to_string(capacity), std::to_string(n_ok)};
}

SessionOptions quick() {
  SessionOptions o;
  o.handshake_timeout = 2000ms;
  o.evaluate_timeout = 2000ms;
  return o;
}

double mock_score(const FlatVector& w) {
  double s = 0.0;
  for (float v : w.values()) s += static_cast<double>(v) * v;
  return 1.0 / (1.0 + s / static_cast<double>(w.size()));
}

Population small_population(std::uint64_t seed) {
  const auto schema = testutil::flat_schema(6, "w");
  std::vector<FlatVector> members;
  for (std::size_t i = 0; i < 4; ++i) members.push_back(testutil::random_vec(schema, 100 + i, -2.0f, 2.0f));
  return Population::from_members(std::move(members), seed);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mevo-test-" + name + "-" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("handshake records the advertised capacity") {
  ExternalEvaluator e(mock("ok", 3), quick());
  CHECK(e.info().name == "mock");
  CHECK(e.info().version == "0.1");
  CHECK(e.info().capacity == 3);
  CHECK(e.usable());
}

TEST_CASE("handshake failures") {
  CHECK_THROWS_AS(ExternalEvaluator(mock("exit"), quick()), ProtocolError);
  CHECK_THROWS_AS(ExternalEvaluator({"/nonexistent/mevo-evaluator"}, quick()), ProtocolError);
  CHECK_THROWS_AS(ExternalEvaluator(mock("ok", 0), quick()), ProtocolError);
  const auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(ExternalEvaluator(mock("hang_info"), quick()), ProtocolError);
  CHECK(std::chrono::steady_clock::now() - t0 < 10s);
}

TEST_CASE("conforming evaluate round trip") {
  const FlatVector w = testutil::random_vec(testutil::flat_schema(5, "w"), 3, -1.0f, 1.0f);
  ExternalEvaluator e(mock("ok"), quick());
  const FitnessReport r = e.evaluate(w, Split::dev);
  CHECK(r.score == mock_score(w));
  CHECK(r.metric == "accuracy");
  CHECK(r.n_examples == 10);
  CHECK(e.evaluate(w, Split::test).score == r.score);
  e.shutdown();
  CHECK_FALSE(e.usable());
}

TEST_CASE("scratch checkpoints are removed") {
  SessionOptions o = quick();
  o.scratch_dir = temp_dir("scratch");
  {
    ExternalEvaluator e(mock("ok"), o);
    e.evaluate(testutil::random_vec(testutil::flat_schema(5, "w"), 3, -1.0f, 1.0f), Split::dev);
  }
  CHECK(fs::is_empty(o.scratch_dir));
  fs::remove_all(o.scratch_dir);
}

TEST_CASE("protocol violations mark the session unusable") {
  const FlatVector w = testutil::random_vec(testutil::flat_schema(5, "w"), 4, -1.0f, 1.0f);
  for (const std::string mode : {"malformed", "out_of_range", "id_mismatch", "crash", "nondeterministic"}) {
    CAPTURE(mode);
    ExternalEvaluator e(mock(mode), quick());
    try {
      e.evaluate(w, Split::dev);
      FAIL("no error raised");
    } catch (const TimeoutError&) {
      FAIL("unexpected timeout");
    } catch (const ProtocolError& err) {
      const std::string what = err.what();
      CHECK(what.find("protocol violation") != std::string::npos);
      if (mode == "out_of_range") CHECK(what.find("score out of range") != std::string::npos);
      if (mode == "id_mismatch") CHECK(what.find("id does not match") != std::string::npos);
      if (mode == "malformed") CHECK(what.find("malformed") != std::string::npos);
      if (mode == "nondeterministic") CHECK(what.find("not deterministic") != std::string::npos);
    }
    CHECK_FALSE(e.usable());
    CHECK_THROWS_AS(e.evaluate(w, Split::dev), ProtocolError);
  }
}

TEST_CASE("timeout marks the session unusable") {
  const FlatVector w = testutil::random_vec(testutil::flat_schema(5, "w"), 4, -1.0f, 1.0f);
  SessionOptions o = quick();
  o.evaluate_timeout = 300ms;
  ExternalEvaluator e(mock("hang"), o);
  const auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(e.evaluate(w, Split::dev), TimeoutError);
  CHECK(std::chrono::steady_clock::now() - t0 < 5s);
  CHECK_FALSE(e.usable());
  CHECK_THROWS_AS(e.evaluate(w, Split::dev), ProtocolError);
}

TEST_CASE("evaluator-reported error is not a violation") {
  const FlatVector w = testutil::random_vec(testutil::flat_schema(5, "w"), 4, -1.0f, 1.0f);
  SessionOptions o = quick();
  o.determinism_probe = false;
  ExternalEvaluator e(mock("error"), o);
  try {
    e.evaluate(w, Split::dev);
    FAIL("no error raised");
  } catch (const ProtocolError&) {
    FAIL("reported error treated as violation");
  } catch (const Error& err) {
    CHECK(std::string(err.what()).find("model exploded") != std::string::npos);
  }
  CHECK(e.usable());
}

TEST_CASE("mid-run failures leave the population intact") {
  const Population pop = small_population(9);
  EvolveConfig cfg;
  cfg.generations = 3;
  for (const std::string mode : {"malformed", "out_of_range", "id_mismatch", "hang"}) {
    CAPTURE(mode);
    const Population before = pop;
    SessionOptions o = quick();
    o.evaluate_timeout = 300ms;
    // the first 7 answers conform: initial scoring, the probe, then part of generation one
    ExternalEvaluator e(mock(mode, 1, 7), o);
    CHECK_THROWS_AS(evolve(pop, cfg, e), EvaluationError);
    CHECK(pop.bitwise_equal(before));
    CHECK_FALSE(e.usable());

    const auto [next, rec] = [&] {
      ExternalEvaluator good(mock("ok"), quick());
      return step_generation(pop, cfg, good);
    }();
    CHECK(next.size() == pop.size());
    for (const auto& f : next.fitness) CHECK(f.has_value());
  }
}

TEST_CASE("capacity 1 serializes evaluation") {
  EvolveConfig cfg;
  cfg.generations = 2;
  cfg.max_workers = 8;
  ExternalEvaluator e(mock("ok", 1), quick());
  const EvolveResult r = evolve(small_population(3), cfg, e);
  for (const auto& g : r.trace.generations) {
    auto iv = g.eval_intervals;
    std::sort(iv.begin(), iv.end(), [](const auto& a, const auto& b) { return a.start_ns < b.start_ns; });
    for (std::size_t i = 1; i < iv.size(); ++i) CHECK(iv[i].start_ns >= iv[i - 1].end_ns);
  }
}

TEST_CASE("external and in-process evolution agree with the mock score") {
  EvolveConfig cfg;
  cfg.generations = 5;
  FunctionEvaluator local([](const FlatVector& w, Split) { return mock_score(w); }, {"local", "1", 1});
  ExternalEvaluator remote(mock("ok", 2), quick());
  const EvolveResult a = evolve(small_population(5), cfg, local);
  const EvolveResult b = evolve(small_population(5), cfg, remote);
  CHECK(a.population.bitwise_equal(b.population));
  REQUIRE(a.trace.generations.size() == b.trace.generations.size());
  for (std::size_t g = 0; g < a.trace.generations.size(); ++g) {
    CHECK(a.trace.generations[g].best == b.trace.generations[g].best);
    CHECK(a.trace.generations[g].replacements == b.trace.generations[g].replacements);
  }
}

TEST_CASE("in-process evaluator equals accuracy") {
  const MlpSpec spec;
  DomainTemplate t;
  t.train = 200;
  t.test = 50;
  const SplitSet data = make_domains(3, t, 4);
  const FlatVector w = init_weights(spec, 8);
  InProcessEvaluator e(spec, data.dev_batches(), data.test_batches());
  double dev = 0.0;
  for (const auto& b : data.dev_batches()) dev += accuracy(spec, w, b);
  CHECK(e.evaluate(w, Split::dev).score == dev / 3.0);
  double test = 0.0;
  for (const auto& b : data.test_batches()) test += accuracy(spec, w, b);
  CHECK(e.evaluate(w, Split::test).score == test / 3.0);
  CHECK(e.evaluate(w, Split::dev).n_examples == 3 * t.dev_count());
  InProcessEvaluator single(spec, {data.domains[0].dev}, {});
  CHECK(single.evaluate(w, Split::dev).score == accuracy(spec, w, data.domains[0].dev));
  CHECK_THROWS_AS(single.evaluate(w, Split::test), InvalidArgument);
}

TEST_CASE("server loop framing") {
  const fs::path dir = temp_dir("serve");
  const FlatVector w = testutil::random_vec(testutil::flat_schema(4, "w"), 2, -1.0f, 1.0f);
  save_checkpoint(unflatten(w), dir / "w.safetensors");
  const std::string wpath = (dir / "w.safetensors").string();

  std::istringstream in("{\"id\":1,\"cmd\":\"info\"}\n"
                        "\n"
                        "not json\n"
                        "{\"id\":2,\"cmd\":\"evaluate\",\"weights_path\":\"" + wpath + "\",\"split\":\"test\",\"metric\":\"accuracy\"}\n"
                        "{\"id\":3,\"cmd\":\"evaluate\",\"weights_path\":\"/missing\",\"split\":\"dev\"}\n"
                        "{\"id\":4,\"cmd\":\"bogus\"}\n"
                        "{\"id\":5,\"cmd\":\"shutdown\"}\n"
                        "{\"id\":6,\"cmd\":\"info\"}\n");
  std::ostringstream out;
  Split seen = Split::dev;
  serve_protocol(in, out, EvaluatorInfo{"srv", "2", 4}, [&](const fs::path& p, Split s, const std::string&) {
    const double score = mock_score(flatten(load_checkpoint(p), w.schema()));
    seen = s;
    return FitnessReport{score, "accuracy", 7};
  });
  std::istringstream lines(out.str());
  std::vector<nlohmann::json> r;
  for (std::string l; std::getline(lines, l);) r.push_back(nlohmann::json::parse(l));
  REQUIRE(r.size() == 6);
  CHECK(r[0] == nlohmann::json{{"id", 1}, {"ok", true}, {"name", "srv"}, {"version", "2"}, {"capacity", 4}});
  CHECK(r[1]["id"].is_null());
  CHECK(r[1]["ok"] == false);
  CHECK(r[2]["id"] == 2);
  CHECK(r[2]["score"].get<double>() == mock_score(w));
  CHECK(r[2]["n_examples"] == 7);
  CHECK(seen == Split::test);
  CHECK(r[3]["ok"] == false);
  CHECK_FALSE(r[3].contains("score"));
  CHECK(r[4]["ok"] == false);
  CHECK(r[5] == nlohmann::json{{"id", 5}, {"ok", true}});
  fs::remove_all(dir);
}

TEST_CASE("command splitting") {
  CHECK(split_command("  a  b\tc ") == std::vector<std::string>{"a", "b", "c"});
  CHECK(split_command("").empty());
}

TEST_CASE("serve subcommand reproduces in-process evolution") {
  const fs::path dir = temp_dir("cli");
  nlohmann::json j = {
      {"dataset", {{"n_domains", 3}, {"classes", 6}, {"noise", 0.3}, {"train", 200}, {"test", 50}, {"seed", 5}}},
      {"model", {{"layer_dims", {2, 8, 6}}, {"init_seed", 3}}},
      {"seeds", {2}}};
  std::ofstream(dir / "cfg.json") << j.dump();
  const ExperimentConfig cfg = ExperimentConfig::load(dir / "cfg.json");
  const SplitSet data = build_data(cfg, 2);

  std::vector<FlatVector> members;
  for (std::uint64_t s = 0; s < 4; ++s) members.push_back(init_weights(cfg.model, 40 + s));
  const Population pop = Population::from_members(members, 17);
  EvolveConfig ec;
  ec.generations = 4;

  InProcessEvaluator local(cfg.model, data.dev_batches(), data.test_batches());
  ExternalEvaluator remote({MEVO_CLI, "serve", "--config", (dir / "cfg.json").string(), "--seed-override", "2"});
  CHECK(remote.info().name == "mevo-serve");
  const EvolveResult a = evolve(pop, ec, local);
  const EvolveResult b = evolve(pop, ec, remote);
  CHECK(a.population.bitwise_equal(b.population));
  CHECK(a.trace.initial_best == b.trace.initial_best);
  for (std::size_t g = 0; g < ec.generations; ++g) CHECK(a.trace.generations[g].best == b.trace.generations[g].best);
  CHECK(remote.evaluate(b.best, Split::test).score == local.evaluate(a.best, Split::test).score);
  fs::remove_all(dir);
}
