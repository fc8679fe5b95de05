#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <Eigen/QR>

#include "helpers.hpp"
#include "oracles.hpp"
#include "mevo/error.hpp"
#include "mevo/merging.hpp"

using namespace mevo;
using testutil::flat_schema;
using testutil::vec;

namespace {

std::vector<float> values(const FlatVector& v) { return {v.values().begin(), v.values().end()}; }

Batch random_batch(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Batch b;
  b.dim = dim;
  CounterRng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> x(dim);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    b.push_back(x, static_cast<int>(rng.below(2)));
  }
  return b;
}

}  // namespace

TEST_CASE("simple average") {
  const auto s = flat_schema(2);
  const std::vector<FlatVector> models{vec(s, {0, 2}), vec(s, {2, 0})};
  CHECK(values(merge(models, MergeSpec{})) == std::vector<float>{1, 1});
  const std::vector<FlatVector> same(4, vec(s, {0.1f, -7.3f}));
  CHECK(simple_average(same).bitwise_equal(same[0]));
  const std::vector<double> w{3.0, 1.0};
  CHECK(values(simple_average(models, w)) == std::vector<float>{0.5f, 1.5f});
  const std::vector<FlatVector> reversed{models[1], models[0]};
  CHECK(simple_average(reversed).bitwise_equal(simple_average(models)));
}

TEST_CASE("single model is returned unchanged by every method") {
  MlpSpec spec;
  spec.layer_dims = {3, 4, 2};
  const FlatVector m = init_weights(spec, 1);
  const std::vector<FlatVector> one{m};
  const FlatVector pre = init_weights(spec, 2);
  const Batch b = random_batch(10, 3, 3);
  const std::vector<FisherState> f{fisher_diagonal(spec, m, b)};
  const std::vector<GramState> g{capture_grams(spec, m, b)};
  for (MergeMethod method : {MergeMethod::simple, MergeMethod::fisher, MergeMethod::regmean, MergeMethod::ties,
                             MergeMethod::greedy_soup, MergeMethod::pairwise_interp}) {
    MergeSpec ms;
    ms.method = method;
    MergeAux aux;
    aux.fishers = f;
    aux.grams = g;
    aux.theta_pre = &pre;
    aux.dev_score = [](const FlatVector&) { return 0.5; };
    CHECK(merge(one, ms, aux).bitwise_equal(m));
  }
}

TEST_CASE("merge dispatch errors") {
  const auto s = flat_schema(2);
  const std::vector<FlatVector> models{vec(s, {0, 2}), vec(s, {2, 0})};
  MergeSpec ms;
  ms.method = MergeMethod::fisher;
  CHECK_THROWS_AS(merge(models, ms), MissingAux);
  ms.method = MergeMethod::regmean;
  CHECK_THROWS_AS(merge(models, ms), MissingAux);
  ms.method = MergeMethod::ties;
  CHECK_THROWS_AS(merge(models, ms), MissingAux);
  ms.method = MergeMethod::greedy_soup;
  CHECK_THROWS_AS(merge(models, ms), MissingAux);
  const std::vector<FlatVector> mixed{vec(s, {0, 2}), vec(flat_schema(2, "v"), {2, 0})};
  CHECK_THROWS_AS(merge(mixed, MergeSpec{}), SchemaMismatch);
  CHECK_THROWS_AS(merge(std::vector<FlatVector>{}, MergeSpec{}), InvalidArgument);
  ms = MergeSpec{};
  ms.trim_fraction = 0.0;
  CHECK_THROWS_AS(ms.validate(), InvalidArgument);
  ms.trim_fraction = 0.2;
  ms.alpha = 0.0;
  CHECK_THROWS_AS(ms.validate(), InvalidArgument);
}

TEST_CASE("fisher merge") {
  const auto s = flat_schema(2);
  const std::vector<FlatVector> models{vec(s, {5, 9}), vec(s, {7, 3})};
  const std::vector<FisherState> f{{vec(s, {1, 0}), 1}, {vec(s, {0, 1}), 1}};
  const FlatVector r = fisher_merge(models, f);
  CHECK(r[0] == doctest::Approx(5.0).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(3.0).epsilon(1e-6));

  const auto big = flat_schema(10);
  const std::vector<FlatVector> rm{testutil::random_vec(big, 1), testutil::random_vec(big, 2)};
  const std::vector<FisherState> equal{{testutil::random_vec(big, 3, 0.5, 2), 1}, {FlatVector(big), 1}};
  std::vector<FisherState> same{equal[0], equal[0]};
  const FlatVector avg = simple_average(rm), fm = fisher_merge(rm, same);
  for (std::size_t j = 0; j < 10; ++j) CHECK(std::abs(fm[j] - avg[j]) <= 1e-6);

  const std::vector<FisherState> rf{{testutil::random_vec(big, 4, 0, 3), 1}, {testutil::random_vec(big, 5, 0, 3), 1}};
  const std::vector<double> w{0.3, 0.7};
  const FlatVector got = fisher_merge(rm, rf, w);
  for (std::size_t j = 0; j < 10; ++j) {
    double num = 0, den = 0;
    for (int i = 0; i < 2; ++i) {
      const double f = std::max(static_cast<double>(rf[i].diag[j]), kFisherFloor);
      num += w[i] * f * rm[i][j];
      den += w[i] * f;
    }
    CHECK(got[j] == doctest::Approx(num / den).epsilon(1e-6));
  }

  // zero Fisher everywhere falls back to the average, never to zero
  const std::vector<FisherState> zero{{FlatVector(big), 1}, {FlatVector(big), 1}};
  const FlatVector fz = fisher_merge(rm, zero);
  for (std::size_t j = 0; j < 10; ++j) CHECK(std::abs(fz[j] - avg[j]) <= 1e-6);
  const std::vector<FisherState> sparse{{vec(s, {1e-12f, 1}), 1}, {vec(s, {1e-12f, 1}), 1}};
  const FlatVector fsp = fisher_merge(models, sparse);
  CHECK(fsp[0] == doctest::Approx(6.0).epsilon(1e-6));

  const std::vector<FisherState> negative{{vec(s, {-1, 1}), 1}, {vec(s, {1, 1}), 1}};
  CHECK_THROWS_AS(fisher_merge(models, negative), InvalidArgument);
}

TEST_CASE("regmean matches the stacked least-squares solution") {
  MlpSpec spec;
  spec.layer_dims = {4, 3};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FlatVector w1 = init_weights(spec, 10 + seed), w2 = init_weights(spec, 20 + seed);
    const Batch x1 = random_batch(50, 4, 30 + seed), x2 = random_batch(50, 4, 40 + seed);
    const std::vector<FlatVector> models{w1, w2};
    const std::vector<GramState> grams{capture_grams(spec, w1, x1), capture_grams(spec, w2, x2)};
    const FlatVector merged = regmean_merge(models, grams, 1.0);

    const Eigen::MatrixXd Wt = oracle::stacked_least_squares(models, {x1, x2}, 4, 3);  // [in, out]
    const auto M = merged.tensor("layer0.weight");
    for (std::size_t o = 0; o < 3; ++o) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(M[o * 4 + c] - Wt(c, o)) <= 1e-4);
    }
    // bias is simple-averaged
    const auto B = merged.tensor("layer0.bias");
    for (std::size_t o = 0; o < 3; ++o) {
      CHECK(B[o] == static_cast<float>((static_cast<double>(w1.tensor("layer0.bias")[o]) + w2.tensor("layer0.bias")[o]) / 2));
    }
  }
}

TEST_CASE("regmean idempotence, recovery and ridge") {
  MlpSpec spec;
  spec.layer_dims = {3, 5, 2};
  const FlatVector w = init_weights(spec, 3);
  const Batch b = random_batch(40, 3, 4);
  const GramState g = capture_grams(spec, w, b);
  const std::vector<FlatVector> same{w, w, w};
  const std::vector<GramState> gs{g, g, g};
  const FlatVector merged = regmean_merge(same, gs, 0.9);
  for (std::size_t j = 0; j < w.size(); ++j) CHECK(std::abs(merged[j] - w[j]) <= 1e-5);

  // alpha = 1, one model (through the solver, not the single-model shortcut)
  const std::vector<FlatVector> one{w};
  const std::vector<GramState> g1{g};
  const FlatVector rec = regmean_merge(one, g1, 1.0);
  for (std::size_t j = 0; j < w.size(); ++j) CHECK(std::abs(rec[j] - w[j]) <= 1e-5);

  // rank-deficient Grams take the ridge path
  Batch tiny;
  tiny.dim = 3;
  tiny.push_back(std::vector<float>{1, 0, 0}, 0);
  const GramState gt = capture_grams(spec, w, tiny);
  const FlatVector w2 = init_weights(spec, 4);
  const std::vector<FlatVector> pair{w, w2};
  const std::vector<GramState> gp{gt, gt};
  RegmeanDiagnostics diag;
  const FlatVector r = regmean_merge(pair, gp, 1.0, &diag);
  CHECK_FALSE(diag.ridged_layers.empty());
  for (float v : r.values()) CHECK(std::isfinite(v));

  const std::vector<GramState> missing{GramState{}, GramState{}};
  CHECK_THROWS(regmean_merge(pair, missing, 0.9));
}

TEST_CASE("ties examples") {
  const auto s = flat_schema(5);
  const FlatVector pre = vec(s, {0.5f, -1, 2, 0, 3});
  const FlatVector tau = vec(s, {0.25f, -0.5f, 1, 2, -4});
  const FlatVector ft = axpy(1.0f, tau, pre);
  const std::vector<FlatVector> same{ft, ft, ft};
  for (double lambda : {1.0, 0.5, 2.0}) {
    const FlatVector r = ties_merge(same, pre, 1.0, lambda);
    const FlatVector t = subtract(ft, pre);
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(r[j] == static_cast<float>(static_cast<double>(pre[j]) + lambda * t[j]));
    }
  }
  CHECK(ties_merge(same, pre, 1.0, 1.0).bitwise_equal(ft));

  const auto one = flat_schema(1);
  const std::vector<FlatVector> cancel{vec(one, {2}), vec(one, {-2})};
  CHECK(ties_merge(cancel, vec(one, {0}), 1.0, 1.0)[0] == 0.0f);

  CHECK(ties_keep_count(0.2, 10) == 2);
  CHECK(ties_keep_count(0.1, 30) == 3);  // 0.1*30 rounds above 3 in binary
  CHECK(ties_keep_count(0.21, 10) == 3);
  CHECK(ties_keep_count(1.0, 7) == 7);
  CHECK_THROWS(ties_merge(cancel, vec(one, {0}), 0.0, 1.0));
  CHECK_THROWS(ties_merge(cancel, vec(one, {0}), 1.5, 1.0));

  const std::vector<float> trimmed = ties_trim(std::vector<float>{1, -3, 3, 0.5f, -1}, 2);
  CHECK(trimmed == std::vector<float>{0, -3, 3, 0, 0});
  const std::vector<float> tie = ties_trim(std::vector<float>{1, -1, 1, 1}, 2);
  CHECK(tie == std::vector<float>{1, -1, 0, 0});
  const std::vector<float> sparse = ties_trim(std::vector<float>{0, 2, 0, 0}, 3);
  CHECK(std::count_if(sparse.begin(), sparse.end(), [](float v) { return v != 0; }) == 1);
}

TEST_CASE("ties matches the brute-force oracle on random instances") {
  const auto s = flat_schema(10);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    CounterRng rng(seed * 13 + 1);
    const double k = 0.05 + 0.95 * rng.uniform01();
    const double lambda = 0.5 + rng.uniform01();
    FlatVector pre = testutil::random_vec(s, seed * 3 + 100);
    std::vector<FlatVector> models;
    std::vector<std::vector<float>> raw;
    for (int i = 0; i < 3; ++i) {
      std::vector<float> m = testutil::random_floats(10, seed * 7 + i);
      // duplicated magnitudes and exact zeros exercise the tie rules
      if (seed % 4 == 0) m[3] = pre[3] + (m[5] - pre[5]);
      if (seed % 5 == 0) m[7] = pre[7];
      raw.push_back(m);
      models.emplace_back(s, m);
    }
    const FlatVector got = ties_merge(models, pre, k, lambda);
    std::vector<int> elected;
    const std::vector<float> want = oracle::ties(raw, values(pre), k, lambda, &elected);
    INFO("seed " << seed << " k " << k);
    CHECK(values(got) == want);
    // merged sign equals elected sign or zero
    for (std::size_t j = 0; j < 10; ++j) {
      const double d = static_cast<double>(got[j]) - pre[j];
      if (d != 0) CHECK((d > 0 ? 1 : -1) == elected[j]);
    }
  }
}

TEST_CASE("ties per-tensor trimming") {
  const auto s = std::make_shared<const ParamSchema>(std::vector<std::pair<std::string, Shape>>{{"a", {4}}, {"b", {4}}});
  const FlatVector pre(s);
  const std::vector<FlatVector> m{vec(s, {10, 9, 8, 7, 0.1f, 0.2f, 0.3f, 0.4f})};
  const std::vector<FlatVector> two{m[0], m[0]};
  const FlatVector global = ties_merge(two, pre, 0.25, 1.0, false);
  const FlatVector per = ties_merge(two, pre, 0.25, 1.0, true);
  CHECK(values(global) == std::vector<float>{10, 9, 0, 0, 0, 0, 0, 0});
  CHECK(values(per) == std::vector<float>{10, 0, 0, 0, 0, 0, 0, 0.4f});
}

TEST_CASE("greedy soup") {
  const auto s = flat_schema(1);
  // score peaks at 0; model order by score: [0.25] > [-0.5] > [5]
  const ScoreFn score = [](const FlatVector& v) { return -std::abs(static_cast<double>(v[0])); };
  const std::vector<FlatVector> models{vec(s, {5}), vec(s, {0.25f}), vec(s, {-0.5f})};
  const SoupResult r = greedy_soup(models, score);
  // {0.25} -> {0.25,-0.5}: mean -0.125 scores higher, kept; adding 5 gives 1.58, rejected
  CHECK(r.ingredients == std::vector<std::size_t>{1, 2});
  CHECK(r.merged[0] == -0.125f);
  CHECK(r.score >= *std::max_element(r.individual_scores.begin(), r.individual_scores.end()));

  const std::vector<FlatVector> same(3, vec(s, {0.7f}));
  const SoupResult all = greedy_soup(same, score);
  CHECK(all.ingredients.size() == 3);
  CHECK(all.merged.bitwise_equal(same[0]));

  const std::vector<FlatVector> harmful{vec(s, {0.0f}), vec(s, {4.0f})};
  CHECK(greedy_soup(harmful, score).merged.bitwise_equal(harmful[0]));
}

TEST_CASE("coefficient grid and searches") {
  const auto grid = default_coefficient_grid();
  REQUIRE(grid.size() == 17);
  for (std::size_t i = 0; i < 17; ++i) CHECK(grid[i] == (10.0 + 5.0 * i) / 100.0);
  CHECK(grid.front() == 0.1);
  CHECK(grid.back() == 0.9);

  const auto s = flat_schema(2);
  const FlatVector a = vec(s, {1, 2});
  const SearchResult flat = pairwise_interp_search(a, a, grid, [](const FlatVector&) { return 0.5; });
  CHECK(flat.best_value == 0.1);
  CHECK(flat.table.size() == 17);

  const auto concave = [](double x) { return -(x - 0.63) * (x - 0.63); };
  const SearchResult r = coefficient_search(grid, concave);
  double best = grid[0];
  for (double g : grid) {
    if (concave(g) > concave(best)) best = g;
  }
  CHECK(r.best_value == best);
  CHECK(r.best_value == 0.65);
  CHECK_THROWS(coefficient_search(std::vector<double>{}, concave));

  const FlatVector b = vec(s, {3, -2});
  const FlatVector mid = interpolate(a, b, 0.25);
  CHECK(mid[0] == 2.5f);
  CHECK(mid[1] == -1.0f);
  const std::string csv = search_csv(r);
  CHECK(csv.rfind("value,score\n", 0) == 0);
}

TEST_CASE("landscape identities") {
  MlpSpec spec;
  spec.layer_dims = {2, 6, 3};
  const FlatVector pre = init_weights(spec, 1);
  const FlatVector ft1 = axpy(0.37f, init_weights(spec, 2), pre);
  const FlatVector ft2 = axpy(-0.21f, init_weights(spec, 3), pre);
  const TaskVector t1{pre, ft1}, t2{pre, ft2};
  CHECK(landscape_point(pre, t1, t2, 1.0, 0.0).bitwise_equal(ft1));
  CHECK(landscape_point(pre, t1, t2, 0.0, 1.0).bitwise_equal(ft2));
  CHECK(landscape_point(pre, t1, t2, 0.0, 0.0).bitwise_equal(pre));

  const Batch b = random_batch(60, 2, 5);
  Batch b3 = b;
  for (auto& y : b3.labels) y = y % 3;
  const ScoreFn score = [&](const FlatVector& w) { return accuracy(spec, w, b3); };
  const std::vector<double> axis{-0.5, 0.0, 0.5, 1.0, 1.5};
  const LandscapeGrid g = landscape_slice(pre, t1, t2, axis, axis, score);
  REQUIRE(g.scores.size() == 25);
  CHECK(g.at(3, 1) == score(ft1));
  CHECK(g.at(1, 1) == score(pre));
  for (std::size_t ia = 0; ia < 5; ++ia) {
    for (std::size_t ib = 0; ib < 5; ++ib) CHECK(g.at(ia, ib) == score(landscape_point(pre, t1, t2, axis[ia], axis[ib])));
  }
  const std::string csv = landscape_csv(g);
  CHECK(csv.rfind("a,b,score\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 26);
  const std::string svg = landscape_svg(g, "t");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("ensemble") {
  Logits a{1, 2, {2, 0}}, b{1, 2, {0, 2}};
  const std::vector<Logits> ab{a, b};
  CHECK(ensemble_logits(ab) == std::vector<int>{0});

  MlpSpec spec;
  spec.layer_dims = {2, 5, 3};
  const std::vector<FlatVector> models{init_weights(spec, 1), init_weights(spec, 2), init_weights(spec, 3)};
  Batch data = random_batch(100, 2, 6);
  for (auto& y : data.labels) y = y % 3;
  const std::vector<FlatVector> one(3, models[0]);
  CHECK(ensemble_predict(spec, one, data) == predict(spec, models[0], data));

  const auto got = ensemble_predict(spec, models, data);
  std::vector<Logits> logits;
  for (const auto& m : models) logits.push_back(forward(spec, m, data));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<double> avg(3, 0.0);
    for (const auto& l : logits) {
      for (std::size_t c = 0; c < 3; ++c) avg[c] += l.row(i)[c];
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c) {
      if (avg[c] > avg[best]) best = c;
    }
    CHECK(got[i] == static_cast<int>(best));
    hits += static_cast<int>(best) == data.labels[i];
  }
  CHECK(ensemble_accuracy(spec, models, data) == static_cast<double>(hits) / 100.0);

  const std::vector<Logits> mismatch{Logits{1, 2, {0, 1}}, Logits{1, 3, {0, 1, 2}}};
  CHECK_THROWS(ensemble_logits(mismatch));
}
