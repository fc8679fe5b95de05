#include "mevo/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "mevo/error.hpp"
#include "mevo/rng.hpp"

namespace mevo {

std::size_t fraction_count(double fraction, std::size_t n) {
  const double p = fraction * static_cast<double>(n);
  const double r = std::round(p);
  const double c = std::abs(p - r) <= 1e-9 * std::max(1.0, p) ? r : std::ceil(p);
  return std::min(n, static_cast<std::size_t>(c));
}

std::size_t DomainTemplate::dev_count() const { return dev ? *dev : fraction_count(0.05, train); }

void DomainTemplate::validate() const {
  if (classes < 2) throw InvalidArgument("a domain needs at least two classes");
  if (train == 0 || test == 0 || dev_count() == 0) throw InvalidArgument("split sizes must be positive");
  if (!(noise > 0.0)) throw InvalidArgument("noise must be positive (covariance must be positive definite)");
  if (!(radius > 0.0)) throw InvalidArgument("radius must be positive");
}

std::vector<double> class_mean(const DomainTemplate& tmpl, std::size_t cls, double rotation) {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(tmpl.classes) + rotation;
  return {tmpl.radius * std::cos(angle), tmpl.radius * std::sin(angle)};
}

std::vector<Batch> SplitSet::dev_batches() const {
  std::vector<Batch> out;
  for (const auto& d : domains) out.push_back(d.dev);
  return out;
}

std::vector<Batch> SplitSet::test_batches() const {
  std::vector<Batch> out;
  for (const auto& d : domains) out.push_back(d.test);
  return out;
}

std::vector<Batch> SplitSet::ood_batches() const {
  std::vector<Batch> out;
  for (const auto& d : ood) out.push_back(d.test);
  return out;
}

Batch SplitSet::pooled_train() const {
  std::vector<Batch> parts;
  for (const auto& d : domains) parts.push_back(d.train);
  return Batch::concat(parts);
}

namespace {

// One pool of train+dev+test examples with balanced labels, then split by index.
Domain make_domain(std::size_t id, double rotation, const DomainTemplate& tmpl, std::size_t train, std::size_t dev,
                   std::size_t test, std::uint64_t seed, std::uint64_t stream_tag) {
  Domain d;
  d.id = id;
  d.rotation = rotation;
  const std::size_t total = train + dev + test;
  std::vector<int> labels(total);
  for (std::size_t k = 0; k < total; ++k) labels[k] = static_cast<int>(k % tmpl.classes);
  CounterRng order_rng = CounterRng::stream(seed, stream_tag, 0);
  deterministic_shuffle(labels.begin(), labels.end(), order_rng);

  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < tmpl.classes; ++c) means.push_back(class_mean(tmpl, c, rotation));

  CounterRng noise_rng = CounterRng::stream(seed, stream_tag, 1);
  for (std::size_t k = 0; k < total; ++k) {
    const auto& mu = means[static_cast<std::size_t>(labels[k])];
    const float x[2] = {static_cast<float>(mu[0] + tmpl.noise * noise_rng.normal()),
                        static_cast<float>(mu[1] + tmpl.noise * noise_rng.normal())};
    Batch& target = k < train ? d.train : (k < train + dev ? d.dev : d.test);
    target.push_back(x, labels[k]);
  }
  for (Batch* b : {&d.train, &d.dev, &d.test}) b->dim = 2;
  return d;
}

}  // namespace

SplitSet make_domains(std::size_t n_domains, const DomainTemplate& tmpl, std::uint64_t seed) {
  if (n_domains < 1) throw InvalidArgument("need at least one domain");
  tmpl.validate();
  SplitSet set;
  const double step = std::numbers::pi / static_cast<double>(n_domains);
  for (std::size_t d = 0; d < n_domains; ++d) {
    set.domains.push_back(make_domain(d, static_cast<double>(d) * step, tmpl, tmpl.train, tmpl.dev_count(), tmpl.test,
                                      seed, d));
  }
  for (std::size_t o = 0; o < tmpl.n_ood; ++o) {
    set.ood.push_back(make_domain(n_domains + o, (static_cast<double>(o) + 0.5) * step, tmpl, 0, 0, tmpl.test, seed,
                                  0x00d0000 + o));
  }
  return set;
}

std::vector<std::vector<double>> skew_proportions(std::size_t n_parts, std::size_t classes, double factor) {
  if (n_parts == 0 || classes == 0) throw InvalidArgument("need at least one partition and one class");
  if (!(factor > 0.0)) throw InvalidArgument("skew factor must be positive");
  std::vector<std::vector<double>> out(n_parts, std::vector<double>(classes));
  for (std::size_t p = 0; p < n_parts; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += out[p][c] = c % n_parts == p ? factor : 1.0;
    for (double& v : out[p]) v /= total;
  }
  return out;
}

std::vector<std::size_t> proportion_counts(const std::vector<double>& proportions, std::size_t total) {
  const double sum = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  if (!(sum > 0.0)) throw InvalidArgument("label proportions must have positive mass");
  std::vector<std::size_t> counts(proportions.size());
  std::vector<double> frac(proportions.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < proportions.size(); ++c) {
    if (proportions[c] < 0.0) throw InvalidArgument("label proportions must be non-negative");
    const double exact = static_cast<double>(total) * proportions[c] / sum;
    const double r = std::round(exact);
    const double fl = std::abs(exact - r) <= 1e-9 * std::max(1.0, exact) ? r : std::floor(exact);
    counts[c] = static_cast<std::size_t>(fl);
    frac[c] = exact - fl;
    assigned += counts[c];
  }
  std::vector<std::size_t> order(proportions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[order[k % order.size()]];
  return counts;
}

std::vector<Batch> non_iid_partition(const Batch& source, std::size_t classes, std::size_t per_part,
                                     const std::vector<std::vector<double>>& proportions, std::uint64_t seed) {
  source.validate(classes);
  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < source.size(); ++i) pools[static_cast<std::size_t>(source.labels[i])].push_back(i);
  for (std::size_t c = 0; c < classes; ++c) {
    CounterRng rng = CounterRng::stream(seed, 0x70617274, c);
    deterministic_shuffle(pools[c].begin(), pools[c].end(), rng);
  }
  std::vector<std::size_t> cursor(classes, 0);
  std::vector<Batch> parts;
  for (std::size_t p = 0; p < proportions.size(); ++p) {
    if (proportions[p].size() != classes) throw InvalidArgument("proportion vector length must equal class count");
    const auto counts = proportion_counts(proportions[p], per_part);
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < classes; ++c) {
      if (cursor[c] + counts[c] > pools[c].size()) {
        throw InvalidArgument("insufficient data: class " + std::to_string(c) + " has too few examples");
      }
      chosen.insert(chosen.end(), pools[c].begin() + static_cast<std::ptrdiff_t>(cursor[c]),
                    pools[c].begin() + static_cast<std::ptrdiff_t>(cursor[c] + counts[c]));
      cursor[c] += counts[c];
    }
    CounterRng rng = CounterRng::stream(seed, 0x6f726465, p);
    deterministic_shuffle(chosen.begin(), chosen.end(), rng);
    Batch b;
    b.dim = source.dim;
    for (std::size_t i : chosen) b.push_back(source.row(i), source.labels[i]);
    parts.push_back(std::move(b));
  }
  return parts;
}

SplitSet dev_fraction(const SplitSet& split, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("dev fraction must lie in (0, 1]");
  SplitSet out = split;
  for (auto& d : out.domains) d.dev = d.dev.prefix(fraction_count(fraction, d.dev.size()));
  return out;
}

std::string to_csv(const SplitSet& split) {
  std::string out = "x0,x1,label,domain,split\n";
  auto emit = [&out](const Batch& b, std::size_t domain, const char* name) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto r = b.row(i);
      for (float v : r) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g,", static_cast<double>(v));
        out += buf;
      }
      out += std::to_string(b.labels[i]) + "," + std::to_string(domain) + "," + name + "\n";
    }
  };
  for (const auto& d : split.domains) {
    emit(d.train, d.id, "train");
    emit(d.dev, d.id, "dev");
    emit(d.test, d.id, "test");
  }
  for (const auto& d : split.ood) emit(d.test, d.id, "ood_test");
  return out;
}

}  // namespace mevo
