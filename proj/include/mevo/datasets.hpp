#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mevo/inference.hpp"

namespace mevo {

/// Shape of one synthetic domain: C Gaussian classes with means on a circle.
struct DomainTemplate {
  std::size_t classes = 6;
  double radius = 2.0;
  double noise = 0.15;      // isotropic standard deviation
  std::size_t train = 1000;
  std::optional<std::size_t> dev;  // defaults to ceil(5% of train)
  std::size_t test = 500;
  std::size_t n_ood = 2;

  std::size_t dev_count() const;
  void validate() const;
};

struct Domain {
  std::size_t id = 0;
  double rotation = 0.0;  // radians
  Batch train, dev, test;
};

struct SplitSet {
  std::vector<Domain> domains;
  std::vector<Domain> ood;  // test split only

  std::vector<Batch> dev_batches() const;
  std::vector<Batch> test_batches() const;
  std::vector<Batch> ood_batches() const;
  Batch pooled_train() const;
};

/// Class c of domain d has mean radius * (cos, sin)(2*pi*c/C + d*pi/n_domains).
/// OOD domains sit half-way between consecutive in-domain rotations.
SplitSet make_domains(std::size_t n_domains, const DomainTemplate& tmpl, std::uint64_t seed);

/// Class mean of a domain rotated by `rotation`.
std::vector<double> class_mean(const DomainTemplate& tmpl, std::size_t cls, double rotation);

/// Per-partition label proportions: partition p weights classes with
/// c % n_parts == p by `factor`, the rest by 1, normalized. factor 1 is uniform.
std::vector<std::vector<double>> skew_proportions(std::size_t n_parts, std::size_t classes, double factor);

/// Integer class counts summing to `total` (largest remainder, ties to lower class).
std::vector<std::size_t> proportion_counts(const std::vector<double>& proportions, std::size_t total);

/// Disjoint subsets of `source`, each with per_part examples whose label
/// histogram follows proportions[p].
std::vector<Batch> non_iid_partition(const Batch& source, std::size_t classes, std::size_t per_part,
                                     const std::vector<std::vector<double>>& proportions, std::uint64_t seed);

/// ceil(fraction * n) without floating-point overshoot on exact products.
std::size_t fraction_count(double fraction, std::size_t n);

/// Copy whose dev batches are prefixes of length ceil(fraction * |dev|).
SplitSet dev_fraction(const SplitSet& split, double fraction);

/// feature columns, label, domain, split.
std::string to_csv(const SplitSet& split);

}  // namespace mevo
