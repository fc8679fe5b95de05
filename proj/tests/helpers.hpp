#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mevo/rng.hpp"
#include "mevo/tensor_store.hpp"

namespace testutil {

inline mevo::SchemaPtr flat_schema(std::size_t d, const std::string& name = "w") {
  return std::make_shared<const mevo::ParamSchema>(
      std::vector<std::pair<std::string, mevo::Shape>>{{name, {static_cast<std::int64_t>(d)}}});
}

inline mevo::FlatVector vec(const mevo::SchemaPtr& schema, std::vector<float> v) {
  return mevo::FlatVector(schema, std::move(v));
}

inline std::vector<float> random_floats(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  mevo::CounterRng rng(seed);
  std::vector<float> out(n);
  for (auto& x : out) x = static_cast<float>(rng.uniform(lo, hi));
  return out;
}

inline mevo::FlatVector random_vec(const mevo::SchemaPtr& schema, std::uint64_t seed, double lo = -1.0,
                                   double hi = 1.0) {
  return mevo::FlatVector(schema, random_floats(schema->total_dim(), seed, lo, hi));
}

}  // namespace testutil
