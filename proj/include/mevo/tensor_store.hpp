#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mevo {

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<float> data;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named tensors in lexicographic name order, plus a string metadata map.
/// Shape/data consistency and name validity are enforced on insertion.
class TensorMap {
 public:
  using Entries = std::map<std::string, Tensor>;

  void insert(std::string name, Tensor tensor);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.contains(name); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const Entries& entries() const { return entries_; }
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// Bitwise comparison of tensor payloads (NaN payloads compare by bits).
  bool bitwise_equal(const TensorMap& other) const;

 private:
  Entries entries_;
  std::map<std::string, std::string> metadata_;
};

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const ParamSlot&, const ParamSlot&) = default;
};

/// Layout of a flattened checkpoint: contiguous slots in name order.
class ParamSchema {
 public:
  ParamSchema() = default;
  /// Slots are sorted by name; offsets are assigned contiguously from zero.
  explicit ParamSchema(std::vector<std::pair<std::string, Shape>> tensors);
  static ParamSchema from_map(const TensorMap& map);

  const std::vector<ParamSlot>& slots() const { return slots_; }
  std::size_t total_dim() const { return total_dim_; }
  const ParamSlot& slot(const std::string& name) const;
  bool contains(const std::string& name) const;
  /// FNV-1a over names and shapes; stable across runs and platforms.
  std::uint64_t hash() const;

  friend bool operator==(const ParamSchema& a, const ParamSchema& b) {
    return a.total_dim_ == b.total_dim_ && a.slots_ == b.slots_;
  }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_dim_ = 0;
};

using SchemaPtr = std::shared_ptr<const ParamSchema>;

/// A checkpoint as one length-d vector under a shared schema.
class FlatVector {
 public:
  FlatVector() = default;
  explicit FlatVector(SchemaPtr schema);  // zero-filled
  FlatVector(SchemaPtr schema, std::vector<float> values);

  const SchemaPtr& schema() const { return schema_; }
  std::size_t size() const { return values_.size(); }
  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }
  float operator[](std::size_t j) const { return values_[j]; }
  float& operator[](std::size_t j) { return values_[j]; }

  std::span<const float> tensor(const std::string& name) const;
  std::span<float> tensor(const std::string& name);

  bool same_schema(const FlatVector& other) const;
  bool bitwise_equal(const FlatVector& other) const;

 private:
  SchemaPtr schema_;
  std::vector<float> values_;
};

/// Throws SchemaMismatch unless every vector shares the first one's schema.
void require_same_schema(std::span<const FlatVector> vectors);
void require_same_schema(const FlatVector& a, const FlatVector& b);

FlatVector flatten(const TensorMap& map, const SchemaPtr& schema);
TensorMap unflatten(const FlatVector& vector);

/// out = a*x + y with a single rounding per element.
FlatVector axpy(float a, const FlatVector& x, const FlatVector& y);
/// x - y elementwise.
FlatVector subtract(const FlatVector& x, const FlatVector& y);

/// Serialize in the header+buffer container (8-byte LE header length, JSON
/// header, raw little-endian F32 payload). Deterministic byte-for-byte.
std::vector<std::uint8_t> encode_checkpoint(const TensorMap& map);
TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes);

TensorMap load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const TensorMap& map, const std::filesystem::path& path);

}  // namespace mevo
