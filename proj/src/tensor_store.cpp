#include "mevo/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"

namespace mevo {

using json = nlohmann::json;

std::int64_t element_count(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t s : shape) n *= s;
  return n;
}

// ---------------------------------------------------------------------------
// TensorMap

void TensorMap::insert(std::string name, Tensor tensor) {
  if (name.empty()) throw InvalidArgument("tensor name must be non-empty");
  if (name == "__metadata__") throw InvalidArgument("tensor name '__metadata__' is reserved");
  for (std::int64_t s : tensor.shape) {
    if (s <= 0) throw InvalidArgument("tensor '" + name + "' has a non-positive dimension");
  }
  if (static_cast<std::size_t>(element_count(tensor.shape)) != tensor.data.size()) {
    throw InvalidArgument("tensor '" + name + "' data length does not match its shape");
  }
  auto [it, inserted] = entries_.emplace(std::move(name), std::move(tensor));
  if (!inserted) throw InvalidArgument("duplicate tensor name '" + it->first + "'");
}

const Tensor& TensorMap::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw SchemaMismatch("no tensor named '" + name + "'");
  return it->second;
}

bool TensorMap::bitwise_equal(const TensorMap& other) const {
  if (metadata_ != other.metadata_ || entries_.size() != other.entries_.size()) return false;
  return std::equal(entries_.begin(), entries_.end(), other.entries_.begin(),
                    [](const auto& a, const auto& b) {
                      return a.first == b.first && a.second.shape == b.second.shape &&
                             a.second.data.size() == b.second.data.size() &&
                             std::memcmp(a.second.data.data(), b.second.data.data(),
                                         a.second.data.size() * sizeof(float)) == 0;
                    });
}

// ---------------------------------------------------------------------------
// ParamSchema

ParamSchema::ParamSchema(std::vector<std::pair<std::string, Shape>> tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < tensors.size(); ++i) {
    if (tensors[i].first == tensors[i - 1].first) {
      throw InvalidArgument("duplicate slot name '" + tensors[i].first + "'");
    }
  }
  std::size_t offset = 0;
  for (auto& [name, shape] : tensors) {
    const auto len = static_cast<std::size_t>(element_count(shape));
    slots_.push_back(ParamSlot{std::move(name), std::move(shape), offset, len});
    offset += len;
  }
  total_dim_ = offset;
}

ParamSchema ParamSchema::from_map(const TensorMap& map) {
  std::vector<std::pair<std::string, Shape>> tensors;
  for (const auto& [name, t] : map.entries()) tensors.emplace_back(name, t.shape);
  return ParamSchema(std::move(tensors));
}

const ParamSlot& ParamSchema::slot(const std::string& name) const {
  auto it = std::lower_bound(slots_.begin(), slots_.end(), name,
                             [](const ParamSlot& s, const std::string& n) { return s.name < n; });
  if (it == slots_.end() || it->name != name) throw SchemaMismatch("no slot named '" + name + "'");
  return *it;
}

bool ParamSchema::contains(const std::string& name) const {
  auto it = std::lower_bound(slots_.begin(), slots_.end(), name,
                             [](const ParamSlot& s, const std::string& n) { return s.name < n; });
  return it != slots_.end() && it->name == name;
}

std::uint64_t ParamSchema::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : slots_) {
    feed(s.name.data(), s.name.size());
    feed("\0", 1);
    for (std::int64_t d : s.shape) {
      std::uint8_t le[8];
      for (int k = 0; k < 8; ++k) le[k] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(d) >> (8 * k));
      feed(le, 8);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// FlatVector

FlatVector::FlatVector(SchemaPtr schema)
    : schema_(std::move(schema)), values_(schema_ ? schema_->total_dim() : 0, 0.0f) {}

FlatVector::FlatVector(SchemaPtr schema, std::vector<float> values)
    : schema_(std::move(schema)), values_(std::move(values)) {
  if (!schema_) throw InvalidArgument("FlatVector requires a schema");
  if (values_.size() != schema_->total_dim()) {
    throw SchemaMismatch("vector length " + std::to_string(values_.size()) +
                         " does not match schema dimension " +
                         std::to_string(schema_->total_dim()));
  }
}

std::span<const float> FlatVector::tensor(const std::string& name) const {
  const ParamSlot& s = schema_->slot(name);
  return std::span<const float>(values_).subspan(s.offset, s.length);
}

std::span<float> FlatVector::tensor(const std::string& name) {
  const ParamSlot& s = schema_->slot(name);
  return std::span<float>(values_).subspan(s.offset, s.length);
}

bool FlatVector::same_schema(const FlatVector& other) const {
  if (schema_ == other.schema_) return true;
  return schema_ && other.schema_ && *schema_ == *other.schema_;
}

bool FlatVector::bitwise_equal(const FlatVector& other) const {
  return same_schema(other) && values_.size() == other.values_.size() &&
         std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(float)) == 0;
}

void require_same_schema(const FlatVector& a, const FlatVector& b) {
  if (!a.same_schema(b)) throw SchemaMismatch("vectors do not share a parameter schema");
}

void require_same_schema(std::span<const FlatVector> vectors) {
  for (std::size_t i = 1; i < vectors.size(); ++i) require_same_schema(vectors[0], vectors[i]);
}

FlatVector flatten(const TensorMap& map, const SchemaPtr& schema) {
  if (!schema) throw InvalidArgument("flatten requires a schema");
  if (map.size() != schema->slots().size()) {
    throw SchemaMismatch("map has " + std::to_string(map.size()) + " tensors, schema has " +
                         std::to_string(schema->slots().size()));
  }
  std::vector<float> values(schema->total_dim());
  auto it = map.entries().begin();
  for (const ParamSlot& slot : schema->slots()) {
    const auto& [name, tensor] = *it++;
    if (name != slot.name) {
      throw SchemaMismatch("tensor '" + name + "' does not match schema slot '" + slot.name + "'");
    }
    if (tensor.shape != slot.shape) throw SchemaMismatch("shape mismatch for tensor '" + name + "'");
    std::copy(tensor.data.begin(), tensor.data.end(), values.begin() + static_cast<std::ptrdiff_t>(slot.offset));
  }
  return FlatVector(schema, std::move(values));
}

TensorMap unflatten(const FlatVector& vector) {
  TensorMap map;
  for (const ParamSlot& slot : vector.schema()->slots()) {
    auto src = vector.values().subspan(slot.offset, slot.length);
    map.insert(slot.name, Tensor{slot.shape, std::vector<float>(src.begin(), src.end())});
  }
  return map;
}

FlatVector axpy(float a, const FlatVector& x, const FlatVector& y) {
  require_same_schema(x, y);
  FlatVector out(x.schema());
  kernels::axpy(a, x.values(), y.values(), out.values());
  return out;
}

FlatVector subtract(const FlatVector& x, const FlatVector& y) {
  require_same_schema(x, y);
  FlatVector out(x.schema());
  kernels::sub(x.values(), y.values(), out.values());
  return out;
}

// ---------------------------------------------------------------------------
// Container encoding

namespace {

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

void append_floats_le(std::vector<std::uint8_t>& out, const std::vector<float>& data) {
  const std::size_t start = out.size();
  out.resize(start + data.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, data.data(), data.size() * 4);
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(data[i]);
      for (int k = 0; k < 4; ++k) out[start + 4 * i + k] = static_cast<std::uint8_t>(bits >> (8 * k));
    }
  }
}

std::vector<float> read_floats_le(const std::uint8_t* p, std::size_t count) {
  std::vector<float> data(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(data.data(), p, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[4 * i + k]) << (8 * k);
      data[i] = std::bit_cast<float>(bits);
    }
  }
  return data;
}

// Parses JSON while rejecting duplicate keys at any depth.
json parse_header_json(std::string_view text) {
  std::vector<std::set<std::string>> open;
  auto cb = [&open](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        open.emplace_back();
        break;
      case json::parse_event_t::object_end:
        open.pop_back();
        break;
      case json::parse_event_t::key: {
        const auto& key = parsed.get_ref<const std::string&>();
        if (!open.back().insert(key).second) throw FormatError("duplicate name '" + key + "' in header");
        break;
      }
      default:
        break;
    }
    return true;
  };
  try {
    return json::parse(text.begin(), text.end(), cb);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TensorMap& map) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.entries()) {
    const std::uint64_t bytes = t.data.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!map.metadata().empty()) header["__metadata__"] = map.metadata();

  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  put_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : map.entries()) append_floats_le(out, t.data);
  return out;
}

TensorMap decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("malformed header: file shorter than the length prefix");
  std::uint64_t header_len = 0;
  for (int k = 0; k < 8; ++k) header_len |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
  if (header_len == 0) throw FormatError("malformed header: empty header");
  if (header_len > bytes.size() - 8) throw FormatError("truncated buffer: header extends past end of file");

  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  const json header = parse_header_json(text);
  if (!header.is_object()) throw FormatError("malformed header: not a JSON object");

  const auto buffer = bytes.subspan(8 + header_len);
  TensorMap map;
  std::uint64_t expected_begin = 0;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw FormatError("malformed header: __metadata__ is not an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw FormatError("malformed header: metadata values must be strings");
        map.metadata()[k] = v.get<std::string>();
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      throw FormatError("malformed header: entry '" + name + "' lacks dtype/shape/data_offsets");
    }
    if (!entry["dtype"].is_string()) throw FormatError("malformed header: dtype of '" + name + "'");
    const auto dtype = entry["dtype"].get<std::string>();
    if (dtype != "F32") throw FormatError("unsupported dtype '" + dtype + "' for tensor '" + name + "'");

    Shape shape;
    std::uint64_t begin = 0, end = 0;
    try {
      shape = entry["shape"].get<Shape>();
      const auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2) throw FormatError("malformed header: data_offsets of '" + name + "'");
      begin = offsets[0];
      end = offsets[1];
    } catch (const json::exception& e) {
      throw FormatError("malformed header: entry '" + name + "': " + e.what());
    }
    for (std::int64_t s : shape) {
      if (s <= 0) throw FormatError("malformed header: non-positive dimension in '" + name + "'");
    }
    const auto count = static_cast<std::uint64_t>(element_count(shape));
    if (begin != expected_begin || end < begin) {
      throw FormatError("malformed header: offsets of '" + name + "' are not contiguous in name order");
    }
    if (end - begin != count * 4) throw FormatError("malformed header: byte range of '" + name + "' does not match its shape");
    if (end > buffer.size()) throw FormatError("truncated buffer: tensor '" + name + "' extends past end of file");
    map.insert(name, Tensor{std::move(shape), read_floats_le(buffer.data() + begin, count)});
    expected_begin = end;
  }
  if (expected_begin != buffer.size()) throw FormatError("malformed header: trailing bytes after the last tensor");
  return map;
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void save_checkpoint(const TensorMap& map, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace mevo
