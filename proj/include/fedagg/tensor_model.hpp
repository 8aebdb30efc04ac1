#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedagg/bytes.hpp"

namespace fedagg {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

std::size_t dtype_size(Dtype d);
std::string_view to_string(Dtype d);
Dtype parse_dtype(std::string_view s);

using Shape = std::vector<std::uint64_t>;
using TensorData = std::variant<std::vector<float>, std::vector<double>>;

// Product of dims; throws InvalidValue on empty shape, zero dims or overflow.
std::uint64_t shape_elements(const Shape& shape);

class LayerTensor {
 public:
  LayerTensor(std::string name, Shape shape, std::vector<float> data);
  LayerTensor(std::string name, Shape shape, std::vector<double> data);

  const std::string& name() const { return name_; }
  Dtype dtype() const;
  const Shape& shape() const { return shape_; }
  std::size_t size() const;
  std::size_t payload_bytes() const { return size() * dtype_size(dtype()); }

  const TensorData& data() const { return data_; }
  std::span<const float> f32() const { return std::get<std::vector<float>>(data_); }
  std::span<const double> f64() const { return std::get<std::vector<double>>(data_); }
  double at(std::size_t i) const;

  // Bit-exact comparison of name, shape, dtype and payload.
  friend bool operator==(const LayerTensor& a, const LayerTensor& b);

 private:
  std::string name_;
  Shape shape_;
  TensorData data_;
};

struct LayerSpec {
  std::string name;
  Dtype dtype = Dtype::F32;
  Shape shape;

  std::uint64_t elements() const { return shape_elements(shape); }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSchema {
  std::vector<LayerSpec> layers;

  // Non-empty, unique non-empty names, one dtype, valid shapes.
  void validate() const;
  Dtype dtype() const { return layers.front().dtype; }
  std::uint64_t elements() const;
  std::uint64_t payload_bytes() const;

  friend bool operator==(const ModelSchema&, const ModelSchema&) = default;
};

class ModelUpdate {
 public:
  ModelUpdate(std::string client_id, std::uint64_t round,
              std::uint64_t sample_count, std::vector<LayerTensor> layers);

  const std::string& client_id() const { return client_id_; }
  std::uint64_t round() const { return round_; }
  std::uint64_t sample_count() const { return sample_count_; }
  const std::vector<LayerTensor>& layers() const { return layers_; }

  friend bool operator==(const ModelUpdate&, const ModelUpdate&) = default;

 private:
  std::string client_id_;
  std::uint64_t round_;
  std::uint64_t sample_count_;
  std::vector<LayerTensor> layers_;
};

// Fused model for one round. count_sum/update_count describe what went in;
// the encoded form carries count_sum only.
struct GlobalModel {
  std::uint64_t round = 0;
  std::vector<LayerTensor> layers;
  std::uint64_t count_sum = 0;
  std::uint64_t update_count = 0;

  friend bool operator==(const GlobalModel&, const GlobalModel&) = default;
};

ModelSchema schema_of(const ModelUpdate& u);
ModelSchema schema_of(const std::vector<LayerTensor>& layers);

// Throws SchemaMismatch naming the first differing layer attribute.
void check_compatible(const ModelSchema& a, const ModelSchema& b);

inline constexpr std::string_view kUpdateMagic = "FAUP";
inline constexpr std::uint16_t kUpdateVersion = 1;

Bytes encode_update(const ModelUpdate& u);
ModelUpdate decode_update(ByteView bytes);

// Exact FAUF size for a schema and a client id of the given byte length.
std::uint64_t encoded_update_size(const ModelSchema& schema,
                                  std::size_t client_id_len);

// Global models travel as FAUF records with client id "global" and
// sample_count = count_sum.
inline constexpr std::string_view kGlobalClientId = "global";
Bytes encode_global(const GlobalModel& m);
GlobalModel decode_global(ByteView bytes);

// Deterministic data in [-1, 1) drawn from `seed` only. Values sit on a
// 2^-23 grid, so they are exact in both F32 and F64.
ModelUpdate synth_update(std::uint64_t seed, const ModelSchema& schema,
                         std::string client_id, std::uint64_t round,
                         std::uint64_t sample_count);

// Stable hex digest of the schema (names, dtypes, shapes).
std::string schema_digest(const ModelSchema& schema);

}  // namespace fedagg
