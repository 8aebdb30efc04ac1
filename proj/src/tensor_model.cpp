#include "fedagg/tensor_model.hpp"

#include <cstdio>
#include <cstring>
#include <limits>
#include <random>
#include <set>

namespace fedagg {

std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

std::string_view to_string(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

Dtype parse_dtype(std::string_view s) {
  if (s == "f32" || s == "F32") return Dtype::F32;
  if (s == "f64" || s == "F64") return Dtype::F64;
  throw Error(ErrorCode::InvalidValue, "unknown dtype", std::string(s));
}

std::uint64_t shape_elements(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorCode::InvalidValue, "empty shape");
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorCode::InvalidValue, "zero dimension");
    if (n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw Error(ErrorCode::InvalidValue, "shape overflows u64");
    }
    n *= d;
  }
  return n;
}

namespace {

void check_layer(const std::string& name, const Shape& shape, std::size_t len) {
  if (name.empty()) throw Error(ErrorCode::InvalidValue, "empty layer name");
  if (name.size() > 0xFFFF) throw Error(ErrorCode::InvalidValue, "layer name too long", name);
  if (shape.size() > 0xFF) throw Error(ErrorCode::InvalidValue, "rank above 255", name);
  if (shape_elements(shape) != len) {
    throw Error(ErrorCode::InvalidValue, "data length does not match shape", name);
  }
}

}  // namespace

LayerTensor::LayerTensor(std::string name, Shape shape, std::vector<float> data)
    : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
  check_layer(name_, shape_, size());
}

LayerTensor::LayerTensor(std::string name, Shape shape, std::vector<double> data)
    : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
  check_layer(name_, shape_, size());
}

Dtype LayerTensor::dtype() const {
  return data_.index() == 0 ? Dtype::F32 : Dtype::F64;
}

std::size_t LayerTensor::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double LayerTensor::at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
}

bool operator==(const LayerTensor& a, const LayerTensor& b) {
  if (a.name_ != b.name_ || a.shape_ != b.shape_ || a.dtype() != b.dtype() ||
      a.size() != b.size()) {
    return false;
  }
  return std::visit(
      [&](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b.data_);
        return std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
      },
      a.data_);
}

void ModelSchema::validate() const {
  if (layers.empty()) throw Error(ErrorCode::InvalidValue, "schema has no layers");
  std::set<std::string> names;
  for (const auto& l : layers) {
    if (l.name.empty()) throw Error(ErrorCode::InvalidValue, "empty layer name");
    if (!names.insert(l.name).second) {
      throw Error(ErrorCode::InvalidValue, "duplicate layer name", l.name);
    }
    if (l.dtype != layers.front().dtype) {
      throw Error(ErrorCode::InvalidValue, "mixed dtypes in one schema", l.name);
    }
    if (l.shape.size() > 0xFF) throw Error(ErrorCode::InvalidValue, "rank above 255", l.name);
    l.elements();
  }
}

std::uint64_t ModelSchema::elements() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.elements();
  return n;
}

std::uint64_t ModelSchema::payload_bytes() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.elements() * dtype_size(l.dtype);
  return n;
}

ModelUpdate::ModelUpdate(std::string client_id, std::uint64_t round,
                         std::uint64_t sample_count, std::vector<LayerTensor> layers)
    : client_id_(std::move(client_id)),
      round_(round),
      sample_count_(sample_count),
      layers_(std::move(layers)) {
  if (client_id_.empty()) throw Error(ErrorCode::InvalidValue, "empty client_id");
  if (client_id_.size() > 0xFFFF) throw Error(ErrorCode::InvalidValue, "client_id too long");
  if (sample_count_ < 1) {
    throw Error(ErrorCode::InvalidValue, "sample_count must be >= 1", client_id_);
  }
  schema_of(layers_).validate();
}

ModelSchema schema_of(const std::vector<LayerTensor>& layers) {
  ModelSchema s;
  s.layers.reserve(layers.size());
  for (const auto& l : layers) s.layers.push_back({l.name(), l.dtype(), l.shape()});
  return s;
}

ModelSchema schema_of(const ModelUpdate& u) { return schema_of(u.layers()); }

void check_compatible(const ModelSchema& a, const ModelSchema& b) {
  const auto n = std::min(a.layers.size(), b.layers.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& la = a.layers[i];
    const auto& lb = b.layers[i];
    const auto where = "layer " + std::to_string(i);
    if (la.name != lb.name) {
      throw Error(ErrorCode::SchemaMismatch, la.name + " vs " + lb.name, where + ", name");
    }
    if (la.dtype != lb.dtype) {
      throw Error(ErrorCode::SchemaMismatch,
                  std::string(to_string(la.dtype)) + " vs " + std::string(to_string(lb.dtype)),
                  where + ", dtype");
    }
    if (la.shape != lb.shape) {
      throw Error(ErrorCode::SchemaMismatch, "shapes differ", where + ", shape");
    }
  }
  if (a.layers.size() != b.layers.size()) {
    throw Error(ErrorCode::SchemaMismatch,
                std::to_string(a.layers.size()) + " vs " + std::to_string(b.layers.size()) +
                    " layers",
                "layer " + std::to_string(n) + ", count");
  }
}

namespace {

void write_record(ByteWriter& w, std::string_view client_id, std::uint64_t round,
                  std::uint64_t sample_count, const std::vector<LayerTensor>& layers) {
  w.put_magic(kUpdateMagic);
  w.put<std::uint16_t>(kUpdateVersion);
  w.put<std::uint16_t>(0);  // flags
  w.put_str16(client_id);
  w.put<std::uint64_t>(round);
  w.put<std::uint64_t>(sample_count);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    w.put_str16(l.name());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.dtype()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.shape().size()));
    for (auto d : l.shape()) w.put<std::uint64_t>(d);
    std::visit([&](const auto& v) { w.put_array(std::span(v)); }, l.data());
  }
  w.put_crc();
}

struct Record {
  std::string client_id;
  std::uint64_t round;
  std::uint64_t sample_count;
  std::vector<LayerTensor> layers;
};

Record read_record(ByteView bytes) {
  // Magic and version are checked before the checksum so that foreign or
  // newer records get a precise error instead of a checksum failure.
  {
    ByteReader head(bytes);
    head.expect_magic(kUpdateMagic);
    const auto version = head.get<std::uint16_t>("version");
    if (version != kUpdateVersion) {
      throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(version),
                  "version", 4);
    }
  }
  const auto body = checked_body(bytes);
  ByteReader r(body);
  r.expect_magic(kUpdateMagic);
  r.get<std::uint16_t>("version");
  const auto flags_at = r.pos();
  if (r.get<std::uint16_t>("flags") != 0) {
    throw Error(ErrorCode::InvalidValue, "nonzero flags", "flags", flags_at);
  }
  Record rec;
  rec.client_id = r.get_str16("client_id");
  rec.round = r.get<std::uint64_t>("round");
  rec.sample_count = r.get<std::uint64_t>("sample_count");
  const auto layer_count = r.get<std::uint32_t>("layer_count");
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    auto name = r.get_str16("layer.name");
    const auto dtype_at = r.pos();
    const auto tag = r.get<std::uint8_t>("layer.dtype");
    if (tag > 1) throw Error(ErrorCode::InvalidValue, "dtype tag", "layer.dtype", dtype_at);
    const auto rank = r.get<std::uint8_t>("layer.rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("layer.dims");
    const auto dims_at = r.pos();
    std::uint64_t n;
    try {
      n = shape_elements(shape);
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidValue, e.what(), "layer.dims", dims_at);
    }
    const auto width = dtype_size(static_cast<Dtype>(tag));
    if (n > r.remaining() / width) {
      throw Error(ErrorCode::Truncated, "payload shorter than shape", "layer.payload", r.pos());
    }
    if (tag == 0) {
      std::vector<float> data(n);
      r.get_array(std::span(data), "layer.payload");
      rec.layers.emplace_back(std::move(name), std::move(shape), std::move(data));
    } else {
      std::vector<double> data(n);
      r.get_array(std::span(data), "layer.payload");
      rec.layers.emplace_back(std::move(name), std::move(shape), std::move(data));
    }
  }
  r.expect_end("layers");
  return rec;
}

}  // namespace

Bytes encode_update(const ModelUpdate& u) {
  ByteWriter w(encoded_update_size(schema_of(u), u.client_id().size()));
  write_record(w, u.client_id(), u.round(), u.sample_count(), u.layers());
  return std::move(w).take();
}

ModelUpdate decode_update(ByteView bytes) {
  auto rec = read_record(bytes);
  try {
    return ModelUpdate(std::move(rec.client_id), rec.round, rec.sample_count,
                       std::move(rec.layers));
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidValue, e.what(), "record");
  }
}

std::uint64_t encoded_update_size(const ModelSchema& schema, std::size_t client_id_len) {
  std::uint64_t n = 4 + 2 + 2 + 2 + client_id_len + 8 + 8 + 4;
  for (const auto& l : schema.layers) {
    n += 2 + l.name.size() + 1 + 1 + 8 * l.shape.size() + l.elements() * dtype_size(l.dtype);
  }
  return n + 4;
}

Bytes encode_global(const GlobalModel& m) {
  ByteWriter w(encoded_update_size(schema_of(m.layers), kGlobalClientId.size()));
  write_record(w, kGlobalClientId, m.round, m.count_sum, m.layers);
  return std::move(w).take();
}

GlobalModel decode_global(ByteView bytes) {
  auto rec = read_record(bytes);
  if (rec.client_id != kGlobalClientId) {
    throw Error(ErrorCode::ValidationFailed, "not a global model record", rec.client_id);
  }
  GlobalModel m;
  m.round = rec.round;
  m.layers = std::move(rec.layers);
  m.count_sum = rec.sample_count;
  return m;
}

ModelUpdate synth_update(std::uint64_t seed, const ModelSchema& schema, std::string client_id,
                         std::uint64_t round, std::uint64_t sample_count) {
  schema.validate();
  std::mt19937_64 gen(seed);
  // Top 24 bits of each draw -> k in [0, 2^24); value = (k - 2^23) / 2^23.
  constexpr double kScale = 1.0 / 8388608.0;
  auto draw = [&] { return (static_cast<double>(gen() >> 40) - 8388608.0) * kScale; };
  std::vector<LayerTensor> layers;
  layers.reserve(schema.layers.size());
  for (const auto& spec : schema.layers) {
    const auto n = spec.elements();
    if (spec.dtype == Dtype::F32) {
      std::vector<float> data(n);
      for (auto& x : data) x = static_cast<float>(draw());
      layers.emplace_back(spec.name, spec.shape, std::move(data));
    } else {
      std::vector<double> data(n);
      for (auto& x : data) x = draw();
      layers.emplace_back(spec.name, spec.shape, std::move(data));
    }
  }
  return ModelUpdate(std::move(client_id), round, sample_count, std::move(layers));
}

std::string schema_digest(const ModelSchema& schema) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(schema.layers.size()));
  for (const auto& l : schema.layers) {
    w.put_str16(l.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.shape.size()));
    for (auto d : l.shape) w.put<std::uint64_t>(d);
  }
  const auto bytes = std::move(w).take();
  // 64 bits: crc32c of the bytes, then of the reversed bytes.
  Bytes rev(bytes.rbegin(), bytes.rend());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08x%08x", crc32c(bytes), crc32c(rev));
  return buf;
}

}  // namespace fedagg
