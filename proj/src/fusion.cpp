#include "fedagg/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace fedagg {

std::string_view to_string(FusionAlgo a) {
  return a == FusionAlgo::FedAvg ? "fedavg" : "iteravg";
}

FusionAlgo parse_fusion_algo(std::string_view s) {
  if (s == "fedavg" || s == "FedAvg") return FusionAlgo::FedAvg;
  if (s == "iteravg" || s == "IterAvg") return FusionAlgo::IterAvg;
  throw Error(ErrorCode::InvalidValue, "unknown fusion algorithm", std::string(s));
}

std::string_view to_string(Summation s) {
  return s == Summation::Naive ? "naive" : "compensated";
}

Summation parse_summation(std::string_view s) {
  if (s == "naive" || s == "Naive") return Summation::Naive;
  if (s == "compensated" || s == "Compensated") return Summation::Compensated;
  throw Error(ErrorCode::InvalidValue, "unknown summation mode", std::string(s));
}

void FusionConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw Error(ErrorCode::InvalidValue, "epsilon must be positive and finite", "epsilon");
  }
}

namespace {

// Knuth TwoSum: s + e == a + b exactly.
inline void two_sum(double a, double b, double& s, double& e) {
  s = a + b;
  const double bb = s - a;
  e = (a - (s - bb)) + (b - bb);
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
void add_layer(std::vector<double>& acc, std::vector<double>* comp, std::span<const T> w,
               double weight, bool weighted) {
  const std::size_t n = acc.size();
  if (comp == nullptr) {
    if (weighted) {
      for (std::size_t i = 0; i < n; ++i) acc[i] += weight * static_cast<double>(w[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(w[i]);
    }
    return;
  }
  auto& c = *comp;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(w[i]);
    double p = x;
    double pe = 0.0;
    if (weighted) {
      p = weight * x;
      pe = std::fma(weight, x, -p);
    }
    double s, e;
    two_sum(acc[i], p, s, e);
    acc[i] = s;
    c[i] += e + pe;
  }
}

}  // namespace

PartialAggregate::PartialAggregate(ModelSchema schema, FusionAlgo algo, Summation summation)
    : schema_(std::move(schema)), algo_(algo), summation_(summation) {
  schema_.validate();
  acc_.reserve(schema_.layers.size());
  for (const auto& l : schema_.layers) acc_.emplace_back(l.elements(), 0.0);
  if (summation_ == Summation::Compensated) comp_ = acc_;
}

void PartialAggregate::accumulate(const ModelUpdate& u) {
  check_compatible(schema_, schema_of(u));
  for (const auto& layer : u.layers()) {
    const bool ok = std::visit([](const auto& v) { return all_finite(std::span(v)); },
                               layer.data());
    if (!ok) {
      throw Error(ErrorCode::NonFiniteValue, "NaN or Inf in update from " + u.client_id(),
                  layer.name());
    }
  }
  const bool weighted = algo_ == FusionAlgo::FedAvg;
  const double weight = static_cast<double>(u.sample_count());
  for (std::size_t l = 0; l < acc_.size(); ++l) {
    auto* comp = comp_.empty() ? nullptr : &comp_[l];
    std::visit([&](const auto& v) { add_layer(acc_[l], comp, std::span(v), weight, weighted); },
               u.layers()[l].data());
  }
  count_sum_ += weighted ? u.sample_count() : 1;
  update_count_ += 1;
}

void PartialAggregate::merge(const PartialAggregate& other) {
  check_compatible(schema_, other.schema_);
  if (algo_ != other.algo_) {
    throw Error(ErrorCode::SchemaMismatch, "partials come from different fusion algorithms",
                "algo");
  }
  if (summation_ != other.summation_) {
    throw Error(ErrorCode::SchemaMismatch, "partials use different summation modes",
                "summation");
  }
  for (std::size_t l = 0; l < acc_.size(); ++l) {
    auto& a = acc_[l];
    const auto& b = other.acc_[l];
    if (comp_.empty()) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    } else {
      auto& ca = comp_[l];
      const auto& cb = other.comp_[l];
      for (std::size_t i = 0; i < a.size(); ++i) {
        double s, e;
        two_sum(a[i], b[i], s, e);
        a[i] = s;
        ca[i] += cb[i] + e;
      }
    }
  }
  count_sum_ += other.count_sum_;
  update_count_ += other.update_count_;
}

std::uint64_t PartialAggregate::accumulator_bytes() const {
  return schema_.elements() * sizeof(double) * (comp_.empty() ? 1 : 2);
}

PartialAggregate partial_new(const ModelSchema& schema, const FusionConfig& cfg) {
  cfg.validate();
  return PartialAggregate(schema, cfg.algo, cfg.summation);
}

PartialAggregate partial_accumulate(const PartialAggregate& p, const ModelUpdate& u,
                                    const FusionConfig& cfg) {
  if (cfg.algo != p.algo() || cfg.summation != p.summation()) {
    throw Error(ErrorCode::SchemaMismatch, "config does not match partial", "algo");
  }
  PartialAggregate out = p;
  out.accumulate(u);
  return out;
}

PartialAggregate partial_merge(const PartialAggregate& a, const PartialAggregate& b) {
  PartialAggregate out = a;
  out.merge(b);
  return out;
}

GlobalModel finalize(const PartialAggregate& p, const FusionConfig& cfg, std::uint64_t round) {
  cfg.validate();
  if (p.update_count() == 0) {
    throw Error(ErrorCode::EmptyAggregate, "no updates were accumulated");
  }
  const double denom = p.algo() == FusionAlgo::FedAvg
                           ? static_cast<double>(p.count_sum()) + cfg.epsilon
                           : static_cast<double>(p.update_count());
  const Dtype out_dtype = cfg.output_dtype.value_or(p.schema().dtype());
  const bool compensated = !p.compensation().empty();

  GlobalModel m;
  m.round = round;
  m.count_sum = p.count_sum();
  m.update_count = p.update_count();
  m.layers.reserve(p.schema().layers.size());
  for (std::size_t l = 0; l < p.acc().size(); ++l) {
    const auto& acc = p.acc()[l];
    const auto& spec = p.schema().layers[l];
    auto value = [&](std::size_t i) {
      const double total = compensated ? acc[i] + p.compensation()[l][i] : acc[i];
      return total / denom;
    };
    if (out_dtype == Dtype::F32) {
      std::vector<float> out(acc.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(value(i));
      m.layers.emplace_back(spec.name, spec.shape, std::move(out));
    } else {
      std::vector<double> out(acc.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
      m.layers.emplace_back(spec.name, spec.shape, std::move(out));
    }
  }
  return m;
}

GlobalModel fuse_sequential(const std::vector<ModelUpdate>& updates, const FusionConfig& cfg,
                            std::uint64_t round) {
  if (updates.empty()) throw Error(ErrorCode::EmptyInput, "no updates to fuse");
  auto p = partial_new(schema_of(updates.front()), cfg);
  for (const auto& u : updates) p.accumulate(u);
  return finalize(p, cfg, round);
}

// FPAG v1: magic · version u16 · flags u16 (bit0 compensated) · algo u8 ·
// layer_count u32 · per layer {name_len u16 · name · dtype u8 · rank u8 ·
// dims u64×rank} · count_sum u64 · update_count u64 · acc f64 per layer ·
// [comp f64 per layer] · crc32c u32.
Bytes encode_partial(const PartialAggregate& p) {
  ByteWriter w(64 + p.accumulator_bytes());
  w.put_magic(kPartialMagic);
  w.put<std::uint16_t>(kPartialVersion);
  w.put<std::uint16_t>(p.summation() == Summation::Compensated ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(p.algo()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.schema().layers.size()));
  for (const auto& l : p.schema().layers) {
    w.put_str16(l.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.shape.size()));
    for (auto d : l.shape) w.put<std::uint64_t>(d);
  }
  w.put<std::uint64_t>(p.count_sum());
  w.put<std::uint64_t>(p.update_count());
  for (const auto& a : p.acc()) w.put_array(std::span<const double>(a));
  for (const auto& c : p.compensation()) w.put_array(std::span<const double>(c));
  w.put_crc();
  return std::move(w).take();
}

PartialAggregate decode_partial(ByteView bytes) {
  {
    ByteReader head(bytes);
    head.expect_magic(kPartialMagic);
    const auto version = head.get<std::uint16_t>("version");
    if (version != kPartialVersion) {
      throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(version),
                  "version", 4);
    }
  }
  ByteReader r(checked_body(bytes));
  r.expect_magic(kPartialMagic);
  r.get<std::uint16_t>("version");
  const auto flags_at = r.pos();
  const auto flags = r.get<std::uint16_t>("flags");
  if (flags > 1) throw Error(ErrorCode::InvalidValue, "unknown flags", "flags", flags_at);
  const auto algo_at = r.pos();
  const auto algo = r.get<std::uint8_t>("algo");
  if (algo > 1) throw Error(ErrorCode::InvalidValue, "unknown algo", "algo", algo_at);
  ModelSchema schema;
  const auto layer_count = r.get<std::uint32_t>("layer_count");
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    LayerSpec spec;
    spec.name = r.get_str16("layer.name");
    const auto dtype_at = r.pos();
    const auto tag = r.get<std::uint8_t>("layer.dtype");
    if (tag > 1) throw Error(ErrorCode::InvalidValue, "dtype tag", "layer.dtype", dtype_at);
    spec.dtype = static_cast<Dtype>(tag);
    spec.shape.resize(r.get<std::uint8_t>("layer.rank"));
    for (auto& d : spec.shape) d = r.get<std::uint64_t>("layer.dims");
    schema.layers.push_back(std::move(spec));
  }
  PartialAggregate p = [&] {
    try {
      if (schema.elements() * sizeof(double) > r.remaining()) {
        throw Error(ErrorCode::Truncated, "accumulators shorter than schema");
      }
      return PartialAggregate(std::move(schema), static_cast<FusionAlgo>(algo),
                              flags ? Summation::Compensated : Summation::Naive);
    } catch (const Error& e) {
      throw Error(e.code() == ErrorCode::Truncated ? ErrorCode::Truncated
                                                   : ErrorCode::InvalidValue,
                  e.what(), "schema", r.pos());
    }
  }();
  p.count_sum_ = r.get<std::uint64_t>("count_sum");
  p.update_count_ = r.get<std::uint64_t>("update_count");
  for (auto& a : p.acc_) r.get_array(std::span(a), "acc");
  for (auto& c : p.comp_) r.get_array(std::span(c), "compensation");
  r.expect_end("accumulators");
  return p;
}

double max_relative_difference(const std::vector<LayerTensor>& a,
                               const std::vector<LayerTensor>& b) {
  check_compatible(schema_of(a), schema_of(b));
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t i = 0; i < a[l].size(); ++i) {
      const double x = a[l].at(i);
      const double y = b[l].at(i);
      if (x == y) continue;
      const double scale = std::max(std::abs(x), std::abs(y));
      const double d = std::abs(x - y) / scale;
      if (!(d <= worst)) worst = d;  // NaN propagates as worst
    }
  }
  return worst;
}

}  // namespace fedagg
