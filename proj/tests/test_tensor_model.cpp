#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fedagg/bytes.hpp"
#include "fedagg/error.hpp"
#include "fedagg/model_spec.hpp"
#include "fedagg/tensor_model.hpp"

using namespace fedagg;

namespace {

// Bitwise reflected CRC32C, independent of the table-driven implementation.
std::uint32_t crc32c_bitwise(const std::uint8_t* p, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= p[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0x82F63B78u & (0u - (crc & 1u)));
  }
  return ~crc;
}

template <typename T>
void append_le(Bytes& b, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  b.insert(b.end(), raw, raw + sizeof(T));
}

std::uint64_t size_formula(const std::string& id, const std::vector<LayerSpec>& layers) {
  std::uint64_t fixed = 4 + 2 + 2 + (2 + id.size()) + 8 + 8 + 4 + 4;
  for (const auto& l : layers) {
    std::uint64_t elems = 1;
    for (auto d : l.shape) elems *= d;
    fixed += (2 + l.name.size()) + 1 + 1 + 8 * l.shape.size() + elems * (l.dtype == Dtype::F32 ? 4 : 8);
  }
  return fixed;
}

ModelUpdate small_update(std::string id = "c1") {
  return ModelUpdate(std::move(id), 3, 1, {LayerTensor("w", {2}, std::vector<float>{1.0f, 2.0f})});
}

ErrorCode decode_error(ByteView b) {
  try {
    decode_update(b);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode accepted corrupted bytes";
  return ErrorCode::InvalidValue;
}

}  // namespace

TEST(Crc32c, MatchesBitwiseOracle) {
  const std::string check = "123456789";
  const auto* p = reinterpret_cast<const std::uint8_t*>(check.data());
  EXPECT_EQ(crc32c(ByteView(p, check.size())), 0xE3069283u);
  EXPECT_EQ(crc32c_bitwise(p, check.size()), 0xE3069283u);
  const auto bytes = encode_update(synth_update(5, ModelSchema{{{"a", Dtype::F32, {33}}}}, "x", 0, 2));
  EXPECT_EQ(crc32c(ByteView(bytes)), crc32c_bitwise(bytes.data(), bytes.size()));
}

TEST(Codec, ExactLayoutOfSmallUpdate) {
  Bytes expect;
  expect.insert(expect.end(), {'F', 'A', 'U', 'P'});
  append_le<std::uint16_t>(expect, 1);
  append_le<std::uint16_t>(expect, 0);
  append_le<std::uint16_t>(expect, 2);
  expect.insert(expect.end(), {'c', '1'});
  append_le<std::uint64_t>(expect, 3);
  append_le<std::uint64_t>(expect, 1);
  append_le<std::uint32_t>(expect, 1);
  append_le<std::uint16_t>(expect, 1);
  expect.push_back('w');
  expect.push_back(0);
  expect.push_back(1);
  append_le<std::uint64_t>(expect, 2);
  append_le<float>(expect, 1.0f);
  append_le<float>(expect, 2.0f);
  append_le<std::uint32_t>(expect, crc32c_bitwise(expect.data(), expect.size()));

  const auto got = encode_update(small_update());
  EXPECT_EQ(got, expect);
  EXPECT_EQ(decode_update(got), small_update());
}

TEST(Codec, RoundtripF32AndF64) {
  const ModelSchema s32{{{"conv", Dtype::F32, {3, 4}}, {"bias", Dtype::F32, {4}}}};
  const ModelSchema s64{{{"conv", Dtype::F64, {3, 4}}, {"bias", Dtype::F64, {4}}}};
  for (const auto& s : {s32, s64}) {
    const auto u = synth_update(11, s, "client-a", 9, 42);
    const auto b = encode_update(u);
    EXPECT_EQ(decode_update(b), u);
    EXPECT_EQ(b.size(), size_formula("client-a", s.layers));
    EXPECT_EQ(b.size(), encoded_update_size(s, 8));
  }
}

TEST(Codec, SizeMatchesIndependentFormulaOverRandomSchemas) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 50; ++trial) {
    ModelSchema s;
    const auto dtype = gen() % 2 ? Dtype::F32 : Dtype::F64;
    const int layers = 1 + static_cast<int>(gen() % 5);
    for (int l = 0; l < layers; ++l) {
      Shape shape(1 + gen() % 3);
      for (auto& d : shape) d = 1 + gen() % 6;
      s.layers.push_back({"layer_" + std::to_string(l) + std::string(gen() % 4, 'x'), dtype, shape});
    }
    const std::string id(1 + gen() % 20, 'k');
    const auto b = encode_update(synth_update(trial, s, id, trial, 1 + trial));
    EXPECT_EQ(b.size(), size_formula(id, s.layers));
  }
}

TEST(Codec, SmallestTableModelPayloadIsAbout4Point6MiB) {
  const ModelSchema s{{{"all", Dtype::F32, {1205862}}}};
  EXPECT_NEAR(static_cast<double>(s.payload_bytes()), 4.6 * 1048576.0, 4.0);
}

TEST(Codec, ClientIdOnlyChangesIdAndChecksum) {
  const ModelSchema s{{{"w", Dtype::F32, {16}}}};
  const auto a = encode_update(synth_update(1, s, "alpha", 1, 5));
  const auto b = encode_update(synth_update(1, s, "bravo", 1, 5));
  ASSERT_EQ(a.size(), b.size());
  const std::size_t id_begin = 10, id_end = 15, crc_begin = a.size() - 4;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_id = i >= id_begin && i < id_end;
    const bool in_crc = i >= crc_begin;
    if (!in_id && !in_crc) EXPECT_EQ(a[i], b[i]) << "offset " << i;
  }
  EXPECT_NE(Bytes(a.begin() + crc_begin, a.end()), Bytes(b.begin() + crc_begin, b.end()));
}

TEST(Codec, EmptyInputIsTruncated) { EXPECT_EQ(decode_error(ByteView()), ErrorCode::Truncated); }

TEST(Codec, BadMagicAndVersion) {
  auto b = encode_update(small_update());
  auto m = b;
  m[0] = 'X';
  EXPECT_EQ(decode_error(m), ErrorCode::BadMagic);
  auto v = b;
  v[4] = 2;
  try {
    decode_update(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsupportedVersion);
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Codec, EverySingleBitFlipIsDetected) {
  const ModelSchema s{{{"w", Dtype::F32, {3}}, {"b", Dtype::F32, {2}}}};
  const auto good = encode_update(synth_update(8, s, "flip", 2, 7));
  for (std::size_t byte = 0; byte < good.size(); ++byte) {
    for (int bit = 0; bit < 8; ++bit) {
      auto bad = good;
      bad[byte] ^= static_cast<std::uint8_t>(1u << bit);
      const auto code = decode_error(bad);
      if (byte < 4) {
        EXPECT_EQ(code, ErrorCode::BadMagic);
      } else if (byte < 6) {
        EXPECT_EQ(code, ErrorCode::UnsupportedVersion);
      } else {
        EXPECT_EQ(code, ErrorCode::ChecksumMismatch) << "byte " << byte << " bit " << bit;
      }
    }
  }
}

TEST(Codec, EveryTruncationIsRejected) {
  const auto good = encode_update(small_update());
  for (std::size_t n = 0; n < good.size(); ++n) {
    EXPECT_THROW(decode_update(ByteView(good.data(), n)), Error) << n;
  }
  auto longer = good;
  longer.push_back(0);
  EXPECT_THROW(decode_update(longer), Error);
}

TEST(Codec, GlobalModelRoundtrip) {
  GlobalModel g;
  g.round = 4;
  g.count_sum = 77;
  g.layers.emplace_back("w", Shape{2}, std::vector<double>{0.25, -0.5});
  const auto b = encode_global(g);
  const auto back = decode_global(b);
  EXPECT_EQ(back.round, 4u);
  EXPECT_EQ(back.count_sum, 77u);
  EXPECT_EQ(back.layers, g.layers);
  EXPECT_EQ(encode_global(back), b);
  EXPECT_THROW(decode_global(encode_update(small_update())), Error);
}

TEST(Invariants, ConstructionRejectsBadValues) {
  EXPECT_THROW(LayerTensor("w", {3}, std::vector<float>{1, 2}), Error);
  EXPECT_THROW(LayerTensor("w", {}, std::vector<float>{}), Error);
  EXPECT_THROW(LayerTensor("w", {0}, std::vector<float>{}), Error);
  EXPECT_THROW(LayerTensor("", {1}, std::vector<float>{1}), Error);
  const LayerTensor w("w", {1}, std::vector<float>{1});
  EXPECT_THROW(ModelUpdate("", 0, 1, {w}), Error);
  EXPECT_THROW(ModelUpdate("c", 0, 0, {w}), Error);
  EXPECT_THROW(ModelUpdate("c", 0, 1, {}), Error);
  EXPECT_THROW(ModelUpdate("c", 0, 1, {w, w}), Error);
  EXPECT_THROW(ModelUpdate("c", 0, 1, {w, LayerTensor("v", {1}, std::vector<double>{1})}), Error);
}

TEST(Schema, CompatibilityNamesFirstDifference) {
  const ModelSchema a{{{"w", Dtype::F32, {2}}}};
  const ModelSchema b{{{"w", Dtype::F32, {3}}}};
  const ModelSchema c{{{"w", Dtype::F64, {2}}}};
  EXPECT_NO_THROW(check_compatible(a, a));
  try {
    check_compatible(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaMismatch);
    EXPECT_EQ(e.subject(), "layer 0, shape");
  }
  try {
    check_compatible(a, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.subject(), "layer 0, dtype");
  }
  EXPECT_EQ(schema_of(synth_update(1, a, "x", 0, 1)), a);
}

TEST(Synth, DeterministicAndSeedSensitive) {
  const ModelSchema s{{{"w", Dtype::F32, {1000}}}};
  EXPECT_EQ(encode_update(synth_update(1, s, "c", 0, 1)), encode_update(synth_update(1, s, "c", 0, 1)));
  EXPECT_NE(synth_update(1, s, "c", 0, 1).layers(), synth_update(2, s, "c", 0, 1).layers());
}

TEST(Synth, MillionDrawsInRangeOnGrid) {
  const ModelSchema s{{{"w", Dtype::F64, {1000000}}}};
  const auto u = synth_update(99, s, "c", 0, 1);
  double lo = 1, hi = -1;
  for (double v : u.layers()[0].f64()) {
    ASSERT_GE(v, -1.0);
    ASSERT_LT(v, 1.0);
    const double scaled = v * 8388608.0;
    ASSERT_EQ(scaled, std::floor(scaled));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, -0.99);
  EXPECT_GT(hi, 0.99);
  // Same draws in F32 are exactly representable.
  const ModelSchema s32{{{"w", Dtype::F32, {1000000}}}};
  const auto f = synth_update(99, s32, "c", 0, 1);
  for (std::size_t i = 0; i < 1000000; ++i) {
    ASSERT_EQ(static_cast<double>(f.layers()[0].f32()[i]), u.layers()[0].f64()[i]);
  }
}

TEST(Synth, SchemaDigestStable) {
  const ModelSchema a{{{"w", Dtype::F32, {2}}}};
  const ModelSchema b{{{"w", Dtype::F32, {3}}}};
  EXPECT_EQ(schema_digest(a), schema_digest(a));
  EXPECT_NE(schema_digest(a), schema_digest(b));
  EXPECT_EQ(schema_digest(a).size(), 16u);
}

TEST(ModelSpecs, EncodedSizeWithinTwoPercentOfScaledTable) {
  for (const auto& name : known_models()) {
    for (double scale : {0.001, 0.01}) {
      const auto schema = make_schema({name, scale, Dtype::F32});
      const double want = scale * static_cast<double>(reference_size_bytes(name));
      const double got = static_cast<double>(encoded_update_size(schema, 16));
      EXPECT_NEAR(got / want, 1.0, 0.02) << name << " @ " << scale;
      EXPECT_NO_THROW(schema.validate());
    }
  }
  EXPECT_EQ(reference_size_bytes("cnn956"), 956ull * 1048576ull);
}

TEST(ModelSpecs, PreservesRelativeSizesAndParsesText) {
  const auto small = encoded_update_size(make_schema({"cnn4.6", 0.01, Dtype::F32}), 16);
  const auto big = encoded_update_size(make_schema({"cnn73", 0.01, Dtype::F32}), 16);
  EXPECT_NEAR(static_cast<double>(big) / static_cast<double>(small) / (73.0 / 4.6), 1.0, 1e-3);
  const auto f64 = encoded_update_size(make_schema({"cnn4.6", 0.01, Dtype::F64}), 16);
  EXPECT_NEAR(static_cast<double>(f64), static_cast<double>(small), 8.0);
  const auto spec = parse_model_spec("vgglike@0.002:f64");
  EXPECT_EQ(spec.name, "vgglike");
  EXPECT_DOUBLE_EQ(spec.scale, 0.002);
  EXPECT_EQ(spec.dtype, Dtype::F64);
  EXPECT_THROW(parse_model_spec("nosuchnet"), Error);
  EXPECT_THROW(parse_model_spec("cnn73@2"), Error);
}
