#pragma once

// Little-endian framing helpers shared by every binary record in the project
// (FAUF updates, FPAG partials, task frames).

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "fedagg/error.hpp"

namespace fedagg {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "record codecs assume a little-endian host");

std::uint32_t crc32c(ByteView data);

class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void put_magic(std::string_view magic) {
    buf_.insert(buf_.end(), magic.begin(), magic.end());
  }

  // u16 length prefix followed by raw bytes.
  void put_str16(std::string_view s);

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size_bytes());
  }

  void put_bytes(ByteView b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  // Appends crc32c over everything written so far.
  void put_crc() { put<std::uint32_t>(crc32c(buf_)); }

  std::size_t size() const { return buf_.size(); }
  Bytes take() && { return std::move(buf_); }

 private:
  Bytes buf_;
};

// Splits off and checks the trailing u32 crc32c; returns the covered body.
ByteView checked_body(ByteView record);

class ByteReader {
 public:
  explicit ByteReader(ByteView data) : data_(data) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(std::string_view field) {
    need(sizeof(T), field);
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void expect_magic(std::string_view magic);
  std::string get_str16(std::string_view field);

  template <typename T>
    requires std::is_arithmetic_v<T>
  void get_array(std::span<T> out, std::string_view field) {
    need(out.size_bytes(), field);
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  ByteView get_bytes(std::size_t n, std::string_view field);

  // Fails with InvalidValue unless every byte has been consumed.
  void expect_end(std::string_view what);

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, std::string_view field) const;

  ByteView data_;
  std::size_t pos_ = 0;
};

}  // namespace fedagg
