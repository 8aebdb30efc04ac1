#include "fedagg/bytes.hpp"

#include <boost/crc.hpp>

namespace fedagg {

std::uint32_t crc32c(ByteView data) {
  // Castagnoli polynomial, reflected, init/xorout 0xFFFFFFFF.
  boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
  crc.process_bytes(data.data(), data.size());
  return crc.checksum();
}

void ByteWriter::put_str16(std::string_view s) {
  if (s.size() > 0xFFFF) {
    throw Error(ErrorCode::InvalidValue, "string longer than 65535 bytes");
  }
  put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n, std::string_view field) const {
  if (data_.size() - pos_ < n) {
    throw Error(ErrorCode::Truncated,
                "need " + std::to_string(n) + " bytes, have " +
                    std::to_string(data_.size() - pos_),
                std::string(field), pos_);
  }
}

void ByteReader::expect_magic(std::string_view magic) {
  need(magic.size(), "magic");
  if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
    throw Error(ErrorCode::BadMagic, "expected \"" + std::string(magic) + "\"",
                "magic", pos_);
  }
  pos_ += magic.size();
}

std::string ByteReader::get_str16(std::string_view field) {
  const auto len = get<std::uint16_t>(field);
  need(len, field);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
  pos_ += len;
  return s;
}

ByteView ByteReader::get_bytes(std::size_t n, std::string_view field) {
  need(n, field);
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::expect_end(std::string_view what) {
  if (pos_ != data_.size()) {
    throw Error(ErrorCode::InvalidValue,
                std::to_string(data_.size() - pos_) + " unexpected bytes after " +
                    std::string(what),
                std::string(what), pos_);
  }
}

ByteView checked_body(ByteView record) {
  if (record.size() < sizeof(std::uint32_t)) {
    throw Error(ErrorCode::Truncated, "record shorter than its checksum",
                "crc32c", 0);
  }
  const auto body = record.first(record.size() - sizeof(std::uint32_t));
  std::uint32_t stored;
  std::memcpy(&stored, record.data() + body.size(), sizeof(stored));
  if (stored != crc32c(body)) {
    throw Error(ErrorCode::ChecksumMismatch, "record checksum does not match",
                "crc32c", body.size());
  }
  return body;
}

}  // namespace fedagg
