#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cloudlet/error.hpp"

namespace cloudlet {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_string(ByteView b) { return std::string(b.begin(), b.end()); }

// Big-endian appender over a growable buffer.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put_be(v); }
  void u32(std::uint32_t v) { put_be(v); }
  void u64(std::uint64_t v) { put_be(v); }
  void i32(std::int32_t v) { put_be(static_cast<std::uint32_t>(v)); }
  void i64(std::int64_t v) { put_be(static_cast<std::uint64_t>(v)); }
  void raw(ByteView b) { out_.insert(out_.end(), b.begin(), b.end()); }

  // u16 length + utf-8 bytes
  void str(std::string_view s) {
    u16(static_cast<std::uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  // u32 length + bytes
  void blob(ByteView b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }
  // i32 length (-1 when absent) + bytes
  void opt_blob(const std::optional<Bytes>& b) {
    if (!b) {
      i32(-1);
      return;
    }
    i32(static_cast<std::int32_t>(b->size()));
    raw(*b);
  }

  std::size_t size() const { return out_.size(); }
  // Overwrite a previously written u32 at |pos|.
  void patch_u32(std::size_t pos, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) {
      out_[pos + static_cast<std::size_t>(3 - i)] = static_cast<std::uint8_t>(v >> (i * 8));
    }
  }

 private:
  template <typename T>
  void put_be(T v) {
    for (int i = sizeof(T) - 1; i >= 0; --i) out_.push_back(static_cast<std::uint8_t>(v >> (i * 8)));
  }

  Bytes& out_;
};

// Big-endian cursor. Every short read throws Errc::DecodeError.
class ByteReader {
 public:
  explicit ByteReader(ByteView data) : data_(data) {}

  std::uint8_t u8() { return get_be<std::uint8_t>(); }
  std::uint16_t u16() { return get_be<std::uint16_t>(); }
  std::uint32_t u32() { return get_be<std::uint32_t>(); }
  std::uint64_t u64() { return get_be<std::uint64_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get_be<std::uint32_t>()); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_be<std::uint64_t>()); }

  ByteView raw(std::size_t n) {
    need(n);
    auto v = data_.subspan(pos_, n);
    pos_ += n;
    return v;
  }
  std::string str() {
    auto n = u16();
    return to_string(raw(n));
  }
  Bytes blob() {
    auto n = u32();
    auto v = raw(n);
    return Bytes(v.begin(), v.end());
  }
  std::optional<Bytes> opt_blob() {
    auto n = i32();
    if (n == -1) return std::nullopt;
    if (n < 0) throw Error(Errc::DecodeError, "negative length");
    auto v = raw(static_cast<std::size_t>(n));
    return Bytes(v.begin(), v.end());
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(Errc::DecodeError, "truncated input");
  }
  template <typename T>
  T get_be() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v = static_cast<T>((v << 8) | data_[pos_ + i]);
    pos_ += sizeof(T);
    return v;
  }

  ByteView data_;
  std::size_t pos_ = 0;
};

}  // namespace cloudlet
