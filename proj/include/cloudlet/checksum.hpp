#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>

namespace cloudlet {

namespace detail {

constexpr std::array<std::uint32_t, 256> make_crc32_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

inline constexpr auto kCrc32Table = make_crc32_table();

}  // namespace detail

// CRC-32 (IEEE, reflected, poly 0xEDB88320). Pass a previous result as |seed|
// to continue a running checksum.
constexpr std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t seed = 0) {
  std::uint32_t c = ~seed;
  for (auto b : data) c = detail::kCrc32Table[(c ^ b) & 0xFFu] ^ (c >> 8);
  return ~c;
}

inline std::uint32_t crc32(std::string_view s, std::uint32_t seed = 0) {
  return crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), seed);
}

inline constexpr std::uint32_t kFnvOffsetBasis = 2166136261u;
inline constexpr std::uint32_t kFnvPrime = 16777619u;

constexpr std::uint32_t fnv1a32(std::span<const std::uint8_t> data) {
  std::uint32_t h = kFnvOffsetBasis;
  for (auto b : data) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint32_t fnv1a32(std::string_view s) {
  return fnv1a32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace cloudlet
