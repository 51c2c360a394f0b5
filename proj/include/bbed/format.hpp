#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>

namespace bbed {

/// Shortest round-trip decimal, '.' separator, locale independent.
template <class T>
std::string format_number(T v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

/// FNV-1a 64.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace bbed
