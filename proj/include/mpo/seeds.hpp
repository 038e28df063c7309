#pragma once

#include <cstdint>
#include <string_view>

namespace mpo {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Seed for one unit of work: (root seed, purpose tag, index, sub-index).
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                    std::uint64_t index = 0,
                                    std::uint64_t sub = 0) {
  std::uint64_t h = splitmix64(root ^ fnv1a(tag));
  h = splitmix64(h ^ index);
  return splitmix64(h ^ (sub * 0xD1B54A32D192ED03ull));
}

}  // namespace mpo
