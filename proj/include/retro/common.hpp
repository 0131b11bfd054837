#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace retro {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecial = 4;
inline constexpr TokenId kByteBase = kNumSpecial;  // byte b has id b + 4

enum class Category { web, wiki, code, books, news, synthetic };
enum class Split { train, validation };

std::string_view to_string(Category c);
std::string_view to_string(Split s);
Category parse_category(std::string_view s);
Split parse_split(std::string_view s);

/// 64-bit FNV-1a. Used for vocab/config fingerprints and artifact manifests.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-seed derivation so every random stream hangs off one --seed.
inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view name) {
  return mix64(seed ^ fnv1a64(name));
}

std::string hex64(std::uint64_t v);

}  // namespace retro
