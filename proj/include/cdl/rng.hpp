#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cdl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Splits one user seed into independent named substreams. Adding a new
/// consumer under a new name never perturbs the streams of existing ones.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t derive(std::string_view name) const { return splitmix64(seed_ ^ splitmix64(fnv1a(name))); }

  SeedStream child(std::string_view name) const { return SeedStream(derive(name)); }

  std::mt19937_64 engine(std::string_view name) const { return std::mt19937_64(derive(name)); }

 private:
  std::uint64_t seed_;
};

}  // namespace cdl
