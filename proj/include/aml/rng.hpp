#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace aml {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based seed splitter. Every consumer of randomness derives its own
/// stream from (root seed, tag, index) so no two modules share generator state.
class SeedSplitter {
 public:
  explicit SeedSplitter(std::uint64_t root) : root_(root) {}

  std::uint64_t root() const { return root_; }

  std::uint64_t derive(std::string_view tag, std::uint64_t index = 0) const {
    return splitmix64(splitmix64(root_ ^ fnv1a64(tag)) + index);
  }

  std::mt19937_64 stream(std::string_view tag, std::uint64_t index = 0) const {
    return std::mt19937_64(derive(tag, index));
  }

  SeedSplitter child(std::string_view tag, std::uint64_t index = 0) const {
    return SeedSplitter(derive(tag, index));
  }

 private:
  std::uint64_t root_;
};

}  // namespace aml
