#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace audit::util {

// 64-bit FNV-1a. Used for request fingerprints, config hashes, and file
// manifests; stable across runs and platforms.
inline uint64_t fnv1a64(std::string_view data) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(uint64_t v);

inline std::string fnv1a64_hex(std::string_view data) { return to_hex(fnv1a64(data)); }

// SplitMix64 step; also used to derive independent sub-seeds from a master
// seed (fully specified, unlike the standard distributions).
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  return splitmix64(s);
}

// Uniform double in [0,1) from a raw 64-bit word. Deterministic everywhere,
// unlike std::uniform_real_distribution.
inline double unit_double(uint64_t word) {
  return static_cast<double>(word >> 11) * 0x1.0p-53;
}

std::string lowercase(std::string_view s);
std::string uppercase(std::string_view s);
std::string trim(std::string_view s);

// Collapses runs of whitespace to single spaces and trims the ends.
std::string collapse_whitespace(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);

bool starts_with_icase(std::string_view text, std::string_view prefix);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

std::string iso8601_now();

}  // namespace audit::util
