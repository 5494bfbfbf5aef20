#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace fusenet {

// FNV-1a 64-bit. Used wherever a seed or content hash must be stable across
// platforms and standard-library versions (std::hash gives no such promise).
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  return fnv1a64(std::string_view(static_cast<const char*>(data), len));
}

// Unbiased integer draw in [0, n) via rejection sampling. Stable given the
// mt19937_64 stream, unlike std::uniform_int_distribution.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

// Derive a child seed from a master seed and a label, e.g. per-scan RNGs.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  std::uint64_t h = fnv1a64(label);
  h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

// Hex digest of a file's content (FNV-1a 64), for provenance records.
std::string content_hash_hex(const std::filesystem::path& path);

// Worker-thread cap: FUSENET_THREADS env var, clamped to hardware threads.
int worker_threads();

}  // namespace fusenet
