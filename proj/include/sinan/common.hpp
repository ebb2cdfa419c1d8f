#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sinan {

// Number of latency percentiles tracked per interval (p95..p99).
inline constexpr int kPercentiles = 5;
// Per-tier resource channels: cpu_util, rss, cache, rx, tx.
inline constexpr int kChannels = 5;
// Simulated length of one decision interval.
inline constexpr double kIntervalMs = 1000.0;

using Rng = std::mt19937_64;

/// Malformed or inconsistent input (configuration files, shapes, arguments).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while running an otherwise valid computation.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Derives an independent generator from a base seed and a stream tag.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);
/// Parses text written by format_double; throws ConfigError on junk.
double parse_double(std::string_view text);

std::vector<std::string> split(std::string_view text, char sep);

/// Seeded shuffle then split; returns (train, valid) indices. With n >= 2
/// both parts are non-empty.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double valid_fraction,
                                                                            std::uint64_t seed);

/// Writes `<path>.partial` then renames it over `path`, so readers never see
/// a truncated file under the final name.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace sinan
