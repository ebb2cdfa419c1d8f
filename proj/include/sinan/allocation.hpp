#pragma once

#include <cstddef>
#include <vector>

namespace sinan {

/// Smallest CPU step the cluster can enforce, in cores.
inline constexpr double kCpuQuantum = 0.1;
/// Minimum allocation per tier, in quanta (0.2 cores).
inline constexpr int kMinCpuTenths = 2;

/// Per-tier CPU limits held as integer multiples of 0.1 core, so
/// quantization is exact and equality comparisons are meaningful.
class AllocationVector {
 public:
  AllocationVector() = default;
  explicit AllocationVector(std::vector<int> tenths) : tenths_(std::move(tenths)) {}

  /// Rounds each entry to the nearest 0.1 core.
  static AllocationVector from_cores(const std::vector<double>& cores);

  std::size_t size() const { return tenths_.size(); }
  double cores(std::size_t tier) const { return tenths_[tier] * kCpuQuantum; }
  int tenths(std::size_t tier) const { return tenths_[tier]; }
  void set_tenths(std::size_t tier, int v) { tenths_[tier] = v; }
  const std::vector<int>& raw() const { return tenths_; }

  std::vector<double> as_cores() const;
  double total_cores() const;
  int total_tenths() const;

  friend bool operator==(const AllocationVector&, const AllocationVector&) = default;
  friend auto operator<=>(const AllocationVector&, const AllocationVector&) = default;

 private:
  std::vector<int> tenths_;
};

/// Nearest multiple of 0.1 core, in quanta.
int quantize_tenths(double cores);

/// Multiplies one tier's allocation by `factor`, rounding to the nearest
/// quantum but always moving at least one quantum in the direction of the
/// step (otherwise +10% on 0.2 cores would never grow).
int scale_tenths(int tenths, double factor);

}  // namespace sinan
