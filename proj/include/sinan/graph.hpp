#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sinan/allocation.hpp"

namespace sinan {

/// Periodic service outage, e.g. a cache flushing its log to disk.
struct StallFault {
  double period_s = 60.0;
  double stall_ms = 500.0;
  double offset_ms = 0.0;  // start of the outage within each period
};

struct TierSpec {
  std::string name;
  int concurrency_limit = 1;
  int queue_capacity = 1;
  double cpu_cap = 1.0;
  std::optional<StallFault> stall;
  // Coefficients of the synthetic memory channels.
  double memory_base_mb = 0.0;
  double memory_per_queued_mb = 0.0;
  double cache_base_mb = 0.0;
  double cache_per_rps_mb = 0.0;

  int cap_tenths() const;
};

struct Stage {
  int tier_index = 0;
  double cpu_demand_ms = 1.0;
  // Coefficient of variation of the per-request demand; 0 means fixed.
  double demand_cv = 0.0;
};

struct RequestType {
  std::string name;
  std::vector<Stage> stages;
};

/// Validated application topology. Tier order is the tensor row order.
struct ServiceGraph {
  std::vector<TierSpec> tiers;
  std::vector<RequestType> request_types;
  // Tiers sorted so that every caller precedes its callees.
  std::vector<int> topo_order;

  std::size_t num_tiers() const { return tiers.size(); }
  int tier_index(const std::string& name) const;
  int request_type_index(const std::string& name) const;
  AllocationVector caps() const;
  /// Clamps every entry into [0.2 core, cpu_cap].
  AllocationVector clamp(AllocationVector alloc) const;
  bool is_valid(const AllocationVector& alloc) const;
};

/// Parses and validates a JSON topology. Throws ConfigError naming the
/// offending field.
ServiceGraph load_graph(const std::string& config_text);
ServiceGraph load_graph_file(const std::string& path);

/// Checks invariants and fills topo_order. Rejects tiers repeated within a
/// request type and caller/callee cycles across request types.
void validate_graph(ServiceGraph& graph);

}  // namespace sinan
