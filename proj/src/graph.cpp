#include "sinan/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sinan/common.hpp"

namespace sinan {

using nlohmann::json;

namespace {

template <typename T>
T required(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ConfigError(where + "." + key + ": missing");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <typename T>
T optional_field(const json& obj, const std::string& key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

bool is_quantized(double v) { return std::abs(v * 10.0 - std::round(v * 10.0)) < 1e-9; }

}  // namespace

int TierSpec::cap_tenths() const { return quantize_tenths(cpu_cap); }

int ServiceGraph::tier_index(const std::string& name) const {
  for (std::size_t i = 0; i < tiers.size(); ++i) {
    if (tiers[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

int ServiceGraph::request_type_index(const std::string& name) const {
  for (std::size_t i = 0; i < request_types.size(); ++i) {
    if (request_types[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

AllocationVector ServiceGraph::caps() const {
  std::vector<int> t;
  for (const auto& tier : tiers) t.push_back(tier.cap_tenths());
  return AllocationVector(std::move(t));
}

AllocationVector ServiceGraph::clamp(AllocationVector alloc) const {
  for (std::size_t i = 0; i < tiers.size() && i < alloc.size(); ++i) {
    alloc.set_tenths(i, std::clamp(alloc.tenths(i), kMinCpuTenths, tiers[i].cap_tenths()));
  }
  return alloc;
}

bool ServiceGraph::is_valid(const AllocationVector& alloc) const {
  if (alloc.size() != tiers.size()) return false;
  for (std::size_t i = 0; i < tiers.size(); ++i) {
    if (alloc.tenths(i) < kMinCpuTenths || alloc.tenths(i) > tiers[i].cap_tenths()) return false;
  }
  return true;
}

void validate_graph(ServiceGraph& g) {
  const int n = static_cast<int>(g.tiers.size());
  if (n == 0) throw ConfigError("tiers: at least one tier required");
  std::set<std::string> names;
  for (int i = 0; i < n; ++i) {
    const auto& t = g.tiers[i];
    const std::string where = "tiers[" + std::to_string(i) + "]";
    if (t.name.empty()) throw ConfigError(where + ".name: empty");
    if (!names.insert(t.name).second) throw ConfigError(where + ".name: duplicate '" + t.name + "'");
    if (t.concurrency_limit < 1) throw ConfigError(where + ".concurrency_limit: must be >= 1");
    if (t.queue_capacity < t.concurrency_limit)
      throw ConfigError(where + ".queue_capacity: must be >= concurrency_limit");
    if (!(t.cpu_cap >= 0.2 - 1e-12) || !is_quantized(t.cpu_cap))
      throw ConfigError(where + ".cpu_cap: must be >= 0.2 and a multiple of 0.1");
    if (t.stall && (!(t.stall->period_s > 0.0) || !(t.stall->stall_ms > 0.0)))
      throw ConfigError(where + ".stall: period_s and stall_ms must be positive");
    if (t.stall && !(t.stall->offset_ms >= 0.0 && t.stall->offset_ms + t.stall->stall_ms <= t.stall->period_s * 1000.0))
      throw ConfigError(where + ".stall.offset_ms: outage must fit inside the period");
    if (t.memory_base_mb < 0 || t.memory_per_queued_mb < 0 || t.cache_base_mb < 0 ||
        t.cache_per_rps_mb < 0)
      throw ConfigError(where + ": telemetry coefficients must be nonnegative");
  }
  if (g.request_types.empty()) throw ConfigError("request_types: at least one request type required");

  std::vector<std::set<int>> edges(n);
  for (std::size_t r = 0; r < g.request_types.size(); ++r) {
    const auto& rt = g.request_types[r];
    const std::string where = "request_types[" + std::to_string(r) + "]";
    if (rt.stages.empty()) throw ConfigError(where + ".stages: empty");
    std::set<int> seen;
    for (std::size_t s = 0; s < rt.stages.size(); ++s) {
      const auto& st = rt.stages[s];
      const std::string sw = where + ".stages[" + std::to_string(s) + "]";
      if (st.tier_index < 0 || st.tier_index >= n)
        throw ConfigError(sw + ".tier_index: out of range (" + std::to_string(st.tier_index) + ")");
      if (!(st.cpu_demand_ms > 0.0)) throw ConfigError(sw + ".cpu_demand_ms: must be positive");
      if (!(st.demand_cv >= 0.0)) throw ConfigError(sw + ".demand_cv: must be nonnegative");
      if (!seen.insert(st.tier_index).second)
        throw ConfigError(sw + ".tier_index: cyclic call chain revisits tier " +
                          std::to_string(st.tier_index));
      if (s > 0) edges[rt.stages[s - 1].tier_index].insert(st.tier_index);
    }
  }

  // Kahn's algorithm; lowest index first keeps the order deterministic.
  std::vector<int> indeg(n, 0);
  for (int i = 0; i < n; ++i)
    for (int j : edges[i]) ++indeg[j];
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int i = 0; i < n; ++i)
    if (indeg[i] == 0) ready.push(i);
  g.topo_order.clear();
  while (!ready.empty()) {
    int i = ready.top();
    ready.pop();
    g.topo_order.push_back(i);
    for (int j : edges[i])
      if (--indeg[j] == 0) ready.push(j);
  }
  if (static_cast<int>(g.topo_order.size()) != n) {
    throw ConfigError("request_types: caller/callee relation between tiers is cyclic");
  }
}

ServiceGraph load_graph(const std::string& config_text) {
  json doc;
  try {
    doc = json::parse(config_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("graph config parse error: ") + e.what());
  }
  if (doc.contains("graph") && doc["graph"].is_object()) doc = doc["graph"];

  ServiceGraph g;
  if (!doc.contains("tiers") || !doc["tiers"].is_array()) throw ConfigError("tiers: missing");
  for (std::size_t i = 0; i < doc["tiers"].size(); ++i) {
    const auto& jt = doc["tiers"][i];
    const std::string where = "tiers[" + std::to_string(i) + "]";
    TierSpec t;
    t.name = required<std::string>(jt, "name", where);
    t.concurrency_limit = required<int>(jt, "concurrency_limit", where);
    t.queue_capacity = required<int>(jt, "queue_capacity", where);
    t.cpu_cap = required<double>(jt, "cpu_cap", where);
    if (jt.contains("stall") && !jt["stall"].is_null()) {
      StallFault f;
      f.period_s = required<double>(jt["stall"], "period_s", where + ".stall");
      f.stall_ms = required<double>(jt["stall"], "stall_ms", where + ".stall");
      f.offset_ms = optional_field<double>(jt["stall"], "offset_ms", 0.0, where + ".stall");
      t.stall = f;
    }
    t.memory_base_mb = optional_field<double>(jt, "memory_base_mb", 0.0, where);
    t.memory_per_queued_mb = optional_field<double>(jt, "memory_per_queued_mb", 0.0, where);
    t.cache_base_mb = optional_field<double>(jt, "cache_base_mb", 0.0, where);
    t.cache_per_rps_mb = optional_field<double>(jt, "cache_per_rps_mb", 0.0, where);
    g.tiers.push_back(std::move(t));
  }
  if (!doc.contains("request_types") || !doc["request_types"].is_array())
    throw ConfigError("request_types: missing");
  for (std::size_t r = 0; r < doc["request_types"].size(); ++r) {
    const auto& jr = doc["request_types"][r];
    const std::string where = "request_types[" + std::to_string(r) + "]";
    RequestType rt;
    rt.name = required<std::string>(jr, "name", where);
    if (!jr.contains("stages") || !jr["stages"].is_array()) throw ConfigError(where + ".stages: missing");
    for (std::size_t s = 0; s < jr["stages"].size(); ++s) {
      const auto& js = jr["stages"][s];
      const std::string sw = where + ".stages[" + std::to_string(s) + "]";
      Stage st;
      if (js.contains("tier") && js["tier"].is_string()) {
        const auto name = js["tier"].get<std::string>();
        st.tier_index = g.tier_index(name);
        if (st.tier_index < 0) throw ConfigError(sw + ".tier: unknown tier '" + name + "'");
      } else {
        st.tier_index = required<int>(js, "tier_index", sw);
      }
      st.cpu_demand_ms = required<double>(js, "cpu_demand_ms", sw);
      st.demand_cv = optional_field<double>(js, "demand_cv", 0.0, sw);
      rt.stages.push_back(st);
    }
    g.request_types.push_back(std::move(rt));
  }
  validate_graph(g);
  return g;
}

ServiceGraph load_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open graph file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_graph(ss.str());
}

}  // namespace sinan
