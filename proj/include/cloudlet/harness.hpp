#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudlet/sim.hpp"

namespace cloudlet::harness {

// Three tiers: "device", "cloudlet", "cloud". Brokers and the gateway run on the
// ingest tier; the sink runs on the sink tier and drains the ingest cluster.
struct TopologyConfig {
  sim::LinkModel device_cloudlet{5.0, 0.5, 12'500'000, 0.0};
  sim::LinkModel device_cloud{100.0, 5.0, 12'500'000, 0.0};
  sim::LinkModel cloudlet_cloud{100.0, 5.0, 125'000'000, 0.0};
  sim::LinkModel intra_tier{0.1, 0.02, 0, 0.0};

  std::uint32_t cloudlet_brokers = 1;
  std::uint32_t cloud_brokers = 1;
  std::string ingest = "cloudlet";
  std::string sink_tier = "cloud";

  std::uint32_t partitions = 4;
  std::uint32_t replication_factor = 1;
  std::uint64_t retention_ms = 300'000;
  std::uint64_t segment_bytes = 64 * 1024;

  bool sink_enabled = true;
  double sink_rate_cap_per_s = 0;  // 0 = as fast as fetches allow
  std::uint32_t sink_batch = 100;

  std::string pseudonym_secret = "cloudlet-harness-secret";
  std::uint64_t rng_seed = 42;

  void validate() const;
  static TopologyConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct Burst {
  std::int64_t start_ms = 0;
  std::int64_t duration_ms = 0;
  double rate_multiplier = 1.0;
};

struct SeriesWeight {
  std::string series;
  double weight = 1.0;
};

struct WorkloadSpec {
  std::uint32_t device_count = 10;
  double base_rate_per_device_hz = 1.0;  // Poisson
  std::vector<Burst> bursts;
  std::uint32_t payload_bytes = 0;  // padding attribute per measurement
  std::vector<SeriesWeight> series_mix{{"noise", 1.0}};
  std::uint32_t max_in_flight_per_device = 0;  // 0 = unlimited
  std::uint32_t messages_per_device = 0;       // stop after this many, 0 = unlimited
  std::uint32_t attempts = 3;
  std::uint32_t request_timeout_ms = 5000;
  std::uint32_t retry_backoff_ms = 100;
  std::int64_t drain_timeout_ms = 600'000;  // virtual time allowed after the run to drain

  void validate(std::int64_t duration_ms) const;
  static WorkloadSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Actions: kill_broker {target}, partition_link {a, b}, stall_sink,
// resume {target: broker | "sink"} or resume {a, b}. Link ends name a tier or a host.
struct ScenarioEvent {
  std::int64_t at_ms = 0;
  std::string action;
  std::string target;
  std::string a;
  std::string b;
};

struct Scenario {
  std::vector<ScenarioEvent> events;
  static Scenario from_json(const nlohmann::json& j);
};

struct RunOptions {
  std::optional<std::filesystem::path> data_dir;  // default: a fresh temp dir removed afterwards
  std::optional<std::uint64_t> seed;              // overrides topology.rng_seed
};

// Runs real brokers, gateway and sink on one virtual clock and returns the
// MetricsReport ("v": 1). A pure function of its inputs.
nlohmann::json simulate(const TopologyConfig& topology, const WorkloadSpec& workload, std::int64_t duration_ms,
                        const Scenario& scenario = {}, const RunOptions& options = {});

// Same seeded workload ingested via the cloudlet and via a cloud-tier broker.
nlohmann::json compare_paths(const TopologyConfig& topology, const WorkloadSpec& workload, std::int64_t duration_ms,
                             const RunOptions& options = {});

// Burst run with the sink capped at |consumer_rate_cap| records/s.
nlohmann::json burst_drain(const TopologyConfig& topology, const WorkloadSpec& workload, double consumer_rate_cap,
                           std::int64_t duration_ms, const Scenario& scenario = {}, const RunOptions& options = {});

// The raw device ids a run with this seed and device count uses.
std::vector<std::string> device_ids(std::uint64_t seed, std::uint32_t count);

// Parses "60s", "500ms", "2m" or a bare millisecond count.
std::int64_t parse_duration_ms(const std::string& text);

}  // namespace cloudlet::harness
