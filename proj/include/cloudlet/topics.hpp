#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudlet/bytes.hpp"

namespace cloudlet {

using BrokerId = std::int32_t;
inline constexpr BrokerId kNoLeader = -1;

struct TopicConfig {
  std::string name;
  std::uint32_t partition_count = 1;
  std::uint32_t replication_factor = 1;
  std::uint64_t retention_ms = 86'400'000;

  // Name and numeric bounds; cluster-size bounds are checked at creation.
  void validate() const;
  bool operator==(const TopicConfig&) const = default;
};

struct PartitionId {
  std::string topic;
  std::uint32_t index = 0;

  auto operator<=>(const PartitionId&) const = default;
  std::string str() const { return topic + "-" + std::to_string(index); }
};

struct PartitionMeta {
  std::vector<BrokerId> replicas;  // ordered; first entry is the preferred leader
  BrokerId leader = kNoLeader;
  std::uint32_t leader_epoch = 0;
  std::vector<BrokerId> isr;

  bool operator==(const PartitionMeta&) const = default;
};

struct TopicMetadata {
  TopicConfig config;
  std::vector<PartitionMeta> partitions;

  bool operator==(const TopicMetadata&) const = default;
};

// Partition p is placed on brokers[(p + j) mod N] for j in [0, replication_factor).
std::vector<std::vector<BrokerId>> round_robin_assignment(std::uint32_t partition_count,
                                                          std::uint32_t replication_factor,
                                                          std::span<const BrokerId> brokers);

// Keyed: FNV-1a 32 of the key bytes mod partition_count. Unkeyed: counter mod partition_count.
std::uint32_t partition_for_key(const std::optional<Bytes>& key, std::uint32_t partition_count,
                                std::uint64_t round_robin_counter);

nlohmann::json to_json(const TopicMetadata& t);
TopicMetadata topic_from_json(const nlohmann::json& j);

// Topic registry. Persisted as one JSON document, rewritten atomically on change.
// Every mutation bumps version(), which orders snapshots across brokers.
class TopicRegistry {
 public:
  TopicRegistry() = default;
  // Loads |file| when it exists; later mutations are persisted there.
  explicit TopicRegistry(std::filesystem::path file, bool sync = true);

  TopicMetadata create_topic(const TopicConfig& config, std::span<const BrokerId> brokers);
  TopicMetadata lookup(const std::string& topic) const;
  std::optional<TopicMetadata> find(const std::string& topic) const;
  std::vector<std::string> list() const;
  std::vector<TopicMetadata> all() const;

  void set_partition(const PartitionId& p, const PartitionMeta& meta);
  std::uint64_t version() const;

  nlohmann::json snapshot() const;
  // Replaces local state with a snapshot from another broker if it is newer.
  bool adopt(const nlohmann::json& snapshot);

 private:
  void persist_locked() const;

  std::optional<std::filesystem::path> file_;
  bool sync_ = true;
  mutable std::shared_mutex mu_;
  std::map<std::string, TopicMetadata> topics_;
  std::uint64_t version_ = 0;
};

}  // namespace cloudlet
