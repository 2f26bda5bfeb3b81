#include "cloudlet/topics.hpp"

#include <algorithm>
#include <mutex>

#include "cloudlet/checksum.hpp"
#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"

namespace cloudlet {

void TopicConfig::validate() const {
  if (name.empty() || name.size() > 255) throw Error(Errc::InvalidConfig, "topic name must be 1-255 characters");
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
    if (!ok) throw Error(Errc::InvalidConfig, "topic name '" + name + "' has characters outside [a-z0-9._-]");
  }
  if (partition_count < 1) throw Error(Errc::InvalidConfig, "partition_count must be >= 1");
  if (replication_factor < 1) throw Error(Errc::InvalidConfig, "replication_factor must be >= 1");
  if (retention_ms < 1000) throw Error(Errc::InvalidConfig, "retention_ms must be >= 1000");
}

std::vector<std::vector<BrokerId>> round_robin_assignment(std::uint32_t partition_count,
                                                          std::uint32_t replication_factor,
                                                          std::span<const BrokerId> brokers) {
  if (replication_factor > brokers.size()) {
    throw Error(Errc::InsufficientBrokers, "replication factor " + std::to_string(replication_factor) +
                                               " exceeds cluster size " + std::to_string(brokers.size()));
  }
  std::vector<BrokerId> sorted(brokers.begin(), brokers.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  std::vector<std::vector<BrokerId>> out(partition_count);
  for (std::uint32_t p = 0; p < partition_count; ++p) {
    for (std::uint32_t j = 0; j < replication_factor; ++j) out[p].push_back(sorted[(p + j) % n]);
  }
  return out;
}

std::uint32_t partition_for_key(const std::optional<Bytes>& key, std::uint32_t partition_count,
                                std::uint64_t round_robin_counter) {
  if (partition_count == 0) throw Error(Errc::InvalidConfig, "partition_count must be >= 1");
  if (key) return fnv1a32(*key) % partition_count;
  return static_cast<std::uint32_t>(round_robin_counter % partition_count);
}

nlohmann::json to_json(const TopicMetadata& t) {
  nlohmann::json assignment = nlohmann::json::array();
  nlohmann::json leaders = nlohmann::json::array();
  nlohmann::json epochs = nlohmann::json::array();
  nlohmann::json isr = nlohmann::json::array();
  for (const auto& p : t.partitions) {
    assignment.push_back(p.replicas);
    leaders.push_back(p.leader);
    epochs.push_back(p.leader_epoch);
    isr.push_back(p.isr);
  }
  return {{"name", t.config.name},
          {"partition_count", t.config.partition_count},
          {"replication_factor", t.config.replication_factor},
          {"retention_ms", t.config.retention_ms},
          {"assignment", assignment},
          {"leaders", leaders},
          {"leader_epochs", epochs},
          {"isr", isr}};
}

TopicMetadata topic_from_json(const nlohmann::json& j) {
  TopicMetadata t;
  t.config.name = j.at("name").get<std::string>();
  t.config.partition_count = j.at("partition_count").get<std::uint32_t>();
  t.config.replication_factor = j.at("replication_factor").get<std::uint32_t>();
  t.config.retention_ms = j.at("retention_ms").get<std::uint64_t>();
  const auto& assignment = j.at("assignment");
  const auto& leaders = j.at("leaders");
  if (assignment.size() != t.config.partition_count || leaders.size() != t.config.partition_count) {
    throw Error(Errc::InvalidConfig, "registry entry for " + t.config.name + " has wrong partition arrays");
  }
  for (std::size_t p = 0; p < assignment.size(); ++p) {
    PartitionMeta m;
    m.replicas = assignment[p].get<std::vector<BrokerId>>();
    m.leader = leaders[p].get<BrokerId>();
    m.leader_epoch = j.contains("leader_epochs") ? j["leader_epochs"][p].get<std::uint32_t>() : 0;
    m.isr = j.contains("isr") ? j["isr"][p].get<std::vector<BrokerId>>() : m.replicas;
    t.partitions.push_back(std::move(m));
  }
  return t;
}

TopicRegistry::TopicRegistry(std::filesystem::path file, bool sync) : file_(std::move(file)), sync_(sync) {
  if (std::filesystem::exists(*file_)) {
    auto doc = nlohmann::json::parse(read_file(*file_));
    version_ = doc.value("version", std::uint64_t{0});
    for (const auto& t : doc.at("topics")) {
      auto meta = topic_from_json(t);
      topics_.emplace(meta.config.name, std::move(meta));
    }
  }
}

TopicMetadata TopicRegistry::create_topic(const TopicConfig& config, std::span<const BrokerId> brokers) {
  config.validate();
  std::unique_lock lock(mu_);
  if (topics_.contains(config.name)) throw Error(Errc::TopicExists, "topic " + config.name + " already exists");
  auto assignment = round_robin_assignment(config.partition_count, config.replication_factor, brokers);
  TopicMetadata meta{config, {}};
  for (auto& replicas : assignment) {
    PartitionMeta p;
    p.leader = replicas.front();
    p.isr = replicas;
    p.replicas = std::move(replicas);
    meta.partitions.push_back(std::move(p));
  }
  topics_.emplace(config.name, meta);
  ++version_;
  persist_locked();
  return meta;
}

TopicMetadata TopicRegistry::lookup(const std::string& topic) const {
  auto t = find(topic);
  if (!t) throw Error(Errc::UnknownTopic, "unknown topic " + topic);
  return *t;
}

std::optional<TopicMetadata> TopicRegistry::find(const std::string& topic) const {
  std::shared_lock lock(mu_);
  auto it = topics_.find(topic);
  if (it == topics_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> TopicRegistry::list() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> names;
  for (const auto& [name, _] : topics_) names.push_back(name);
  return names;
}

std::vector<TopicMetadata> TopicRegistry::all() const {
  std::shared_lock lock(mu_);
  std::vector<TopicMetadata> out;
  for (const auto& [_, t] : topics_) out.push_back(t);
  return out;
}

void TopicRegistry::set_partition(const PartitionId& p, const PartitionMeta& meta) {
  std::unique_lock lock(mu_);
  auto it = topics_.find(p.topic);
  if (it == topics_.end() || p.index >= it->second.partitions.size()) {
    throw Error(Errc::UnknownTopicOrPartition, "unknown partition " + p.str());
  }
  if (it->second.partitions[p.index] == meta) return;
  it->second.partitions[p.index] = meta;
  ++version_;
  persist_locked();
}

std::uint64_t TopicRegistry::version() const {
  std::shared_lock lock(mu_);
  return version_;
}

nlohmann::json TopicRegistry::snapshot() const {
  std::shared_lock lock(mu_);
  nlohmann::json topics = nlohmann::json::array();
  for (const auto& [_, t] : topics_) topics.push_back(to_json(t));
  return {{"version", version_}, {"topics", topics}};
}

bool TopicRegistry::adopt(const nlohmann::json& snapshot) {
  const auto v = snapshot.at("version").get<std::uint64_t>();
  std::map<std::string, TopicMetadata> parsed;
  for (const auto& t : snapshot.at("topics")) {
    auto meta = topic_from_json(t);
    parsed.emplace(meta.config.name, std::move(meta));
  }
  std::unique_lock lock(mu_);
  if (v <= version_) return false;
  topics_ = std::move(parsed);
  version_ = v;
  persist_locked();
  return true;
}

void TopicRegistry::persist_locked() const {
  if (!file_) return;
  nlohmann::json topics = nlohmann::json::array();
  for (const auto& [_, t] : topics_) topics.push_back(to_json(t));
  nlohmann::json doc{{"version", version_}, {"topics", topics}};
  atomic_write_file(*file_, doc.dump(2) + "\n", sync_);
}

}  // namespace cloudlet
