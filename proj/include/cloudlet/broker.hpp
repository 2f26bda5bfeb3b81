#pragma once

#include <array>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudlet/commit_log.hpp"
#include "cloudlet/fsutil.hpp"
#include "cloudlet/protocol.hpp"
#include "cloudlet/runtime.hpp"
#include "cloudlet/topics.hpp"

namespace cloudlet {

struct PeerConfig {
  BrokerId id = 0;
  std::string peer_address;
  std::string client_address;
};

struct BrokerConfig {
  BrokerId broker_id = 0;
  std::filesystem::path data_dir;
  std::string client_listen = "127.0.0.1:9092";
  std::string peer_listen = "127.0.0.1:9093";
  std::vector<PeerConfig> peers;  // other cluster members
  std::uint32_t heartbeat_interval_ms = 1000;
  std::uint32_t max_lag_ms = 10'000;
  std::uint32_t isr_check_interval_ms = 250;
  std::uint32_t retention_check_interval_ms = 30'000;
  std::uint32_t checkpoint_interval_ms = 5000;
  std::uint32_t replica_fetch_wait_ms = 500;
  std::uint32_t replica_fetch_max_bytes = 1u << 20;
  LogConfig log;

  // All broker ids in the cluster, sorted.
  std::vector<BrokerId> cluster() const;
  void validate() const;

  static BrokerConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // Resolves the config path: --config flag, then CLOUDLET_BROKER_CONFIG.
  static BrokerConfig load(const std::optional<std::filesystem::path>& flag_path);
};

enum class Origin { Client, Peer };

// Request activity counters for one broker process.
class ActivityStats {
 public:
  static constexpr std::size_t kBuckets = 32;  // bucket i: latency < 2^i us
  static constexpr std::size_t kRecent = 1024;

  struct TopicCounters {
    std::uint64_t messages_in = 0;
    std::uint64_t bytes_in = 0;
    std::uint64_t messages_out = 0;
    std::uint64_t bytes_out = 0;
  };
  struct RecentRequest {
    std::int64_t ts_ms;
    std::string kind;
    std::string topic;
    std::uint32_t partition;
    Errc status;
    std::int64_t latency_us;
  };

  void client_connected() { ++connected_clients_; }
  void client_disconnected() {
    if (connected_clients_ > 0) --connected_clients_;
  }
  void record(std::int64_t now_ms, bool produce, const std::string& topic, std::uint32_t partition, Errc status,
              std::int64_t latency_us);
  void count_in(const std::string& topic, std::uint64_t messages, std::uint64_t bytes);
  void count_out(const std::string& topic, std::uint64_t messages, std::uint64_t bytes);

  std::uint64_t produce_requests() const { return produce_; }
  std::uint64_t fetch_requests() const { return fetch_; }
  std::uint64_t histogram_total() const;
  std::uint32_t connected_clients() const { return connected_clients_; }

  // Optional filters: "topic" restricts per-topic counters and recent requests, "since_ms" recent requests.
  nlohmann::json to_json(const nlohmann::json& query = {}) const;

 private:
  std::uint32_t connected_clients_ = 0;
  std::uint64_t produce_ = 0;
  std::uint64_t fetch_ = 0;
  std::array<std::uint64_t, kBuckets> latency_{};
  std::map<std::string, TopicCounters> topics_;
  std::deque<RecentRequest> recent_;
};

// One broker. All methods run on the executor passed at construction; network
// input arrives through handle() and peer calls leave through |peers|.
class BrokerNode {
 public:
  BrokerNode(BrokerConfig config, Executor& exec, Transport& peers);
  ~BrokerNode();
  BrokerNode(const BrokerNode&) = delete;
  BrokerNode& operator=(const BrokerNode&) = delete;

  // Locks the data dir, loads topics and recovers every local log, then starts timers.
  void start();
  // Fails pending requests, checkpoints state and releases the data dir.
  void stop();
  // Simulated process death: drops all in-memory state without checkpointing.
  void crash();
  bool running() const { return running_; }

  void handle(protocol::Frame request, ReplyFn reply, Origin origin);
  void client_connected() { stats_.client_connected(); }
  void client_disconnected() { stats_.client_disconnected(); }

  BrokerId id() const { return config_.broker_id; }
  const BrokerConfig& config() const { return config_; }
  const TopicRegistry& registry() const { return *registry_; }
  const ActivityStats& stats() const { return stats_; }
  nlohmann::json stats_json(const nlohmann::json& query = {}) const;
  nlohmann::json metadata_json() const;

  // Introspection for tests and the harness.
  bool is_controller() const;
  bool metadata_ready() const { return ready_; }
  std::optional<std::uint64_t> high_watermark(const PartitionId& p) const;
  CommitLog* log(const PartitionId& p) const;
  bool is_leader(const PartitionId& p) const;
  std::vector<BrokerId> live_brokers() const;

 private:
  struct FollowerState {
    std::uint64_t leo = 0;
    std::int64_t last_caught_up_ms = 0;
    std::uint64_t last_hw_sent = 0;
    bool reached_end = false;  // fetched at the log end since this leadership began
  };
  struct ProduceWait;
  struct ParkedFetch {
    protocol::FetchRequest request;
    ReplyFn reply;
    TimerId timer = 0;
    std::int64_t started_us = 0;
    bool client = false;
    std::uint32_t correlation_id = 0;
  };
  struct Replica {
    PartitionId id;
    std::unique_ptr<CommitLog> log;
    std::uint64_t hw = 0;
    bool leading = false;
    std::uint32_t epoch = 0;
    bool epoch_known = false;
    BrokerId leader = kNoLeader;
    std::vector<BrokerId> isr;
    std::optional<std::vector<BrokerId>> proposed_isr;
    std::map<BrokerId, FollowerState> followers;
    std::vector<std::shared_ptr<ProduceWait>> waiters;
    std::vector<std::shared_ptr<ParkedFetch>> parked;
    std::uint64_t fetch_generation = 0;
    bool fetching = false;
  };

  Replica* replica(const PartitionId& p) const;
  Replica& ensure_replica(const PartitionId& p, const TopicConfig& cfg);
  void reconcile();
  void become_leader(Replica& r, const PartitionMeta& meta);
  void become_follower(Replica& r, const PartitionMeta& meta);

  void on_produce(const protocol::Frame& f, ReplyFn reply, Origin origin);
  void on_fetch(const protocol::Frame& f, ReplyFn reply, Origin origin);
  void on_heartbeat(const protocol::Frame& f, ReplyFn reply);
  void on_metadata(const protocol::Frame& f, ReplyFn reply, Origin origin);
  void on_decree(const protocol::Frame& f, ReplyFn reply);

  protocol::Frame not_leader(std::uint32_t corr, const PartitionId& p) const;
  void serve_fetch(Replica& r, const std::shared_ptr<ParkedFetch>& pf);
  bool fetch_ready(const Replica& r, const ParkedFetch& pf) const;
  void wake_fetches(Replica& r);
  void advance_hw(Replica& r);
  void fail_waiters(Replica& r, Errc code);
  std::vector<BrokerId> effective_isr(const Replica& r) const;

  void follower_fetch(Replica& r);
  void schedule_follower_fetch(Replica& r, std::int64_t delay_ms);

  void heartbeat_tick();
  void isr_tick();
  void retention_tick();
  void checkpoint_tick();
  void controller_duties();
  void apply_partition_change(const PartitionId& p, const PartitionMeta& meta);
  void broadcast_decree(const PartitionId& p, const PartitionMeta& meta);
  void push_snapshot();
  void pull_metadata(BrokerId from);
  void note_peer(BrokerId id, std::uint64_t version);
  bool live(BrokerId id) const;
  std::optional<BrokerId> controller() const;
  const PeerConfig* peer(BrokerId id) const;
  std::string client_address_of(BrokerId id) const;

  template <typename F>
  auto guarded(F fn) {
    return [alive = alive_, fn = std::move(fn)](auto&&... args) mutable {
      if (*alive) fn(std::forward<decltype(args)>(args)...);
    };
  }
  void periodic(std::uint32_t interval_ms, void (BrokerNode::*tick)());
  void shutdown(bool clean);

  void save_checkpoint();
  void load_checkpoint();

  void finish_request(Origin origin, bool produce, const std::string& topic, std::uint32_t partition, Errc status,
                      std::int64_t started_us);

  BrokerConfig config_;
  Executor& exec_;
  Transport& peers_;
  std::optional<DirLock> lock_;
  std::unique_ptr<TopicRegistry> registry_;
  std::map<PartitionId, std::unique_ptr<Replica>> replicas_;
  std::map<std::string, std::pair<std::uint64_t, std::uint32_t>> checkpoint_;  // hw, epoch
  std::map<BrokerId, std::int64_t> last_heard_ms_;
  std::map<BrokerId, std::uint64_t> peer_version_;
  std::set<BrokerId> pulls_in_flight_;
  ActivityStats stats_;
  std::vector<TimerId> timers_;
  std::int64_t started_ms_ = 0;
  std::uint64_t round_robin_ = 0;
  bool running_ = false;
  bool ready_ = false;
  std::shared_ptr<bool> alive_;
};

}  // namespace cloudlet
