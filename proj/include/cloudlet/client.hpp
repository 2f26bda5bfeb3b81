#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudlet/protocol.hpp"
#include "cloudlet/runtime.hpp"
#include "cloudlet/topics.hpp"

namespace cloudlet {

struct ClusterView {
  std::uint64_t version = 0;
  BrokerId controller = kNoLeader;
  std::map<std::string, TopicMetadata> topics;
  std::map<BrokerId, std::string> client_addresses;

  static ClusterView from_json(const nlohmann::json& j);
  std::string leader_address(const std::string& topic, std::uint32_t partition) const;
};

struct ClientOptions {
  std::uint32_t request_timeout_ms = 10'000;
  std::uint32_t attempts = 3;  // per request, with a metadata refresh between attempts
  std::uint32_t retry_backoff_ms = 100;
};

struct ProduceResult {
  Errc status = Errc::Ok;
  std::string message;
  std::vector<protocol::PartitionOffset> offsets;  // input order
  bool committed = false;
  std::uint32_t attempts = 0;

  bool ok() const { return status == Errc::Ok; }
};

struct FetchResult {
  Errc status = Errc::Ok;
  std::string message;
  std::uint64_t high_watermark = 0;
  std::uint64_t earliest_offset = 0;
  std::uint64_t next_offset = 0;
  std::vector<Record> records;

  bool ok() const { return status == Errc::Ok; }
};

struct JsonResult {
  Errc status = Errc::Ok;
  std::string message;
  nlohmann::json body;

  bool ok() const { return status == Errc::Ok; }
};

// Asynchronous client for the broker protocol. Routes requests to partition
// leaders from a cached cluster view and retries transient failures. Not
// thread-safe; use it from one executor.
class BrokerClient {
 public:
  BrokerClient(Executor& exec, Transport& transport, std::vector<std::string> bootstrap, ClientOptions options = {});

  void refresh_metadata(std::function<void(Errc)> done);
  const ClusterView& view() const { return view_; }
  std::int64_t last_refresh_ms() const { return last_refresh_ms_; }

  // |partition| absent routes by key (FNV-1a) or by this client's round-robin counter.
  void produce(const std::string& topic, std::optional<std::uint32_t> partition, std::vector<LogEntry> entries,
               protocol::AckMode ack, std::function<void(ProduceResult)> done);
  void fetch(const std::string& topic, std::uint32_t partition, std::uint64_t offset, std::uint32_t max_bytes,
             std::uint32_t wait_ms, std::function<void(FetchResult)> done);
  void create_topic(const TopicConfig& config, std::function<void(JsonResult)> done);
  void stats(const std::string& address, const nlohmann::json& query, std::function<void(JsonResult)> done);

  std::vector<std::string> broker_addresses() const;

 private:
  struct ProduceOp;
  void produce_attempt(std::shared_ptr<ProduceOp> op);
  void fetch_attempt(std::string topic, std::uint32_t partition, std::uint64_t offset, std::uint32_t max_bytes,
                     std::uint32_t wait_ms, std::uint32_t attempt, std::function<void(FetchResult)> done);
  void refresh_from(std::size_t index, std::vector<std::string> candidates, std::function<void(Errc)> done);
  void create_from(std::size_t index, std::vector<std::string> candidates, Bytes payload,
                   std::function<void(JsonResult)> done);
  void with_topic(const std::string& topic, std::function<void(Errc)> done);

  Executor& exec_;
  Transport& transport_;
  std::vector<std::string> bootstrap_;
  ClientOptions options_;
  ClusterView view_;
  std::int64_t last_refresh_ms_ = 0;
  std::uint64_t round_robin_ = 0;
};

bool retryable(Errc code);

}  // namespace cloudlet
