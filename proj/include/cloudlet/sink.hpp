#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cloudlet/client.hpp"
#include "cloudlet/ts_store.hpp"

namespace cloudlet {

struct SinkConfig {
  std::vector<std::string> topics;
  std::filesystem::path store_dir;
  std::uint32_t max_bytes = 1u << 20;            // per fetch
  std::uint32_t max_records_per_batch = 500;
  double rate_cap_per_s = 0;                     // records per second, 0 = unlimited
  std::uint32_t idle_backoff_ms = 100;           // after a round with nothing new
  std::uint32_t error_backoff_ms = 500;
  std::uint32_t metadata_refresh_ms = 2000;      // while a topic is still missing
  bool sync = true;
};

// Position jump forced by retention: [from, to) was deleted before it was read.
struct GapEvent {
  std::string topic;
  std::uint32_t partition = 0;
  std::uint64_t from = 0;
  std::uint64_t to = 0;
  std::int64_t at_ms = 0;

  nlohmann::json to_json() const;
  static GapEvent from_json(const nlohmann::json& j);
};

struct SinkStats {
  std::uint64_t fetches = 0;
  std::uint64_t fetch_errors = 0;
  std::uint64_t records = 0;
  std::uint64_t stored = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t dead_letters = 0;
  std::uint64_t batches = 0;

  nlohmann::json to_json() const;
};

using PartitionKey = std::pair<std::string, std::uint32_t>;
using Positions = std::map<PartitionKey, std::uint64_t>;

// Measurement record as written by the gateway. Throws Error(DecodeError).
struct DecodedMeasurement {
  std::string series;
  StoredPoint point;
};
DecodedMeasurement decode_measurement(ByteView value);

// Drains measurement topics into a TsStore. Each batch is made durable in the
// store before the position that covers it is persisted, so a crash replays at
// most one batch and the store's source dedup absorbs it.
class Sink {
 public:
  // Crash-injection point names: "fetched", "stored", "checkpointed".
  using StageHook = std::function<bool(std::string_view stage)>;
  // Called once per newly stored point, after the batch holding it is durable.
  using StoredHook = std::function<void(const std::string& series, const StoredPoint& point)>;

  Sink(SinkConfig config, Executor& exec, BrokerClient& client);
  ~Sink();
  Sink(const Sink&) = delete;
  Sink& operator=(const Sink&) = delete;

  void start();
  void stop();
  bool running() const { return running_; }
  // True after a stage hook asked for a crash.
  bool crashed() const { return crashed_; }

  void set_stage_hook(StageHook hook) { stage_hook_ = std::move(hook); }
  void set_stored_hook(StoredHook hook) { stored_hook_ = std::move(hook); }

  // Last durably persisted positions. Partitions never fetched read as 0.
  Positions checkpoint_state() const;
  std::uint64_t lost() const { return lost_; }
  const std::vector<GapEvent>& gaps() const { return gaps_; }
  const SinkStats& stats() const { return stats_; }
  // high_watermark seen on the last fetch of each partition.
  const Positions& observed_high_watermarks() const { return observed_hw_; }
  nlohmann::json stats_json() const;

  const TsStore& store() const { return *store_; }

  std::filesystem::path checkpoint_path() const { return config_.store_dir / "sink-checkpoint.json"; }
  std::filesystem::path dead_letter_path() const { return config_.store_dir / "dead-letters.jsonl"; }

 private:
  void load_state();
  void discover();
  void step();
  void schedule_step(std::int64_t delay_ms);
  void on_fetch(const PartitionKey& key, std::uint64_t asked, FetchResult r);
  void persist_checkpoint();
  void append_dead_letters(const std::vector<nlohmann::json>& lines);
  bool stage(std::string_view name);

  SinkConfig config_;
  Executor& exec_;
  BrokerClient& client_;
  std::unique_ptr<TsStore> store_;
  std::shared_ptr<bool> alive_;

  bool running_ = false;
  bool crashed_ = false;
  bool in_flight_ = false;
  std::optional<TimerId> timer_;
  std::optional<TimerId> meta_timer_;

  std::vector<PartitionKey> partitions_;
  std::size_t cursor_ = 0;
  bool round_progress_ = false;

  Positions positions_;  // advanced only after the checkpoint holding them is written
  Positions observed_hw_;
  std::set<std::tuple<std::string, std::uint32_t, std::uint64_t>> dead_set_;
  std::vector<GapEvent> gaps_;
  std::uint64_t lost_ = 0;
  SinkStats stats_;

  StageHook stage_hook_;
  StoredHook stored_hook_;
};

}  // namespace cloudlet
