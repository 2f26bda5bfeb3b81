#include "cloudlet/broker.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <limits>

#include "cloudlet/error.hpp"

namespace cloudlet {

using nlohmann::json;
using protocol::Frame;
using protocol::MsgType;
using protocol::response_frame;

namespace {

bool contains(const std::vector<BrokerId>& v, BrokerId id) { return std::find(v.begin(), v.end(), id) != v.end(); }

constexpr std::uint32_t kMaxFetchWaitMs = 30'000;

}  // namespace

// ---- config ----

std::vector<BrokerId> BrokerConfig::cluster() const {
  std::vector<BrokerId> ids{broker_id};
  for (const auto& p : peers) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void BrokerConfig::validate() const {
  if (broker_id < 0) throw Error(Errc::ConfigError, "broker_id must be >= 0");
  if (data_dir.empty()) throw Error(Errc::ConfigError, "data_dir is required");
  auto ids = cluster();
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error(Errc::ConfigError, "broker ids must be unique across peers");
  }
  if (heartbeat_interval_ms == 0 || isr_check_interval_ms == 0 || retention_check_interval_ms == 0 ||
      checkpoint_interval_ms == 0) {
    throw Error(Errc::ConfigError, "intervals must be positive");
  }
  try {
    log.validate();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
}

BrokerConfig BrokerConfig::from_json(const json& j) {
  try {
    BrokerConfig c;
    c.broker_id = j.at("broker_id").get<BrokerId>();
    c.data_dir = j.at("data_dir").get<std::string>();
    c.client_listen = j.value("client_listen", c.client_listen);
    c.peer_listen = j.value("peer_listen", c.peer_listen);
    for (const auto& p : j.value("peers", json::array())) {
      c.peers.push_back(PeerConfig{p.at("broker_id").get<BrokerId>(), p.at("peer_address").get<std::string>(),
                                   p.value("client_address", std::string{})});
    }
    c.heartbeat_interval_ms = j.value("heartbeat_interval_ms", c.heartbeat_interval_ms);
    c.max_lag_ms = j.value("max_lag_ms", c.max_lag_ms);
    c.isr_check_interval_ms = j.value("isr_check_interval_ms", c.isr_check_interval_ms);
    c.retention_check_interval_ms = j.value("retention_check_interval_ms", c.retention_check_interval_ms);
    c.checkpoint_interval_ms = j.value("checkpoint_interval_ms", c.checkpoint_interval_ms);
    c.replica_fetch_wait_ms = j.value("replica_fetch_wait_ms", c.replica_fetch_wait_ms);
    c.replica_fetch_max_bytes = j.value("replica_fetch_max_bytes", c.replica_fetch_max_bytes);
    if (j.contains("log")) {
      const auto& l = j["log"];
      c.log.retention_ms = l.value("retention_ms", c.log.retention_ms);
      c.log.segment_max_bytes = l.value("segment_max_bytes", c.log.segment_max_bytes);
      c.log.index_interval_bytes = l.value("index_interval_bytes", c.log.index_interval_bytes);
      c.log.max_record_bytes = l.value("max_record_bytes", c.log.max_record_bytes);
      c.log.capacity_bytes = l.value("capacity_bytes", c.log.capacity_bytes);
      c.log.fsync = l.value("fsync", c.log.fsync);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, std::string("broker config: ") + e.what());
  }
}

json BrokerConfig::to_json() const {
  json peers_j = json::array();
  for (const auto& p : peers) {
    peers_j.push_back({{"broker_id", p.id}, {"peer_address", p.peer_address}, {"client_address", p.client_address}});
  }
  return {{"broker_id", broker_id},
          {"data_dir", data_dir.string()},
          {"client_listen", client_listen},
          {"peer_listen", peer_listen},
          {"peers", peers_j},
          {"heartbeat_interval_ms", heartbeat_interval_ms},
          {"max_lag_ms", max_lag_ms},
          {"isr_check_interval_ms", isr_check_interval_ms},
          {"retention_check_interval_ms", retention_check_interval_ms},
          {"checkpoint_interval_ms", checkpoint_interval_ms},
          {"replica_fetch_wait_ms", replica_fetch_wait_ms},
          {"replica_fetch_max_bytes", replica_fetch_max_bytes},
          {"log",
           {{"retention_ms", log.retention_ms},
            {"segment_max_bytes", log.segment_max_bytes},
            {"index_interval_bytes", log.index_interval_bytes},
            {"max_record_bytes", log.max_record_bytes},
            {"capacity_bytes", log.capacity_bytes},
            {"fsync", log.fsync}}}};
}

BrokerConfig BrokerConfig::load(const std::optional<std::filesystem::path>& flag_path) {
  std::filesystem::path path;
  if (flag_path) {
    path = *flag_path;
  } else if (const char* env = std::getenv("CLOUDLET_BROKER_CONFIG"); env && *env) {
    path = env;
  } else {
    throw Error(Errc::ConfigError, "no broker config: pass --config or set CLOUDLET_BROKER_CONFIG");
  }
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw Error(Errc::ConfigError, "cannot read broker config " + path.string() + ": " + e.what());
  }
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error(Errc::ConfigError, "broker config " + path.string() + " is not valid JSON");
  return from_json(j);
}

// ---- stats ----

void ActivityStats::record(std::int64_t now_ms, bool produce, const std::string& topic, std::uint32_t partition,
                           Errc status, std::int64_t latency_us) {
  (produce ? produce_ : fetch_) += 1;
  const auto us = static_cast<std::uint64_t>(std::max<std::int64_t>(0, latency_us));
  latency_[std::min<std::size_t>(std::bit_width(us), kBuckets - 1)] += 1;
  recent_.push_back(RecentRequest{now_ms, produce ? "produce" : "fetch", topic, partition, status, latency_us});
  if (recent_.size() > kRecent) recent_.pop_front();
}

void ActivityStats::count_in(const std::string& topic, std::uint64_t messages, std::uint64_t bytes) {
  auto& t = topics_[topic];
  t.messages_in += messages;
  t.bytes_in += bytes;
}

void ActivityStats::count_out(const std::string& topic, std::uint64_t messages, std::uint64_t bytes) {
  auto& t = topics_[topic];
  t.messages_out += messages;
  t.bytes_out += bytes;
}

std::uint64_t ActivityStats::histogram_total() const {
  std::uint64_t n = 0;
  for (auto c : latency_) n += c;
  return n;
}

json ActivityStats::to_json(const json& query) const {
  const std::string topic = query.is_object() ? query.value("topic", std::string{}) : std::string{};
  const std::int64_t since = query.is_object() ? query.value("since_ms", std::int64_t{0}) : 0;
  json buckets = json::array();
  for (std::size_t i = 0; i < kBuckets; ++i) {
    buckets.push_back({{"lt_us", std::uint64_t{1} << i}, {"count", latency_[i]}});
  }
  json topics = json::object();
  for (const auto& [name, c] : topics_) {
    if (!topic.empty() && name != topic) continue;
    topics[name] = {{"messages_in", c.messages_in},
                    {"bytes_in", c.bytes_in},
                    {"messages_out", c.messages_out},
                    {"bytes_out", c.bytes_out}};
  }
  json recent = json::array();
  for (const auto& r : recent_) {
    if (!topic.empty() && r.topic != topic) continue;
    if (r.ts_ms < since) continue;
    recent.push_back({{"ts_ms", r.ts_ms},
                      {"kind", r.kind},
                      {"topic", r.topic},
                      {"partition", r.partition},
                      {"status", errc_name(r.status)},
                      {"latency_us", r.latency_us}});
  }
  return {{"connected_clients", connected_clients_},
          {"produce_requests", produce_},
          {"fetch_requests", fetch_},
          {"latency_histogram_us", {{"count", histogram_total()}, {"buckets", buckets}}},
          {"topics", topics},
          {"recent_requests", recent}};
}

// ---- node ----

struct BrokerNode::ProduceWait {
  std::uint64_t end_offset = 0;
  std::function<void(Errc)> done;
};

BrokerNode::BrokerNode(BrokerConfig config, Executor& exec, Transport& peers)
    : config_(std::move(config)), exec_(exec), peers_(peers), alive_(std::make_shared<bool>(false)) {}

BrokerNode::~BrokerNode() { shutdown(true); }

void BrokerNode::start() {
  if (running_) throw Error(Errc::InvalidConfig, "broker already started");
  config_.validate();
  std::filesystem::create_directories(config_.data_dir);
  lock_.emplace(config_.data_dir);
  try {
    registry_ = std::make_unique<TopicRegistry>(config_.data_dir / "topics.json", config_.log.fsync);
    load_checkpoint();
    running_ = true;
    alive_ = std::make_shared<bool>(true);
    for (const auto& t : registry_->all()) {
      for (std::uint32_t p = 0; p < t.partitions.size(); ++p) {
        if (contains(t.partitions[p].replicas, id())) ensure_replica({t.config.name, p}, t.config);
      }
    }
  } catch (...) {
    running_ = false;
    *alive_ = false;
    replicas_.clear();
    lock_.reset();
    throw;
  }
  started_ms_ = exec_.now_ms();
  for (const auto& p : config_.peers) last_heard_ms_[p.id] = started_ms_;
  ready_ = config_.peers.empty();
  reconcile();
  periodic(config_.heartbeat_interval_ms, &BrokerNode::heartbeat_tick);
  periodic(config_.isr_check_interval_ms, &BrokerNode::isr_tick);
  periodic(config_.retention_check_interval_ms, &BrokerNode::retention_tick);
  periodic(config_.checkpoint_interval_ms, &BrokerNode::checkpoint_tick);
  exec_.post(guarded([this] { heartbeat_tick(); }));
}

void BrokerNode::stop() { shutdown(true); }

void BrokerNode::crash() { shutdown(false); }

void BrokerNode::shutdown(bool clean) {
  if (!running_) return;
  running_ = false;
  *alive_ = false;
  for (auto& [_, r] : replicas_) {
    if (clean) {
      fail_waiters(*r, Errc::Unavailable);
      for (auto& pf : r->parked) {
        exec_.cancel(pf->timer);
        pf->reply(response_frame(pf->correlation_id, Errc::Unavailable, "broker shutting down"));
      }
    }
    r->waiters.clear();
    r->parked.clear();
  }
  if (clean) {
    try {
      save_checkpoint();
    } catch (const std::exception&) {
      // the next start recovers with whatever checkpoint survived
    }
  }
  for (auto& [_, r] : replicas_) {
    try {
      if (clean) r->log->close();
    } catch (const std::exception&) {
    }
  }
  replicas_.clear();
  registry_.reset();
  lock_.reset();
  ready_ = false;
  pulls_in_flight_.clear();
}

void BrokerNode::periodic(std::uint32_t interval_ms, void (BrokerNode::*tick)()) {
  exec_.schedule_after_ms(interval_ms, guarded([this, interval_ms, tick] {
    try {
      (this->*tick)();
    } catch (const std::exception&) {
      // transient failure; the next tick retries
    }
    periodic(interval_ms, tick);
  }));
}

BrokerNode::Replica* BrokerNode::replica(const PartitionId& p) const {
  auto it = replicas_.find(p);
  return it == replicas_.end() ? nullptr : it->second.get();
}

CommitLog* BrokerNode::log(const PartitionId& p) const {
  auto* r = replica(p);
  return r ? r->log.get() : nullptr;
}

bool BrokerNode::is_leader(const PartitionId& p) const {
  auto* r = replica(p);
  return r && r->leading;
}

std::optional<std::uint64_t> BrokerNode::high_watermark(const PartitionId& p) const {
  auto* r = replica(p);
  if (!r) return std::nullopt;
  return r->hw;
}

BrokerNode::Replica& BrokerNode::ensure_replica(const PartitionId& p, const TopicConfig& cfg) {
  if (auto* r = replica(p)) return *r;
  auto r = std::make_unique<Replica>();
  r->id = p;
  LogConfig lc = config_.log;
  lc.retention_ms = cfg.retention_ms;
  r->log = std::make_unique<CommitLog>(config_.data_dir / p.str(), lc);
  if (auto it = checkpoint_.find(p.str()); it != checkpoint_.end()) {
    r->hw = std::min(it->second.first, r->log->next_offset());
    r->epoch = it->second.second;
    r->epoch_known = true;
  }
  r->hw = std::max(r->hw, r->log->earliest_offset());
  auto& slot = replicas_[p];
  slot = std::move(r);
  return *slot;
}

void BrokerNode::reconcile() {
  if (!running_) return;
  for (const auto& t : registry_->all()) {
    for (std::uint32_t p = 0; p < t.partitions.size(); ++p) {
      const auto& m = t.partitions[p];
      if (!contains(m.replicas, id())) continue;
      auto& r = ensure_replica({t.config.name, p}, t.config);
      if (!ready_) continue;
      if (m.leader == id()) {
        if (!r.leading || r.epoch != m.leader_epoch) {
          become_leader(r, m);
        } else {
          r.isr = m.isr;
          if (r.proposed_isr == m.isr) r.proposed_isr.reset();
          advance_hw(r);
        }
      } else if (r.leading || !r.epoch_known || r.epoch != m.leader_epoch || r.leader != m.leader ||
                 (!r.fetching && m.leader != kNoLeader)) {
        become_follower(r, m);
      } else {
        r.isr = m.isr;
      }
    }
  }
}

void BrokerNode::become_leader(Replica& r, const PartitionMeta& meta) {
  ++r.fetch_generation;
  r.fetching = false;
  r.leading = true;
  r.epoch = meta.leader_epoch;
  r.epoch_known = true;
  r.leader = id();
  r.isr = meta.isr;
  r.proposed_isr.reset();
  r.followers.clear();
  const auto now = exec_.now_ms();
  for (auto f : meta.replicas) {
    if (f == id()) continue;
    r.followers[f] = FollowerState{0, now, std::numeric_limits<std::uint64_t>::max(), false};
  }
  advance_hw(r);
}

void BrokerNode::become_follower(Replica& r, const PartitionMeta& meta) {
  const bool epoch_changed = !r.epoch_known || r.epoch != meta.leader_epoch;
  if (r.leading) {
    r.leading = false;
    fail_waiters(r, Errc::NotLeader);
  }
  auto parked = std::move(r.parked);
  r.parked.clear();
  for (auto& pf : parked) {
    exec_.cancel(pf->timer);
    if (pf->client) finish_request(Origin::Client, false, r.id.topic, r.id.index, Errc::NotLeader, pf->started_us);
    pf->reply(not_leader(pf->correlation_id, r.id));
  }
  r.followers.clear();
  r.proposed_isr.reset();
  // The tail past our high watermark may be uncommitted and diverge from the new leader.
  // With no leader at all there is nothing to diverge from yet.
  if (epoch_changed && meta.leader != kNoLeader && r.log->next_offset() > r.hw) {
    r.log->truncate_to(std::max(r.hw, r.log->earliest_offset()));
  }
  r.hw = std::min(r.hw, r.log->next_offset());
  r.epoch = meta.leader_epoch;
  r.epoch_known = true;
  r.leader = meta.leader;
  r.isr = meta.isr;
  ++r.fetch_generation;
  r.fetching = false;
  if (meta.leader != kNoLeader) schedule_follower_fetch(r, 0);
}

std::vector<BrokerId> BrokerNode::effective_isr(const Replica& r) const {
  std::vector<BrokerId> out = r.isr;
  if (r.proposed_isr) {
    for (auto id : *r.proposed_isr) {
      if (!contains(out, id)) out.push_back(id);
    }
  }
  return out;
}

void BrokerNode::advance_hw(Replica& r) {
  if (!r.leading) return;
  std::uint64_t hw = r.log->next_offset();
  for (auto f : effective_isr(r)) {
    if (f == id()) continue;
    auto it = r.followers.find(f);
    hw = std::min<std::uint64_t>(hw, it == r.followers.end() ? 0 : it->second.leo);
  }
  if (hw <= r.hw) return;
  r.hw = hw;
  std::vector<std::shared_ptr<ProduceWait>> keep, done;
  for (auto& w : r.waiters) (w->end_offset <= hw ? done : keep).push_back(w);
  r.waiters = std::move(keep);
  for (auto& w : done) w->done(Errc::Ok);
  wake_fetches(r);
}

void BrokerNode::fail_waiters(Replica& r, Errc code) {
  auto waiters = std::move(r.waiters);
  r.waiters.clear();
  for (auto& w : waiters) w->done(code);
}

Frame BrokerNode::not_leader(std::uint32_t corr, const PartitionId& p) const {
  protocol::NotLeaderHint hint;
  if (registry_) {
    if (auto meta = registry_->find(p.topic); meta && p.index < meta->partitions.size()) {
      hint.leader = meta->partitions[p.index].leader;
      hint.leader_epoch = meta->partitions[p.index].leader_epoch;
      hint.leader_address = client_address_of(hint.leader);
    }
  }
  return response_frame(corr, Errc::NotLeader, "broker " + std::to_string(id()) + " is not the leader for " + p.str(),
                        protocol::encode(hint));
}

void BrokerNode::finish_request(Origin origin, bool produce, const std::string& topic, std::uint32_t partition,
                                Errc status, std::int64_t started_us) {
  if (origin != Origin::Client) return;
  stats_.record(exec_.now_ms(), produce, topic, partition, status, exec_.now_us() - started_us);
}

void BrokerNode::handle(Frame request, ReplyFn reply, Origin origin) {
  const auto corr = request.correlation_id;
  if (!running_) {
    reply(response_frame(corr, Errc::Unavailable, "broker is not running"));
    return;
  }
  // Exactly one reply per request, even when a handler throws after taking the callback.
  auto once = std::make_shared<ReplyFn>(std::move(reply));
  reply = [once](protocol::Frame f) {
    if (!*once) return;
    auto fn = std::move(*once);
    *once = nullptr;
    fn(std::move(f));
  };
  try {
    switch (request.type) {
      case MsgType::Produce:
        on_produce(request, std::move(reply), origin);
        return;
      case MsgType::Fetch:
        on_fetch(request, std::move(reply), origin);
        return;
      case MsgType::Heartbeat:
        on_heartbeat(request, std::move(reply));
        return;
      case MsgType::Metadata:
        on_metadata(request, std::move(reply), origin);
        return;
      case MsgType::FailoverDecree:
        on_decree(request, std::move(reply));
        return;
      default:
        reply(response_frame(corr, Errc::Malformed, "unexpected message type"));
        return;
    }
  } catch (const Error& e) {
    if (*once) (*once)(response_frame(corr, e.code(), e.what()));
  } catch (const std::exception& e) {
    if (*once) (*once)(response_frame(corr, Errc::Io, e.what()));
  }
}

// ---- produce ----

namespace {

struct ProduceCall {
  std::uint32_t corr = 0;
  ReplyFn reply;
  std::vector<protocol::PartitionOffset> offsets;
  std::size_t pending = 0;
  bool replied = false;
  TimerId timer = 0;
};

}  // namespace

void BrokerNode::on_produce(const Frame& f, ReplyFn reply, Origin origin) {
  const auto started = exec_.now_us();
  auto req = protocol::decode_produce_request(f.payload);
  const std::uint32_t stat_partition = req.partition < 0 ? 0 : static_cast<std::uint32_t>(req.partition);
  auto fail = [&](Frame resp, Errc code) {
    finish_request(origin, true, req.topic, stat_partition, code, started);
    reply(std::move(resp));
  };
  auto fail_code = [&](Errc code, const std::string& msg) { fail(response_frame(f.correlation_id, code, msg), code); };

  if (!ready_) return fail(not_leader(f.correlation_id, {req.topic, stat_partition}), Errc::NotLeader);
  auto meta = registry_->find(req.topic);
  if (!meta) return fail_code(Errc::UnknownTopic, "unknown topic '" + req.topic + "'");
  const auto count = meta->config.partition_count;
  if (req.partition >= 0 && static_cast<std::uint32_t>(req.partition) >= count) {
    return fail_code(Errc::UnknownTopicOrPartition, "unknown partition " + PartitionId{req.topic, stat_partition}.str());
  }
  for (const auto& e : req.entries) {
    if (record_format::framed_size(e.key, e.value.size()) > config_.log.max_record_bytes) {
      return fail_code(Errc::MessageTooLarge, "record exceeds max_record_bytes " +
                                                  std::to_string(config_.log.max_record_bytes));
    }
  }

  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < req.entries.size(); ++i) {
    const auto p = req.partition >= 0 ? static_cast<std::uint32_t>(req.partition)
                                      : partition_for_key(req.entries[i].key, count, round_robin_++);
    groups[p].push_back(i);
  }
  for (const auto& [p, _] : groups) {
    auto* r = replica({req.topic, p});
    if (meta->partitions[p].leader == kNoLeader) {
      return fail_code(Errc::NoViableLeader, "partition " + PartitionId{req.topic, p}.str() + " has no live in-sync replica");
    }
    if (!r || !r->leading) return fail(not_leader(f.correlation_id, {req.topic, p}), Errc::NotLeader);
  }

  auto call = std::make_shared<ProduceCall>();
  call->corr = f.correlation_id;
  call->offsets.resize(req.entries.size());
  const std::string topic = req.topic;
  auto finish = std::make_shared<std::function<void(Errc, bool)>>();
  *finish = [this, call, reply, origin, topic, stat_partition, started](Errc code, bool committed) {
    if (call->replied) return;
    call->replied = true;
    exec_.cancel(call->timer);
    finish_request(origin, true, topic, stat_partition, code, started);
    if (code != Errc::Ok) {
      const std::string msg = code == Errc::RequestTimeout
                                  ? "timed out waiting for in-sync replicas; the write may still commit"
                                  : "produce failed: " + std::string(errc_name(code));
      reply(response_frame(call->corr, code, msg));
      return;
    }
    reply(response_frame(call->corr, Errc::Ok, {}, protocol::encode(protocol::ProduceResponse{call->offsets, committed})));
  };

  std::vector<std::pair<Replica*, std::uint64_t>> appended;
  for (const auto& [p, idx] : groups) {
    auto* r = replica({req.topic, p});
    std::vector<LogEntry> entries;
    entries.reserve(idx.size());
    std::uint64_t bytes = 0;
    for (auto i : idx) {
      bytes += req.entries[i].value.size() + (req.entries[i].key ? req.entries[i].key->size() : 0);
      entries.push_back(std::move(req.entries[i]));
    }
    std::uint64_t base = 0;
    try {
      base = r->log->append(entries);
    } catch (const Error& e) {
      (*finish)(e.code(), false);
      return;
    }
    for (std::size_t k = 0; k < idx.size(); ++k) call->offsets[idx[k]] = {p, base + k};
    stats_.count_in(req.topic, idx.size(), bytes);
    appended.emplace_back(r, base + idx.size());
    wake_fetches(*r);
    advance_hw(*r);
  }

  if (req.ack == protocol::AckMode::LeaderOnly) {
    bool committed = true;
    for (const auto& [r, end] : appended) committed = committed && r->hw >= end;
    (*finish)(Errc::Ok, committed);
    return;
  }
  for (const auto& [r, end] : appended) {
    if (r->hw >= end) continue;
    ++call->pending;
    auto w = std::make_shared<ProduceWait>();
    w->end_offset = end;
    w->done = [call, finish](Errc code) {
      if (code != Errc::Ok) return (*finish)(code, false);
      if (--call->pending == 0) (*finish)(Errc::Ok, true);
    };
    r->waiters.push_back(std::move(w));
  }
  if (call->pending == 0) {
    (*finish)(Errc::Ok, true);
    return;
  }
  call->timer = exec_.schedule_after_ms(req.timeout_ms, guarded([finish] { (*finish)(Errc::RequestTimeout, false); }));
}

// ---- fetch ----

bool BrokerNode::fetch_ready(const Replica& r, const ParkedFetch& pf) const {
  const auto& q = pf.request;
  if (q.replica_id < 0) return q.from_offset < r.hw;
  if (!r.leading) return true;
  if (q.from_offset < r.log->next_offset()) return true;
  auto it = r.followers.find(q.replica_id);
  return it == r.followers.end() || it->second.last_hw_sent != r.hw;
}

void BrokerNode::wake_fetches(Replica& r) {
  if (r.parked.empty()) return;
  std::vector<std::shared_ptr<ParkedFetch>> keep, ready;
  for (auto& pf : r.parked) (fetch_ready(r, *pf) ? ready : keep).push_back(pf);
  r.parked = std::move(keep);
  for (auto& pf : ready) {
    exec_.cancel(pf->timer);
    serve_fetch(r, pf);
  }
}

void BrokerNode::serve_fetch(Replica& r, const std::shared_ptr<ParkedFetch>& pf) {
  const auto& q = pf->request;
  auto respond = [&](Frame resp, Errc code) {
    if (pf->client) finish_request(Origin::Client, false, q.topic, q.partition, code, pf->started_us);
    pf->reply(std::move(resp));
  };
  if (q.replica_id >= 0 && !r.leading) return respond(not_leader(pf->correlation_id, r.id), Errc::NotLeader);
  const auto leo = r.log->next_offset();
  const auto earliest = r.log->earliest_offset();
  if (q.from_offset < earliest || q.from_offset > leo) {
    return respond(response_frame(pf->correlation_id, Errc::OffsetOutOfRange,
                                  "offset " + std::to_string(q.from_offset) + " outside [" + std::to_string(earliest) +
                                      ", " + std::to_string(leo) + "]",
                                  protocol::encode(protocol::RangeHint{earliest, leo})),
                   Errc::OffsetOutOfRange);
  }
  protocol::FetchResponse resp;
  resp.high_watermark = r.hw;
  resp.earliest_offset = earliest;
  resp.next_offset = leo;
  resp.leader_epoch = r.epoch;
  resp.base_offset = q.from_offset;
  const auto limit = q.replica_id < 0 ? r.hw : leo;
  if (q.from_offset < limit) {
    try {
      auto records = r.log->read(q.from_offset, std::max<std::uint32_t>(q.max_bytes, 1), limit);
      std::uint64_t bytes = 0;
      for (const auto& rec : records) {
        record_format::append(resp.records, rec);
        bytes += rec.value.size() + (rec.key ? rec.key->size() : 0);
      }
      if (q.replica_id < 0) stats_.count_out(q.topic, records.size(), bytes);
    } catch (const OffsetOutOfRangeError& e) {
      return respond(response_frame(pf->correlation_id, Errc::OffsetOutOfRange, e.what(),
                                    protocol::encode(protocol::RangeHint{e.earliest_offset(), e.next_offset()})),
                     Errc::OffsetOutOfRange);
    } catch (const Error& e) {
      return respond(response_frame(pf->correlation_id, e.code(), e.what()), e.code());
    }
  }
  if (q.replica_id >= 0) {
    if (auto it = r.followers.find(q.replica_id); it != r.followers.end()) it->second.last_hw_sent = r.hw;
  }
  respond(response_frame(pf->correlation_id, Errc::Ok, {}, protocol::encode(resp)), Errc::Ok);
}

void BrokerNode::on_fetch(const Frame& f, ReplyFn reply, Origin origin) {
  const auto started = exec_.now_us();
  auto q = protocol::decode_fetch_request(f.payload);
  const bool consumer = q.replica_id < 0;
  const bool counted = consumer && origin == Origin::Client;
  const PartitionId pid{q.topic, q.partition};
  auto fail = [&](Frame resp, Errc code) {
    if (counted) finish_request(origin, false, q.topic, q.partition, code, started);
    reply(std::move(resp));
  };

  auto meta = registry_->find(q.topic);
  if (!meta || q.partition >= meta->config.partition_count) {
    return fail(response_frame(f.correlation_id, Errc::UnknownTopicOrPartition, "unknown topic or partition " + pid.str()),
                Errc::UnknownTopicOrPartition);
  }
  auto* r = replica(pid);
  if (!ready_ || !r) return fail(not_leader(f.correlation_id, pid), Errc::NotLeader);

  if (!consumer) {
    if (!r->leading) return fail(not_leader(f.correlation_id, pid), Errc::NotLeader);
    if (q.leader_epoch < r->epoch) {
      return fail(response_frame(f.correlation_id, Errc::FencedEpoch,
                                 "leader epoch " + std::to_string(q.leader_epoch) + " is older than " +
                                     std::to_string(r->epoch)),
                  Errc::FencedEpoch);
    }
    if (q.leader_epoch > r->epoch) {
      pull_metadata(q.replica_id);
      return fail(not_leader(f.correlation_id, pid), Errc::NotLeader);
    }
    const auto leo = r->log->next_offset();
    if (auto it = r->followers.find(q.replica_id); it != r->followers.end() && q.from_offset <= leo) {
      it->second.leo = q.from_offset;
      if (q.from_offset == leo) {
        it->second.last_caught_up_ms = exec_.now_ms();
        it->second.reached_end = true;
      }
      advance_hw(*r);
    }
  } else {
    const bool offline = meta->partitions[q.partition].leader == kNoLeader;
    if (!r->leading && !offline) return fail(not_leader(f.correlation_id, pid), Errc::NotLeader);
  }

  auto pf = std::make_shared<ParkedFetch>();
  pf->request = q;
  pf->reply = std::move(reply);
  pf->started_us = started;
  pf->client = counted;
  pf->correlation_id = f.correlation_id;
  const auto wait = std::min(q.wait_ms, kMaxFetchWaitMs);
  const bool in_range = q.from_offset >= r->log->earliest_offset() && q.from_offset <= r->log->next_offset();
  if (wait > 0 && in_range && !fetch_ready(*r, *pf)) {
    pf->timer = exec_.schedule_after_ms(wait, guarded([this, pid, pf] {
      auto* rr = replica(pid);
      if (!rr) return;
      auto it = std::find(rr->parked.begin(), rr->parked.end(), pf);
      if (it == rr->parked.end()) return;
      rr->parked.erase(it);
      serve_fetch(*rr, pf);
    }));
    r->parked.push_back(pf);
    return;
  }
  serve_fetch(*r, pf);
}

// ---- follower side ----

void BrokerNode::schedule_follower_fetch(Replica& r, std::int64_t delay_ms) {
  r.fetching = true;
  const auto gen = r.fetch_generation;
  const auto pid = r.id;
  exec_.schedule_after_ms(delay_ms, guarded([this, pid, gen] {
    auto* rr = replica(pid);
    if (!rr || rr->fetch_generation != gen) return;
    follower_fetch(*rr);
  }));
}

void BrokerNode::follower_fetch(Replica& r) {
  const auto* p = peer(r.leader);
  if (!running_ || r.leading || r.leader == kNoLeader || !p) {
    r.fetching = false;
    return;
  }
  const auto gen = r.fetch_generation;
  const auto pid = r.id;
  const auto leader = r.leader;
  protocol::FetchRequest q{pid.topic,      pid.index, r.log->next_offset(), config_.replica_fetch_max_bytes,
                           config_.replica_fetch_wait_ms, id(), r.epoch};
  peers_.call(p->peer_address, protocol::request_frame(MsgType::Fetch, protocol::encode(q)),
              config_.replica_fetch_wait_ms + 2000, guarded([this, pid, gen, leader](CallResult res) {
                auto* rr = replica(pid);
                if (!rr || rr->fetch_generation != gen) return;
                const auto resp = to_response(res);
                std::int64_t delay = 0;
                try {
                  switch (resp.status) {
                    case Errc::Ok: {
                      auto fr = protocol::decode_fetch_response(resp.body);
                      if (fr.base_offset == rr->log->next_offset() && !fr.records.empty()) {
                        auto records = fr.decode_records();
                        std::vector<LogEntry> entries;
                        entries.reserve(records.size());
                        for (auto& rec : records) {
                          entries.push_back(LogEntry{std::move(rec.key), std::move(rec.value), rec.timestamp_ms});
                        }
                        rr->log->append(entries);
                      }
                      rr->hw = std::max(rr->hw, std::min<std::uint64_t>(fr.high_watermark, rr->log->next_offset()));
                      break;
                    }
                    case Errc::OffsetOutOfRange: {
                      auto h = protocol::decode_range(resp.body);
                      const auto leo = rr->log->next_offset();
                      if (leo > h.next_offset) {
                        if (h.next_offset < rr->log->earliest_offset()) {
                          rr->log->reset(h.next_offset);
                        } else {
                          rr->log->truncate_to(h.next_offset);
                        }
                        rr->hw = std::min(rr->hw, rr->log->next_offset());
                      } else if (leo < h.earliest_offset) {
                        rr->log->reset(h.earliest_offset);
                        rr->hw = h.earliest_offset;
                      } else {
                        delay = 100;
                      }
                      break;
                    }
                    case Errc::FencedEpoch:
                    case Errc::NotLeader:
                      pull_metadata(leader);
                      delay = config_.heartbeat_interval_ms / 2;
                      break;
                    default:
                      delay = 100;
                      break;
                  }
                } catch (const std::exception&) {
                  delay = 100;
                }
                schedule_follower_fetch(*rr, delay);
              }));
}

// ---- cluster membership ----

const PeerConfig* BrokerNode::peer(BrokerId id) const {
  for (const auto& p : config_.peers) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

std::string BrokerNode::client_address_of(BrokerId bid) const {
  if (bid == id()) return config_.client_listen;
  const auto* p = peer(bid);
  return p ? p->client_address : std::string{};
}

bool BrokerNode::live(BrokerId bid) const {
  if (bid == id()) return true;
  auto it = last_heard_ms_.find(bid);
  if (it == last_heard_ms_.end()) return false;
  return exec_.now_ms() - it->second <= 3 * static_cast<std::int64_t>(config_.heartbeat_interval_ms);
}

std::vector<BrokerId> BrokerNode::live_brokers() const {
  std::vector<BrokerId> out;
  for (auto b : config_.cluster()) {
    if (live(b)) out.push_back(b);
  }
  return out;
}

std::optional<BrokerId> BrokerNode::controller() const {
  for (auto b : config_.cluster()) {
    if (live(b)) return b;
  }
  return std::nullopt;
}

bool BrokerNode::is_controller() const {
  if (!running_ || !ready_ || controller() != id()) return false;
  // From three brokers up, a minority side of a partition never takes decisions.
  const auto n = config_.cluster().size();
  return n < 3 || live_brokers().size() * 2 > n;
}

void BrokerNode::note_peer(BrokerId bid, std::uint64_t version) {
  last_heard_ms_[bid] = exec_.now_ms();
  peer_version_[bid] = version;
  if (version > registry_->version()) pull_metadata(bid);
}

void BrokerNode::pull_metadata(BrokerId from) {
  const auto* p = peer(from);
  if (!p || !pulls_in_flight_.insert(from).second) return;
  protocol::MetadataRequest m;
  m.kind = protocol::MetadataKind::Get;
  peers_.call(p->peer_address, protocol::request_frame(MsgType::Metadata, protocol::encode(m)),
              2 * config_.heartbeat_interval_ms, guarded([this, from](CallResult res) {
                pulls_in_flight_.erase(from);
                const auto resp = to_response(res);
                if (!resp.ok()) return;
                json j = json::parse(to_string(resp.body), nullptr, false);
                if (j.is_discarded()) return;
                try {
                  const bool changed = registry_->adopt(j);
                  if (changed || !ready_) {
                    ready_ = true;
                    reconcile();
                  }
                } catch (const std::exception&) {
                }
              }));
}

void BrokerNode::heartbeat_tick() {
  const auto now = exec_.now_ms();
  if (!ready_ && now - started_ms_ >= 3 * static_cast<std::int64_t>(config_.heartbeat_interval_ms)) {
    ready_ = true;
    reconcile();
  }
  const auto ctrl = controller();
  for (const auto& p : config_.peers) {
    protocol::Heartbeat hb{id(), registry_->version(), {}};
    if (ctrl == p.id) {
      for (const auto& [pid, r] : replicas_) {
        if (r->leading && r->proposed_isr) hb.proposals.push_back({pid.topic, pid.index, r->epoch, *r->proposed_isr});
      }
    }
    peers_.call(p.peer_address, protocol::request_frame(MsgType::Heartbeat, protocol::encode(hb)),
                config_.heartbeat_interval_ms, guarded([this, peer_id = p.id](CallResult res) {
                  const auto resp = to_response(res);
                  if (!resp.ok()) return;
                  protocol::Heartbeat reply;
                  try {
                    reply = protocol::decode_heartbeat(resp.body);
                  } catch (const Error&) {
                    return;
                  }
                  note_peer(peer_id, reply.metadata_version);
                  for (const auto& pr : reply.proposals) {
                    auto* r = replica({pr.topic, pr.partition});
                    if (!r || !r->leading || r->epoch != pr.leader_epoch) continue;
                    r->isr = pr.isr;
                    if (r->proposed_isr == pr.isr) r->proposed_isr.reset();
                    advance_hw(*r);
                  }
                  if (!ready_ && reply.metadata_version <= registry_->version()) {
                    ready_ = true;
                    reconcile();
                  }
                }));
  }
  controller_duties();
}

void BrokerNode::on_heartbeat(const Frame& f, ReplyFn reply) {
  auto hb = protocol::decode_heartbeat(f.payload);
  note_peer(hb.broker_id, hb.metadata_version);
  protocol::Heartbeat out{id(), 0, {}};
  if (is_controller()) {
    for (const auto& pr : hb.proposals) {
      auto meta = registry_->find(pr.topic);
      if (!meta || pr.partition >= meta->partitions.size()) continue;
      auto m = meta->partitions[pr.partition];
      if (m.leader != hb.broker_id || m.leader_epoch != pr.leader_epoch || !contains(pr.isr, m.leader)) continue;
      const bool subset = std::all_of(pr.isr.begin(), pr.isr.end(), [&](BrokerId b) { return contains(m.replicas, b); });
      if (!subset) continue;
      if (m.isr != pr.isr) {
        m.isr = pr.isr;
        registry_->set_partition({pr.topic, pr.partition}, m);
      }
      out.proposals.push_back(pr);
    }
  }
  if (!ready_ && hb.metadata_version <= registry_->version()) {
    ready_ = true;
    reconcile();
  }
  out.metadata_version = registry_->version();
  reply(response_frame(f.correlation_id, Errc::Ok, {}, protocol::encode(out)));
}

void BrokerNode::controller_duties() {
  if (!is_controller()) return;
  const auto v = registry_->version();
  for (const auto& [b, pv] : peer_version_) {
    if (live(b) && pv > v) return;  // catch up before deciding anything
  }
  for (const auto& t : registry_->all()) {
    for (std::uint32_t p = 0; p < t.partitions.size(); ++p) {
      const auto& m = t.partitions[p];
      if (m.leader != kNoLeader && live(m.leader)) continue;
      std::optional<BrokerId> next;
      for (auto b : m.replicas) {
        if (contains(m.isr, b) && live(b)) {
          next = b;
          break;
        }
      }
      if (m.leader == kNoLeader && !next) continue;
      PartitionMeta nm = m;
      nm.leader_epoch = m.leader_epoch + 1;
      if (next) {
        nm.leader = *next;
        nm.isr.clear();
        for (auto b : m.replicas) {
          if (b == *next || (contains(m.isr, b) && live(b))) nm.isr.push_back(b);
        }
      } else {
        // Offline; the old isr is kept so a returning member can be elected.
        nm.leader = kNoLeader;
      }
      const PartitionId pid{t.config.name, p};
      apply_partition_change(pid, nm);
      broadcast_decree(pid, nm);
    }
  }
}

void BrokerNode::apply_partition_change(const PartitionId& p, const PartitionMeta& meta) {
  registry_->set_partition(p, meta);
  reconcile();
}

void BrokerNode::broadcast_decree(const PartitionId& p, const PartitionMeta& meta) {
  protocol::FailoverDecree d{p.topic, p.index, meta.leader, meta.leader_epoch, meta.isr, registry_->snapshot().dump()};
  const auto payload = protocol::encode(d);
  for (const auto& peer : config_.peers) {
    if (!live(peer.id)) continue;
    peers_.call(peer.peer_address, protocol::request_frame(MsgType::FailoverDecree, payload),
                config_.heartbeat_interval_ms, [](CallResult) {});
  }
}

void BrokerNode::push_snapshot() {
  protocol::MetadataRequest m;
  m.kind = protocol::MetadataKind::Push;
  m.json = registry_->snapshot().dump();
  const auto payload = protocol::encode(m);
  for (const auto& peer : config_.peers) {
    peers_.call(peer.peer_address, protocol::request_frame(MsgType::Metadata, payload), config_.heartbeat_interval_ms,
                [](CallResult) {});
  }
}

void BrokerNode::on_decree(const Frame& f, ReplyFn reply) {
  auto d = protocol::decode_failover_decree(f.payload);
  json j = json::parse(d.snapshot, nullptr, false);
  if (j.is_discarded()) throw Error(Errc::Malformed, "decree snapshot is not JSON");
  registry_->adopt(j);
  ready_ = true;
  reconcile();
  reply(response_frame(f.correlation_id, Errc::Ok));
}

// ---- metadata ----

json BrokerNode::metadata_json() const {
  auto j = registry_->snapshot();
  j["broker_id"] = id();
  const auto c = controller();
  j["controller"] = c ? *c : kNoLeader;
  json brokers = json::array();
  brokers.push_back({{"id", id()},
                     {"client_address", config_.client_listen},
                     {"peer_address", config_.peer_listen},
                     {"live", true}});
  for (const auto& p : config_.peers) {
    brokers.push_back(
        {{"id", p.id}, {"client_address", p.client_address}, {"peer_address", p.peer_address}, {"live", live(p.id)}});
  }
  j["brokers"] = brokers;
  return j;
}

json BrokerNode::stats_json(const json& query) const {
  auto j = stats_.to_json(query);
  const std::string topic = query.is_object() ? query.value("topic", std::string{}) : std::string{};
  j["broker_id"] = id();
  j["metadata_version"] = registry_ ? registry_->version() : 0;
  json parts = json::array();
  for (const auto& [pid, r] : replicas_) {
    if (!topic.empty() && pid.topic != topic) continue;
    parts.push_back({{"topic", pid.topic},
                     {"partition", pid.index},
                     {"leader", r->leading},
                     {"leader_epoch", r->epoch},
                     {"high_watermark", r->hw},
                     {"earliest_offset", r->log->earliest_offset()},
                     {"next_offset", r->log->next_offset()},
                     {"isr", r->isr}});
  }
  j["partitions"] = parts;
  return j;
}

void BrokerNode::on_metadata(const Frame& f, ReplyFn reply, Origin origin) {
  auto m = protocol::decode_metadata_request(f.payload);
  const auto corr = f.correlation_id;
  switch (m.kind) {
    case protocol::MetadataKind::Get:
      reply(response_frame(corr, Errc::Ok, {}, to_bytes(metadata_json().dump())));
      return;
    case protocol::MetadataKind::Stats: {
      json q = m.json.empty() ? json::object() : json::parse(m.json, nullptr, false);
      if (q.is_discarded()) throw Error(Errc::Malformed, "stats query is not JSON");
      reply(response_frame(corr, Errc::Ok, {}, to_bytes(stats_json(q).dump())));
      return;
    }
    case protocol::MetadataKind::Push: {
      json j = json::parse(m.json, nullptr, false);
      if (j.is_discarded()) throw Error(Errc::Malformed, "metadata snapshot is not JSON");
      if (registry_->adopt(j) || !ready_) {
        ready_ = true;
        reconcile();
      }
      reply(response_frame(corr, Errc::Ok));
      return;
    }
    case protocol::MetadataKind::CreateTopic:
      break;
  }
  if (!ready_) throw Error(Errc::Unavailable, "broker is still loading cluster metadata");
  if (is_controller()) {
    const auto ids = config_.cluster();
    auto meta = registry_->create_topic(m.create, ids);
    reconcile();
    push_snapshot();
    reply(response_frame(corr, Errc::Ok, {}, to_bytes(to_json(meta).dump())));
    return;
  }
  const auto ctrl = controller();
  const auto* p = ctrl ? peer(*ctrl) : nullptr;
  if (!p || origin == Origin::Peer) throw Error(Errc::Unavailable, "no reachable controller");
  peers_.call(p->peer_address, protocol::request_frame(MsgType::Metadata, f.payload), 2 * config_.heartbeat_interval_ms,
              [reply, corr](CallResult res) {
                auto resp = to_response(res);
                reply(response_frame(corr, resp.status, resp.message, resp.body));
              });
}

// ---- checkpoint / periodic ----

void BrokerNode::isr_tick() {
  const auto now = exec_.now_ms();
  for (auto& [pid, r] : replicas_) {
    if (!r->leading) continue;
    auto meta = registry_->find(pid.topic);
    if (!meta) continue;
    const auto& m = meta->partitions[pid.index];
    if (m.leader != id() || m.leader_epoch != r->epoch) continue;
    std::vector<BrokerId> desired;
    for (auto f : m.replicas) {
      if (f == id()) {
        desired.push_back(f);
        continue;
      }
      auto it = r->followers.find(f);
      if (it == r->followers.end()) continue;
      const bool recent = now - it->second.last_caught_up_ms <= static_cast<std::int64_t>(config_.max_lag_ms);
      if (contains(r->isr, f) ? recent : (recent && it->second.reached_end)) desired.push_back(f);
    }
    if (desired == r->isr) {
      r->proposed_isr.reset();
      continue;
    }
    if (is_controller()) {
      PartitionMeta nm = m;
      nm.isr = desired;
      r->isr = desired;
      r->proposed_isr.reset();
      registry_->set_partition(pid, nm);
    } else {
      r->proposed_isr = desired;
    }
    advance_hw(*r);
  }
}

void BrokerNode::retention_tick() {
  const auto now = exec_.now_ms();
  for (auto& [_, r] : replicas_) {
    try {
      r->log->enforce_retention(now);
    } catch (const std::exception&) {
      // retried next cycle
    }
    r->hw = std::max(r->hw, std::min(r->log->earliest_offset(), r->log->next_offset()));
  }
}

void BrokerNode::checkpoint_tick() { save_checkpoint(); }

void BrokerNode::save_checkpoint() {
  if (!registry_) return;
  json j = json::object();
  for (const auto& [pid, r] : replicas_) {
    if (!r->epoch_known) continue;
    j[pid.str()] = {{"hw", r->hw}, {"epoch", r->epoch}};
  }
  atomic_write_file(config_.data_dir / "replication-checkpoint.json", j.dump(), config_.log.fsync);
}

void BrokerNode::load_checkpoint() {
  checkpoint_.clear();
  const auto path = config_.data_dir / "replication-checkpoint.json";
  if (!std::filesystem::exists(path)) return;
  json j = json::parse(read_file(path), nullptr, false);
  if (!j.is_object()) return;  // a damaged checkpoint only costs extra re-replication
  for (const auto& [k, v] : j.items()) {
    if (!v.is_object()) continue;
    checkpoint_[k] = {v.value("hw", std::uint64_t{0}), v.value("epoch", std::uint32_t{0})};
  }
}

}  // namespace cloudlet
