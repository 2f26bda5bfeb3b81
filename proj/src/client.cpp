#include "cloudlet/client.hpp"

#include <algorithm>
#include <set>

namespace cloudlet {

using nlohmann::json;
using protocol::MsgType;

bool retryable(Errc code) {
  switch (code) {
    case Errc::NotLeader:
    case Errc::Unavailable:
    case Errc::RequestTimeout:
    case Errc::NoViableLeader:
    case Errc::FencedEpoch:
      return true;
    default:
      return false;
  }
}

ClusterView ClusterView::from_json(const json& j) {
  ClusterView v;
  v.version = j.at("version").get<std::uint64_t>();
  v.controller = j.value("controller", kNoLeader);
  for (const auto& t : j.at("topics")) {
    auto meta = topic_from_json(t);
    v.topics.emplace(meta.config.name, std::move(meta));
  }
  for (const auto& b : j.value("brokers", json::array())) {
    v.client_addresses[b.at("id").get<BrokerId>()] = b.value("client_address", std::string{});
  }
  return v;
}

std::string ClusterView::leader_address(const std::string& topic, std::uint32_t partition) const {
  auto it = topics.find(topic);
  if (it == topics.end() || partition >= it->second.partitions.size()) return {};
  const auto& p = it->second.partitions[partition];
  BrokerId target = p.leader;
  if (target == kNoLeader) {
    // Offline partition: any surviving replica still serves committed reads.
    if (p.replicas.empty()) return {};
    target = p.replicas.front();
  }
  auto a = client_addresses.find(target);
  return a == client_addresses.end() ? std::string{} : a->second;
}

BrokerClient::BrokerClient(Executor& exec, Transport& transport, std::vector<std::string> bootstrap,
                           ClientOptions options)
    : exec_(exec), transport_(transport), bootstrap_(std::move(bootstrap)), options_(options) {}

std::vector<std::string> BrokerClient::broker_addresses() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& [_, a] : view_.client_addresses) {
    if (!a.empty() && seen.insert(a).second) out.push_back(a);
  }
  for (const auto& a : bootstrap_) {
    if (seen.insert(a).second) out.push_back(a);
  }
  return out;
}

void BrokerClient::refresh_metadata(std::function<void(Errc)> done) {
  std::vector<std::string> candidates;
  std::set<std::string> seen;
  for (const auto& a : bootstrap_) {
    if (seen.insert(a).second) candidates.push_back(a);
  }
  for (const auto& [_, a] : view_.client_addresses) {
    if (!a.empty() && seen.insert(a).second) candidates.push_back(a);
  }
  refresh_from(0, std::move(candidates), std::move(done));
}

void BrokerClient::refresh_from(std::size_t index, std::vector<std::string> candidates,
                                std::function<void(Errc)> done) {
  if (index >= candidates.size()) {
    done(Errc::Unavailable);
    return;
  }
  protocol::MetadataRequest m;
  m.kind = protocol::MetadataKind::Get;
  const auto address = candidates[index];
  transport_.call(address, protocol::request_frame(MsgType::Metadata, protocol::encode(m)), options_.request_timeout_ms,
                  [this, index, candidates = std::move(candidates), done = std::move(done)](CallResult res) mutable {
                    auto resp = to_response(res);
                    if (resp.ok()) {
                      json j = json::parse(to_string(resp.body), nullptr, false);
                      if (!j.is_discarded()) {
                        try {
                          auto v = ClusterView::from_json(j);
                          // Brokers that just restarted may serve an older view; keep the newest.
                          if (v.version >= view_.version || view_.topics.empty()) view_ = std::move(v);
                          last_refresh_ms_ = exec_.now_ms();
                          done(Errc::Ok);
                          return;
                        } catch (const std::exception&) {
                        }
                      }
                    }
                    refresh_from(index + 1, std::move(candidates), std::move(done));
                  });
}

void BrokerClient::with_topic(const std::string& topic, std::function<void(Errc)> done) {
  if (view_.topics.contains(topic)) {
    done(Errc::Ok);
    return;
  }
  refresh_metadata([this, topic, done = std::move(done)](Errc code) {
    if (code != Errc::Ok) return done(code);
    done(view_.topics.contains(topic) ? Errc::Ok : Errc::UnknownTopic);
  });
}

struct BrokerClient::ProduceOp {
  std::string topic;
  std::vector<LogEntry> entries;
  std::vector<std::uint32_t> partition_of;
  std::vector<bool> done_entry;
  protocol::AckMode ack;
  std::function<void(ProduceResult)> done;
  ProduceResult result;
  std::uint32_t attempt = 0;
};

void BrokerClient::produce(const std::string& topic, std::optional<std::uint32_t> partition,
                           std::vector<LogEntry> entries, protocol::AckMode ack,
                           std::function<void(ProduceResult)> done) {
  auto op = std::make_shared<ProduceOp>();
  op->topic = topic;
  op->entries = std::move(entries);
  op->ack = ack;
  op->done = std::move(done);
  with_topic(topic, [this, op, partition](Errc code) {
    if (code != Errc::Ok) {
      op->result.status = code;
      op->result.message = code == Errc::UnknownTopic ? "unknown topic '" + op->topic + "'" : "no broker reachable";
      return op->done(op->result);
    }
    const auto count = view_.topics.at(op->topic).config.partition_count;
    if (partition && *partition >= count) {
      op->result.status = Errc::UnknownTopicOrPartition;
      op->result.message = "unknown partition " + std::to_string(*partition);
      return op->done(op->result);
    }
    for (const auto& e : op->entries) {
      op->partition_of.push_back(partition ? *partition : partition_for_key(e.key, count, round_robin_++));
    }
    op->done_entry.assign(op->entries.size(), false);
    op->result.offsets.resize(op->entries.size());
    op->result.committed = true;
    produce_attempt(op);
  });
}

void BrokerClient::produce_attempt(std::shared_ptr<ProduceOp> op) {
  ++op->attempt;
  op->result.attempts = op->attempt;
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < op->entries.size(); ++i) {
    if (!op->done_entry[i]) groups[op->partition_of[i]].push_back(i);
  }
  struct Round {
    std::size_t pending = 0;
    Errc failure = Errc::Ok;
    std::string message;
  };
  if (groups.empty()) {
    op->done(op->result);
    return;
  }
  auto round = std::make_shared<Round>();
  round->pending = groups.size();

  auto finish_group = [this, op, round](Errc code, std::string message) {
    if (code != Errc::Ok && round->failure == Errc::Ok) {
      round->failure = code;
      round->message = std::move(message);
    }
    if (--round->pending > 0) return;
    if (round->failure == Errc::Ok) {
      op->result.status = Errc::Ok;
      op->result.message.clear();
      return op->done(op->result);
    }
    if (retryable(round->failure) && op->attempt < options_.attempts) {
      exec_.schedule_after_ms(options_.retry_backoff_ms * op->attempt, [this, op] {
        refresh_metadata([this, op](Errc) { produce_attempt(op); });
      });
      return;
    }
    op->result.status = round->failure;
    op->result.message = round->message;
    op->done(op->result);
  };

  for (auto& [p, idx] : groups) {
    const auto& pm = view_.topics.at(op->topic).partitions.at(p);
    if (pm.leader == kNoLeader) {
      exec_.post([finish_group] { finish_group(Errc::NoViableLeader, "partition has no live in-sync replica"); });
      continue;
    }
    const auto address = view_.leader_address(op->topic, p);
    if (address.empty()) {
      exec_.post([finish_group] { finish_group(Errc::Unavailable, "no known leader"); });
      continue;
    }
    protocol::ProduceRequest req;
    req.topic = op->topic;
    req.partition = static_cast<std::int32_t>(p);
    req.ack = op->ack;
    req.timeout_ms = options_.request_timeout_ms;
    for (auto i : idx) req.entries.push_back(op->entries[i]);
    transport_.call(address, protocol::request_frame(MsgType::Produce, protocol::encode(req)),
                    options_.request_timeout_ms + 1000, [op, idx, finish_group](CallResult res) {
                      auto resp = to_response(res);
                      if (!resp.ok()) return finish_group(resp.status, resp.message);
                      protocol::ProduceResponse pr;
                      try {
                        pr = protocol::decode_produce_response(resp.body);
                      } catch (const Error& e) {
                        return finish_group(Errc::Malformed, e.what());
                      }
                      if (pr.offsets.size() != idx.size()) return finish_group(Errc::Malformed, "offset count mismatch");
                      for (std::size_t k = 0; k < idx.size(); ++k) {
                        op->result.offsets[idx[k]] = pr.offsets[k];
                        op->done_entry[idx[k]] = true;
                      }
                      op->result.committed = op->result.committed && pr.committed;
                      finish_group(Errc::Ok, {});
                    });
  }
}

void BrokerClient::fetch(const std::string& topic, std::uint32_t partition, std::uint64_t offset,
                         std::uint32_t max_bytes, std::uint32_t wait_ms, std::function<void(FetchResult)> done) {
  with_topic(topic, [this, topic, partition, offset, max_bytes, wait_ms, done = std::move(done)](Errc code) mutable {
    if (code != Errc::Ok) {
      FetchResult r;
      r.status = code == Errc::UnknownTopic ? Errc::UnknownTopicOrPartition : code;
      r.message = code == Errc::UnknownTopic ? "unknown topic '" + topic + "'" : "no broker reachable";
      return done(std::move(r));
    }
    fetch_attempt(topic, partition, offset, max_bytes, wait_ms, 1, std::move(done));
  });
}

void BrokerClient::fetch_attempt(std::string topic, std::uint32_t partition, std::uint64_t offset,
                                 std::uint32_t max_bytes, std::uint32_t wait_ms, std::uint32_t attempt,
                                 std::function<void(FetchResult)> done) {
  auto retry_or_fail = [this, topic, partition, offset, max_bytes, wait_ms, attempt, done](Errc code,
                                                                                           std::string message) {
    if (retryable(code) && attempt < options_.attempts) {
      exec_.schedule_after_ms(options_.retry_backoff_ms * attempt, [=, this] {
        refresh_metadata([=, this](Errc) { fetch_attempt(topic, partition, offset, max_bytes, wait_ms, attempt + 1, done); });
      });
      return;
    }
    FetchResult r;
    r.status = code;
    r.message = std::move(message);
    done(std::move(r));
  };
  const auto& t = view_.topics.find(topic);
  if (t != view_.topics.end() && partition >= t->second.config.partition_count) {
    FetchResult r;
    r.status = Errc::UnknownTopicOrPartition;
    r.message = "unknown partition " + topic + "-" + std::to_string(partition);
    return done(std::move(r));
  }
  const auto address = view_.leader_address(topic, partition);
  if (address.empty()) return retry_or_fail(Errc::Unavailable, "no known leader");
  protocol::FetchRequest q{topic, partition, offset, max_bytes, wait_ms, -1, 0};
  transport_.call(address, protocol::request_frame(MsgType::Fetch, protocol::encode(q)),
                  wait_ms + options_.request_timeout_ms, [retry_or_fail, done](CallResult res) {
                    auto resp = to_response(res);
                    FetchResult r;
                    r.status = resp.status;
                    r.message = resp.message;
                    try {
                      if (resp.status == Errc::OffsetOutOfRange) {
                        auto h = protocol::decode_range(resp.body);
                        r.earliest_offset = h.earliest_offset;
                        r.next_offset = h.next_offset;
                        return done(std::move(r));
                      }
                      if (!resp.ok()) return retry_or_fail(resp.status, resp.message);
                      auto fr = protocol::decode_fetch_response(resp.body);
                      r.high_watermark = fr.high_watermark;
                      r.earliest_offset = fr.earliest_offset;
                      r.next_offset = fr.next_offset;
                      r.records = fr.decode_records();
                    } catch (const Error& e) {
                      r.status = e.code();
                      r.message = e.what();
                    }
                    done(std::move(r));
                  });
}

void BrokerClient::create_topic(const TopicConfig& config, std::function<void(JsonResult)> done) {
  protocol::MetadataRequest m;
  m.kind = protocol::MetadataKind::CreateTopic;
  m.create = config;
  create_from(0, broker_addresses(), protocol::encode(m), std::move(done));
}

void BrokerClient::create_from(std::size_t index, std::vector<std::string> candidates, Bytes payload,
                               std::function<void(JsonResult)> done) {
  if (index >= candidates.size()) {
    JsonResult r;
    r.status = Errc::Unavailable;
    r.message = "no broker reachable";
    return done(std::move(r));
  }
  const auto address = candidates[index];
  transport_.call(address, protocol::request_frame(MsgType::Metadata, payload), options_.request_timeout_ms,
                  [this, index, candidates = std::move(candidates), payload, done = std::move(done)](
                      CallResult res) mutable {
                    auto resp = to_response(res);
                    if (resp.status == Errc::Unavailable || resp.status == Errc::RequestTimeout) {
                      return create_from(index + 1, std::move(candidates), std::move(payload), std::move(done));
                    }
                    JsonResult r;
                    r.status = resp.status;
                    r.message = resp.message;
                    if (resp.ok()) r.body = json::parse(to_string(resp.body), nullptr, false);
                    refresh_metadata([done = std::move(done), r = std::move(r)](Errc) { done(r); });
                  });
}

void BrokerClient::stats(const std::string& address, const json& query, std::function<void(JsonResult)> done) {
  protocol::MetadataRequest m;
  m.kind = protocol::MetadataKind::Stats;
  m.json = query.is_null() ? std::string{} : query.dump();
  transport_.call(address, protocol::request_frame(MsgType::Metadata, protocol::encode(m)), options_.request_timeout_ms,
                  [done = std::move(done)](CallResult res) {
                    auto resp = to_response(res);
                    JsonResult r;
                    r.status = resp.status;
                    r.message = resp.message;
                    if (resp.ok()) {
                      r.body = json::parse(to_string(resp.body), nullptr, false);
                      if (r.body.is_discarded()) {
                        r.status = Errc::Malformed;
                        r.message = "stats reply is not JSON";
                      }
                    }
                    done(std::move(r));
                  });
}

}  // namespace cloudlet
