#include <gtest/gtest.h>

#include <random>
#include <set>

#include "cloudlet/broker.hpp"
#include "cloudlet/checksum.hpp"
#include "sim_cluster.hpp"

using namespace cloudlet;
using cloudlet::testing::entry;
using cloudlet::testing::SimCluster;
using cloudlet::testing::text;
using protocol::AckMode;

namespace {

std::vector<LogEntry> numbered(int from, int count) {
  std::vector<LogEntry> out;
  for (int i = from; i < from + count; ++i) out.push_back(entry("m" + std::to_string(i)));
  return out;
}

std::vector<Record> all_records(CommitLog& log) {
  std::vector<Record> out;
  auto off = log.earliest_offset();
  while (off < log.next_offset()) {
    auto batch = log.read(off, 1u << 20);
    if (batch.empty()) break;
    off = batch.back().offset + 1;
    for (auto& r : batch) out.push_back(std::move(r));
  }
  return out;
}

protocol::Response raw_call(SimCluster& c, const std::string& address, protocol::Frame f) {
  return c.await<protocol::Response>([&](auto cb) {
    c.client_transport->call(address, std::move(f), 3000, [cb](CallResult r) { cb(to_response(r)); });
  });
}

}  // namespace

TEST(BrokerConfig, JsonRoundTripAndValidation) {
  BrokerConfig c;
  c.broker_id = 2;
  c.data_dir = "/tmp/x";
  c.peers = {PeerConfig{0, "h0:9093", "h0:9092"}, PeerConfig{1, "h1:9093", "h1:9092"}};
  c.max_lag_ms = 1234;
  auto back = BrokerConfig::from_json(c.to_json());
  EXPECT_EQ(back.broker_id, 2);
  EXPECT_EQ(back.max_lag_ms, 1234u);
  EXPECT_EQ(back.cluster(), (std::vector<BrokerId>{0, 1, 2}));
  EXPECT_NO_THROW(back.validate());

  auto dup = c;
  dup.peers.push_back(PeerConfig{2, "x:1", "x:2"});
  EXPECT_THROW(dup.validate(), Error);
  auto zero = c;
  zero.heartbeat_interval_ms = 0;
  EXPECT_THROW(zero.validate(), Error);
}

TEST(Broker, FreshSingleBrokerHasNoTopics) {
  SimCluster c(1);
  c.start_all();
  EXPECT_TRUE(c.broker(0).node().metadata_ready());
  EXPECT_TRUE(c.broker(0).node().registry().list().empty());
  auto view = c.await<Errc>([&](auto cb) { c.client->refresh_metadata(cb); });
  EXPECT_EQ(view, Errc::Ok);
  EXPECT_TRUE(c.client->view().topics.empty());
}

TEST(Broker, ProduceFetchRoundTripAndStats) {
  SimCluster c(1);
  c.start_all();
  ASSERT_TRUE(c.create_topic("events", 2, 1).ok());

  auto p = c.produce("events", 1, numbered(0, 10));
  ASSERT_TRUE(p.ok()) << p.message;
  EXPECT_TRUE(p.committed);
  ASSERT_EQ(p.offsets.size(), 10u);
  for (std::uint32_t i = 0; i < 10; ++i) EXPECT_EQ(p.offsets[i], (protocol::PartitionOffset{1, i}));

  auto f = c.fetch("events", 1, 3);
  ASSERT_TRUE(f.ok()) << f.message;
  EXPECT_EQ(f.high_watermark, 10u);
  ASSERT_EQ(f.records.size(), 7u);
  EXPECT_EQ(f.records.front().offset, 3u);
  EXPECT_EQ(text(f.records.front().value), "m3");

  auto beyond = c.fetch("events", 1, 11);
  EXPECT_EQ(beyond.status, Errc::OffsetOutOfRange);
  EXPECT_EQ(beyond.earliest_offset, 0u);
  EXPECT_EQ(beyond.next_offset, 10u);

  auto& stats = c.broker(0).node().stats();
  EXPECT_EQ(stats.produce_requests(), 1u);
  EXPECT_EQ(stats.fetch_requests(), 2u);
  EXPECT_EQ(stats.histogram_total(), stats.produce_requests() + stats.fetch_requests());
  EXPECT_EQ(stats.connected_clients(), 1u);
  auto j = c.broker(0).node().stats_json({{"topic", "events"}});
  EXPECT_EQ(j["topics"]["events"]["messages_in"], 10);
  EXPECT_EQ(j["topics"]["events"]["messages_out"], 7);
}

TEST(Broker, UnknownTopicAndPartition) {
  SimCluster c(1);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 1).ok());
  EXPECT_EQ(c.produce("nope", 0, numbered(0, 1)).status, Errc::UnknownTopic);
  EXPECT_EQ(c.fetch("t", 5, 0).status, Errc::UnknownTopicOrPartition);
  EXPECT_EQ(c.create_topic("t", 1, 1).status, Errc::TopicExists);
  EXPECT_EQ(c.create_topic("big", 1, 2).status, Errc::InsufficientBrokers);
}

TEST(Broker, SameKeyLandsOnOnePartitionInOrder) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("keyed", 8, 2).ok());
  std::vector<LogEntry> es;
  for (int i = 0; i < 5; ++i) es.push_back(entry("v" + std::to_string(i), std::string("sensor-42")));
  auto p = c.produce("keyed", std::nullopt, es);
  ASSERT_TRUE(p.ok()) << p.message;
  const std::string key = "sensor-42";
  const auto expected = fnv1a32(ByteView(reinterpret_cast<const std::uint8_t*>(key.data()), key.size())) % 8;
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(p.offsets[i].partition, expected);
    EXPECT_EQ(p.offsets[i].offset, i);
  }
  auto f = c.fetch("keyed", expected, 0);
  ASSERT_EQ(f.records.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(text(f.records[i].value), "v" + std::to_string(i));
}

TEST(Broker, UnkeyedEntriesSpreadRoundRobin) {
  SimCluster c(2);
  c.start_all();
  ASSERT_TRUE(c.create_topic("rr", 4, 1).ok());
  auto p = c.produce("rr", std::nullopt, numbered(0, 8));
  ASSERT_TRUE(p.ok());
  std::map<std::uint32_t, int> per;
  for (auto& o : p.offsets) ++per[o.partition];
  EXPECT_EQ(per.size(), 4u);
  for (auto& [_, n] : per) EXPECT_EQ(n, 2);
}

TEST(Broker, FollowerAnswersNotLeaderWithAddress) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 3).ok());
  auto meta = c.meta("t", 0);
  BrokerId follower = meta.replicas[1];
  protocol::ProduceRequest req;
  req.topic = "t";
  req.partition = 0;
  req.entries = numbered(0, 1);
  auto r = raw_call(c, c.broker(follower).config().client_listen,
                    protocol::request_frame(protocol::MsgType::Produce, protocol::encode(req)));
  ASSERT_EQ(r.status, Errc::NotLeader);
  auto hint = protocol::decode_not_leader(r.body);
  EXPECT_EQ(hint.leader, meta.leader);
  EXPECT_EQ(hint.leader_address, c.broker(meta.leader).config().client_listen);
}

TEST(Broker, AllIsrCommitReachesEveryReplica) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 3).ok());
  auto p = c.produce("t", 0, {entry("hello")});
  ASSERT_TRUE(p.ok()) << p.message;
  EXPECT_TRUE(p.committed);
  for (int b = 0; b < 3; ++b) {
    auto* log = c.broker(b).node().log(PartitionId{"t", 0});
    ASSERT_NE(log, nullptr);
    auto recs = all_records(*log);
    ASSERT_EQ(recs.size(), 1u) << "broker " << b;
    EXPECT_EQ(text(recs[0].value), "hello");
  }
  c.run_ms(1000);
  for (int b = 0; b < 3; ++b) EXPECT_EQ(c.broker(b).node().high_watermark(PartitionId{"t", 0}), 1u);
}

TEST(Broker, LaggingFollowerLeavesIsrAndRejoins) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 3).ok());
  ASSERT_TRUE(c.produce("t", 0, numbered(0, 5)).ok());
  auto meta = c.meta("t", 0);
  const BrokerId leader = meta.leader;
  const BrokerId lagger = meta.replicas[2];
  const auto lhost = c.broker(lagger).host();
  for (int b = 0; b < 3; ++b)
    if (b != lagger) c.net.cut(lhost, c.broker(b).host());

  // The write waits for the full ISR until the leader drops the lagging member.
  auto p = c.produce("t", 0, numbered(5, 1));
  ASSERT_TRUE(p.ok()) << p.message;
  auto shrunk = c.meta("t", 0);
  EXPECT_EQ(shrunk.isr.size(), 2u);
  EXPECT_EQ(std::count(shrunk.isr.begin(), shrunk.isr.end(), lagger), 0);
  EXPECT_EQ(shrunk.leader, leader);

  // Writes commit quickly with two members.
  const auto t0 = c.sched.now_us();
  ASSERT_TRUE(c.produce("t", 0, numbered(6, 1)).ok());
  EXPECT_LT(c.sched.now_us() - t0, 500'000);

  for (int b = 0; b < 3; ++b)
    if (b != lagger) c.net.heal(lhost, c.broker(b).host());
  ASSERT_TRUE(c.wait_for([&] { return c.meta("t", 0).isr.size() == 3; }, 20'000));
  auto recs = all_records(*c.broker(lagger).node().log(PartitionId{"t", 0}));
  ASSERT_EQ(recs.size(), 7u);
}

TEST(Broker, LeaderFailoverKeepsCommittedRecords) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 3).ok());
  for (int i = 0; i < 100; i += 10) ASSERT_TRUE(c.produce("t", 0, numbered(i, 10)).ok());
  auto before = c.meta("t", 0);
  c.broker(before.leader).crash();

  ASSERT_TRUE(c.wait_for(
      [&] {
        auto* l = c.leader_of("t", 0);
        return l && l->node().config().broker_id != before.leader;
      },
      10'000));
  auto after = c.meta("t", 0);
  EXPECT_NE(after.leader, before.leader);
  EXPECT_GT(after.leader_epoch, before.leader_epoch);
  EXPECT_EQ(after.replicas, before.replicas);

  std::vector<Record> got;
  std::uint64_t off = 0;
  while (off < 100) {
    auto f = c.fetch("t", 0, off);
    ASSERT_TRUE(f.ok()) << errc_name(f.status) << " " << f.message;
    ASSERT_FALSE(f.records.empty());
    for (auto& r : f.records) got.push_back(r);
    off = got.back().offset + 1;
  }
  ASSERT_EQ(got.size(), 100u);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(text(got[i].value), "m" + std::to_string(i));

  // A replica fetch carrying the old epoch is fenced.
  protocol::FetchRequest stale;
  stale.topic = "t";
  stale.partition = 0;
  stale.from_offset = 0;
  stale.replica_id = before.leader;
  stale.leader_epoch = before.leader_epoch;
  auto r = raw_call(c, c.broker(after.leader).config().peer_listen,
                    protocol::request_frame(protocol::MsgType::Fetch, protocol::encode(stale)));
  EXPECT_EQ(r.status, Errc::FencedEpoch);

  // Produce keeps working after failover.
  auto p = c.produce("t", 0, numbered(100, 1));
  ASSERT_TRUE(p.ok()) << p.message;
  EXPECT_EQ(p.offsets[0].offset, 100u);
}

TEST(Broker, ReturningLeaderDropsUncommittedTail) {
  SimCluster c(3);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 3).ok());
  ASSERT_TRUE(c.produce("t", 0, numbered(0, 10)).ok());
  const auto old = c.meta("t", 0);
  const auto old_host = c.broker(old.leader).host();

  // Isolate the leader, then write to it directly with leader-only acks; those
  // records never reach the others.
  for (int b = 0; b < 3; ++b)
    if (b != old.leader) c.net.cut(old_host, c.broker(b).host());
  protocol::ProduceRequest req;
  req.topic = "t";
  req.partition = 0;
  req.ack = AckMode::LeaderOnly;
  req.entries = numbered(1000, 3);
  auto r = raw_call(c, c.broker(old.leader).config().client_listen,
                    protocol::request_frame(protocol::MsgType::Produce, protocol::encode(req)));
  ASSERT_TRUE(r.ok()) << r.message;
  EXPECT_EQ(c.broker(old.leader).node().log(PartitionId{"t", 0})->next_offset(), 13u);

  // The rest elect a new leader and take new writes.
  c.broker(old.leader).crash();
  for (int b = 0; b < 3; ++b)
    if (b != old.leader) c.net.heal(old_host, c.broker(b).host());
  ASSERT_TRUE(c.wait_for([&] { return c.leader_of("t", 0) != nullptr; }, 10'000));
  ASSERT_TRUE(c.produce("t", 0, numbered(10, 5)).ok());

  c.broker(old.leader).start();
  auto* log = c.broker(old.leader).node().log(PartitionId{"t", 0});
  ASSERT_TRUE(c.wait_for([&] { return log->next_offset() == 15; }, 20'000));
  auto recs = all_records(*log);
  ASSERT_EQ(recs.size(), 15u);
  for (int i = 0; i < 15; ++i) EXPECT_EQ(text(recs[i].value), "m" + std::to_string(i));
}

TEST(Broker, SingleReplicaLossIsNoViableLeaderUntilRestart) {
  SimCluster c(2);
  c.start_all();
  ASSERT_TRUE(c.create_topic("solo", 2, 1).ok());
  auto m = c.meta("solo", 0);
  ASSERT_TRUE(c.produce("solo", 0, numbered(0, 3)).ok());
  c.broker(m.leader).crash();
  c.run_ms(3000);
  auto p = c.produce("solo", 0, numbered(3, 1));
  EXPECT_EQ(p.status, Errc::NoViableLeader) << p.message;
  EXPECT_EQ(c.meta("solo", 0).leader, kNoLeader);
  c.broker(m.leader).start();
  ASSERT_TRUE(c.wait_for([&] { return c.leader_of("solo", 0) != nullptr; }, 10'000));
  auto ok = c.produce("solo", 0, numbered(3, 1));
  ASSERT_TRUE(ok.ok()) << errc_name(ok.status) << " " << ok.message;
  EXPECT_EQ(ok.offsets[0].offset, 3u);
}

TEST(Broker, RestartKeepsTopicsAndData) {
  SimCluster c(1);
  c.start_all();
  for (auto name : {"a", "b", "c"}) ASSERT_TRUE(c.create_topic(name, 2, 1).ok());
  ASSERT_TRUE(c.produce("b", 1, numbered(0, 4)).ok());
  c.broker(0).stop();
  c.broker(0).start();
  c.run_ms(500);
  EXPECT_EQ(c.broker(0).node().registry().list(), (std::vector<std::string>{"a", "b", "c"}));
  auto f = c.fetch("b", 1, 0);
  ASSERT_TRUE(f.ok()) << f.message;
  EXPECT_EQ(f.records.size(), 4u);
  EXPECT_EQ(f.high_watermark, 4u);
}

TEST(Broker, SecondInstanceOnSameDataDirFails) {
  SimCluster c(1);
  c.start_all();
  sim::SimExecutor exec(c.sched);
  auto transport = c.net.transport("b0", exec);
  BrokerNode twin(c.broker(0).config(), exec, *transport);
  try {
    twin.start();
    FAIL() << "expected DataDirLocked";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DataDirLocked);
  }
}

TEST(Broker, LongPollWakesOnProduce) {
  SimCluster c(1);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 1, 1).ok());
  std::optional<FetchResult> got;
  const auto t0 = c.sched.now_us();
  c.client->fetch("t", 0, 0, 1u << 20, 5000, [&](FetchResult r) { got = std::move(r); });
  c.run_ms(300);
  EXPECT_FALSE(got.has_value());
  ASSERT_TRUE(c.produce("t", 0, numbered(0, 1)).ok());
  ASSERT_TRUE(c.wait_for([&] { return got.has_value(); }, 1000));
  EXPECT_EQ(got->records.size(), 1u);
  EXPECT_LT(c.sched.now_us() - t0, 1'000'000);

  // Without data the poll ends empty after wait_ms.
  auto empty = c.fetch("t", 0, 1, 700);
  EXPECT_TRUE(empty.ok());
  EXPECT_TRUE(empty.records.empty());
}

// Every request frame, valid or not, gets exactly one reply with its correlation id.
TEST(Broker, HandleAnswersEveryFrameOnce) {
  SimCluster c(1);
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 2, 1).ok());
  auto& node = c.broker(0).node();
  std::mt19937_64 rng(7);
  std::map<std::uint32_t, int> replies;
  std::uint32_t sent = 0;
  for (int i = 0; i < 3000; ++i) {
    protocol::Frame f;
    f.type = static_cast<protocol::MsgType>(1 + rng() % 6);
    f.correlation_id = 1000 + sent++;
    if (rng() % 3 == 0) {
      protocol::FetchRequest fr;
      fr.topic = rng() % 2 ? "t" : "zz";
      fr.partition = static_cast<std::uint32_t>(rng() % 3);
      fr.from_offset = rng() % 4;
      f.type = protocol::MsgType::Fetch;
      f.payload = protocol::encode(fr);
    } else {
      f.payload = cloudlet::testing::random_bytes(rng, rng() % 64);
    }
    const auto corr = f.correlation_id;
    c.client_exec.post([&node, &replies, f = std::move(f), corr]() mutable {
      node.handle(std::move(f), [&replies, corr](protocol::Frame r) {
        EXPECT_EQ(r.correlation_id, corr);
        EXPECT_EQ(r.type, protocol::MsgType::Response);
        ++replies[corr];
      }, Origin::Peer);
    });
  }
  c.run_ms(5000);
  EXPECT_EQ(replies.size(), sent);
  for (auto& [corr, n] : replies) EXPECT_EQ(n, 1) << corr;
}

// Acknowledged all-ISR writes survive any sequence of single-broker crashes and restarts.
class CrashSchedule : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(CrashSchedule, AcknowledgedWritesSurvive) {
  const auto seed = GetParam();
  SimCluster c(3, {}, seed);
  c.net.set_link("broker", "broker", sim::LinkModel{0.5, 2.0, 0, 0.02});
  c.start_all();
  ASSERT_TRUE(c.create_topic("t", 2, 3).ok());
  std::mt19937_64 rng(seed);
  std::map<std::pair<std::uint32_t, std::uint64_t>, std::string> acked;
  int down = -1;
  int next = 0;
  for (int round = 0; round < 30; ++round) {
    const auto p = static_cast<std::uint32_t>(rng() % 2);
    auto batch = numbered(next, 3);
    next += 3;
    auto r = c.produce("t", p, batch);
    if (r.ok()) {
      for (std::size_t i = 0; i < batch.size(); ++i)
        acked[{r.offsets[i].partition, r.offsets[i].offset}] = text(batch[i].value);
    }
    if (down >= 0 && rng() % 3 == 0) {
      c.broker(down).start();
      down = -1;
    } else if (down < 0 && rng() % 4 == 0) {
      down = static_cast<int>(rng() % 3);
      c.broker(down).crash();
    }
    c.run_ms(static_cast<std::int64_t>(rng() % 1500));
  }
  if (down >= 0) c.broker(down).start();
  c.run_ms(5000);
  ASSERT_GT(acked.size(), 30u);
  for (std::uint32_t p = 0; p < 2; ++p) {
    std::map<std::uint64_t, std::string> seen;
    std::uint64_t off = 0;
    for (;;) {
      auto f = c.fetch("t", p, off);
      ASSERT_TRUE(f.ok()) << errc_name(f.status) << " " << f.message;
      if (f.records.empty()) break;
      for (auto& rec : f.records) seen[rec.offset] = text(rec.value);
      off = f.records.back().offset + 1;
    }
    for (auto& [key, value] : acked) {
      if (key.first != p) continue;
      ASSERT_TRUE(seen.count(key.second)) << "partition " << p << " lost offset " << key.second;
      EXPECT_EQ(seen[key.second], value);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, CrashSchedule, ::testing::Range<std::uint64_t>(1, 17));
