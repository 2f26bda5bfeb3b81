#include <gtest/gtest.h>

#include <chrono>

#include "cloudlet/error.hpp"
#include "cloudlet/harness.hpp"
#include "test_util.hpp"

using namespace cloudlet;
using namespace cloudlet::harness;
using nlohmann::json;

namespace {

WorkloadSpec small_workload(std::uint32_t devices, double hz) {
  WorkloadSpec w;
  w.device_count = devices;
  w.base_rate_per_device_hz = hz;
  w.series_mix = {{"noise", 3}, {"pm25", 1}};
  return w;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Ok;
}

}  // namespace

TEST(HarnessConfig, DurationParsing) {
  EXPECT_EQ(parse_duration_ms("60s"), 60'000);
  EXPECT_EQ(parse_duration_ms("250ms"), 250);
  EXPECT_EQ(parse_duration_ms("2m"), 120'000);
  EXPECT_EQ(parse_duration_ms("1500"), 1500);
  EXPECT_EQ(code_of([] { parse_duration_ms("5 parsecs"); }), Errc::ConfigError);
}

TEST(HarnessConfig, TopologyJsonRoundTripAndRejects) {
  TopologyConfig t;
  t.cloudlet_brokers = 3;
  t.replication_factor = 3;
  t.device_cloud.loss_probability = 0.05;
  auto back = TopologyConfig::from_json(t.to_json());
  EXPECT_EQ(back.to_json(), t.to_json());
  EXPECT_EQ(code_of([] { TopologyConfig::from_json({{"linkz", {}}}); }), Errc::ConfigError);
  EXPECT_EQ(code_of([] {
              TopologyConfig::from_json({{"links", {{"device_cloud", {{"loss_probability", 1.0}}}}}});
            }),
            Errc::ConfigError);
  EXPECT_EQ(code_of([] {
              TopologyConfig::from_json({{"links", {{"device_cloud", {{"one_way_latency_ms", -1}}}}}});
            }),
            Errc::ConfigError);
  EXPECT_EQ(code_of([] { TopologyConfig::from_json({{"topics", {{"replication_factor", 2}}}}); }), Errc::ConfigError);
}

TEST(HarnessConfig, WorkloadValidation) {
  auto w = WorkloadSpec::from_json(json::parse(
      R"({"device_count":5,"bursts":[{"start_ms":100,"duration_ms":100,"rate_multiplier":4}],
          "series_mix":[{"series":"a","weight":1}]})"));
  EXPECT_NO_THROW(w.validate(1000));
  EXPECT_EQ(code_of([&] { w.validate(150); }), Errc::ConfigError);
  w.base_rate_per_device_hz = -1;
  EXPECT_EQ(code_of([&] { w.validate(1000); }), Errc::ConfigError);
}

TEST(HarnessConfig, DeviceIdsAreImeiShaped) {
  auto ids = device_ids(42, 50);
  ASSERT_EQ(ids.size(), 50u);
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 50u);
  for (const auto& id : ids) {
    ASSERT_EQ(id.size(), 15u);
    // Luhn check over all 15 digits.
    int sum = 0;
    for (std::size_t k = 0; k < id.size(); ++k) {
      int d = id[id.size() - 1 - k] - '0';
      if (k % 2 == 1) {
        d *= 2;
        if (d > 9) d -= 9;
      }
      sum += d;
    }
    EXPECT_EQ(sum % 10, 0) << id;
  }
  EXPECT_EQ(device_ids(42, 50), ids);
}

TEST(Harness, ZeroDevicesGivesEmptyWellFormedReport) {
  auto r = simulate(TopologyConfig{}, small_workload(0, 1), 2000);
  EXPECT_EQ(r["v"], 1);
  for (const auto& [k, v] : r["counts"].items()) EXPECT_EQ(v, 0) << k;
  EXPECT_EQ(r["ack_latency_ms"]["via_cloudlet"]["count"], 0);
  EXPECT_TRUE(r["backlog"]["samples"].is_array());
}

TEST(Harness, ConservationWithoutFaults) {
  auto r = simulate(TopologyConfig{}, small_workload(20, 2), 5000);
  const auto& c = r["counts"];
  EXPECT_GT(c["produced"].get<int>(), 100);
  EXPECT_EQ(c["produced"], c["generated"]);
  EXPECT_EQ(c["stored"], c["produced"]);
  EXPECT_EQ(c["lost"], 0);
  EXPECT_EQ(c["failed"], 0);
  EXPECT_EQ(c["in_flight"], 0);
  EXPECT_EQ(r["backlog"]["final"], 0);
  EXPECT_TRUE(r["conservation"]["accounted"].get<bool>());
}

TEST(Harness, SameSeedSameBytes) {
  TopologyConfig t;
  t.cloudlet_brokers = 3;
  t.replication_factor = 3;
  t.device_cloudlet.loss_probability = 0.02;
  Scenario s = Scenario::from_json(json::parse(R"({"events":[
      {"at_ms":1500,"action":"kill_broker","target":"cloudlet-b1"},
      {"at_ms":2000,"action":"partition_link","a":"cloudlet","b":"cloud"},
      {"at_ms":3000,"action":"resume","a":"cloudlet","b":"cloud"},
      {"at_ms":3500,"action":"resume","target":"cloudlet-b1"}]})"));
  auto a = simulate(t, small_workload(10, 3), 5000, s, {std::nullopt, 7});
  auto b = simulate(t, small_workload(10, 3), 5000, s, {std::nullopt, 7});
  EXPECT_EQ(a.dump(), b.dump());
  auto c = simulate(t, small_workload(10, 3), 5000, s, {std::nullopt, 8});
  EXPECT_NE(a.dump(), c.dump());
  EXPECT_EQ(a["events"].size(), 4u);
}

TEST(Harness, ScenarioErrors) {
  Scenario s;
  s.events.push_back({100, "kill_broker", "cloudlet-b9", "", ""});
  EXPECT_EQ(code_of([&] { simulate(TopologyConfig{}, small_workload(1, 1), 1000, s); }), Errc::ScenarioError);
  s.events = {{100, "explode", "", "", ""}};
  EXPECT_EQ(code_of([&] { simulate(TopologyConfig{}, small_workload(1, 1), 1000, s); }), Errc::ScenarioError);
  s.events = {{100, "partition_link", "", "cloudlet", "moon"}};
  EXPECT_EQ(code_of([&] { simulate(TopologyConfig{}, small_workload(1, 1), 1000, s); }), Errc::ScenarioError);
  EXPECT_EQ(code_of([] { Scenario::from_json(json::parse(R"({"events":[{"action":"x"}]})")); }), Errc::ScenarioError);
}

TEST(Harness, SymmetricPathsGiveRatioNearOne) {
  TopologyConfig t;
  t.device_cloudlet = {10, 0, 0, 0};
  t.device_cloud = {10, 0, 0, 0};
  t.sink_enabled = false;
  auto r = compare_paths(t, small_workload(10, 2), 5000);
  EXPECT_NEAR(r["ratio_p50"].get<double>(), 1.0, 0.05) << r.dump();
}

TEST(Harness, LossyCloudPathInflatesOnlyCloudTail) {
  TopologyConfig t;
  t.device_cloud.loss_probability = 0.05;
  t.sink_enabled = false;
  auto r = compare_paths(t, small_workload(20, 2), 10'000);
  const double cloud_p99 = r["cloud"]["p99_ms"];
  const double cloudlet_p99 = r["cloudlet"]["p99_ms"];
  // A single retransmission adds 200 ms on top of a ~200 ms round trip.
  EXPECT_GT(cloud_p99, 380.0) << r.dump();
  EXPECT_LT(cloudlet_p99, 30.0) << r.dump();
}

TEST(Harness, ProducerLatencyIndependentOfSink) {
  TopologyConfig with_sink;
  TopologyConfig without = with_sink;
  without.sink_enabled = false;
  auto a = simulate(with_sink, small_workload(20, 2), 5000);
  auto b = simulate(without, small_workload(20, 2), 5000);
  const double pa = a["ack_latency_ms"]["via_cloudlet"]["p50"];
  const double pb = b["ack_latency_ms"]["via_cloudlet"]["p50"];
  EXPECT_NEAR(pa / pb, 1.0, 0.10);
}

TEST(Harness, NoBurstBacklogBoundedByOneBatch) {
  TopologyConfig t;
  t.sink_batch = 100;
  auto r = burst_drain(t, small_workload(10, 1), 1000, 5000);
  EXPECT_LE(r["peak_backlog"].get<int>(), 100);
  EXPECT_EQ(r["loss"], 0);
}

TEST(Harness, VirtualTimeIsCheap) {
  TopologyConfig slow;
  slow.device_cloudlet = {400, 0, 0, 0};
  const auto t0 = std::chrono::steady_clock::now();
  auto r = simulate(slow, small_workload(2, 1), 60'000);
  const auto wall = std::chrono::steady_clock::now() - t0;
  EXPECT_GT(r["counts"]["produced"].get<int>(), 50);
  EXPECT_LT(std::chrono::duration_cast<std::chrono::seconds>(wall).count(), 30);
}
