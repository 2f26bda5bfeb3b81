#include "cloudlet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <set>

#include "cloudlet/client.hpp"
#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"
#include "cloudlet/gateway.hpp"
#include "cloudlet/sim_nodes.hpp"
#include "cloudlet/sink.hpp"

namespace cloudlet::harness {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(Errc::ConfigError, what); }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      config_error("unknown field " + where + "." + k);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(where + "." + key + " has the wrong type");
  }
}

sim::LinkModel link_from_json(const json& j, sim::LinkModel m, const std::string& where) {
  check_keys(j, {"one_way_latency_ms", "jitter_ms", "bandwidth_bytes_per_s", "loss_probability"}, where);
  read(j, "one_way_latency_ms", m.one_way_latency_ms, where);
  read(j, "jitter_ms", m.jitter_ms, where);
  read(j, "bandwidth_bytes_per_s", m.bandwidth_bytes_per_s, where);
  read(j, "loss_probability", m.loss_probability, where);
  return m;
}

json link_to_json(const sim::LinkModel& m) {
  return {{"one_way_latency_ms", m.one_way_latency_ms},
          {"jitter_ms", m.jitter_ms},
          {"bandwidth_bytes_per_s", m.bandwidth_bytes_per_s},
          {"loss_probability", m.loss_probability}};
}

void validate_link(const sim::LinkModel& m, const std::string& name) {
  if (!(m.one_way_latency_ms >= 0) || !std::isfinite(m.one_way_latency_ms)) config_error(name + " latency must be >= 0");
  if (!(m.jitter_ms >= 0) || m.jitter_ms > m.one_way_latency_ms) {
    config_error(name + " jitter must be in [0, latency]");
  }
  if (!(m.loss_probability >= 0 && m.loss_probability < 1)) config_error(name + " loss_probability must be in [0, 1)");
}

bool is_tier(const std::string& t) { return t == "cloudlet" || t == "cloud"; }

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing

void TopologyConfig::validate() const {
  validate_link(device_cloudlet, "device_cloudlet");
  validate_link(device_cloud, "device_cloud");
  validate_link(cloudlet_cloud, "cloudlet_cloud");
  validate_link(intra_tier, "intra_tier");
  if (!is_tier(ingest)) config_error("placement.ingest must be \"cloudlet\" or \"cloud\"");
  if (!is_tier(sink_tier)) config_error("placement.sink must be \"cloudlet\" or \"cloud\"");
  const auto ingest_brokers = ingest == "cloudlet" ? cloudlet_brokers : cloud_brokers;
  if (ingest_brokers == 0) config_error("the ingest tier needs at least one broker");
  if (cloudlet_brokers > 16 || cloud_brokers > 16) config_error("at most 16 brokers per tier");
  if (partitions == 0) config_error("topics.partitions must be positive");
  if (replication_factor == 0 || replication_factor > ingest_brokers) {
    config_error("topics.replication_factor must be in [1, ingest brokers]");
  }
  if (retention_ms == 0) config_error("topics.retention_ms must be positive");
  if (segment_bytes < 1024) config_error("topics.segment_bytes must be >= 1024");
  if (sink_rate_cap_per_s < 0 || !std::isfinite(sink_rate_cap_per_s)) config_error("sink.rate_cap_per_s must be >= 0");
  if (sink_batch == 0) config_error("sink.max_records_per_batch must be positive");
  if (pseudonym_secret.size() < 16) config_error("pseudonym_secret must be at least 16 bytes");
}

TopologyConfig TopologyConfig::from_json(const json& j) {
  TopologyConfig t;
  check_keys(j, {"links", "placement", "topics", "sink", "pseudonym_secret", "rng_seed"}, "topology");
  if (j.contains("links")) {
    const auto& l = j["links"];
    check_keys(l, {"device_cloudlet", "device_cloud", "cloudlet_cloud", "intra_tier"}, "links");
    if (l.contains("device_cloudlet")) t.device_cloudlet = link_from_json(l["device_cloudlet"], t.device_cloudlet, "links.device_cloudlet");
    if (l.contains("device_cloud")) t.device_cloud = link_from_json(l["device_cloud"], t.device_cloud, "links.device_cloud");
    if (l.contains("cloudlet_cloud")) t.cloudlet_cloud = link_from_json(l["cloudlet_cloud"], t.cloudlet_cloud, "links.cloudlet_cloud");
    if (l.contains("intra_tier")) t.intra_tier = link_from_json(l["intra_tier"], t.intra_tier, "links.intra_tier");
  }
  if (j.contains("placement")) {
    const auto& p = j["placement"];
    check_keys(p, {"brokers", "ingest", "sink"}, "placement");
    if (p.contains("brokers")) {
      check_keys(p["brokers"], {"cloudlet", "cloud"}, "placement.brokers");
      read(p["brokers"], "cloudlet", t.cloudlet_brokers, "placement.brokers");
      read(p["brokers"], "cloud", t.cloud_brokers, "placement.brokers");
    }
    read(p, "ingest", t.ingest, "placement");
    read(p, "sink", t.sink_tier, "placement");
  }
  if (j.contains("topics")) {
    const auto& p = j["topics"];
    check_keys(p, {"partitions", "replication_factor", "retention_ms", "segment_bytes"}, "topics");
    read(p, "partitions", t.partitions, "topics");
    read(p, "replication_factor", t.replication_factor, "topics");
    read(p, "retention_ms", t.retention_ms, "topics");
    read(p, "segment_bytes", t.segment_bytes, "topics");
  }
  if (j.contains("sink")) {
    const auto& p = j["sink"];
    check_keys(p, {"enabled", "rate_cap_per_s", "max_records_per_batch"}, "sink");
    read(p, "enabled", t.sink_enabled, "sink");
    read(p, "rate_cap_per_s", t.sink_rate_cap_per_s, "sink");
    read(p, "max_records_per_batch", t.sink_batch, "sink");
  }
  read(j, "pseudonym_secret", t.pseudonym_secret, "topology");
  read(j, "rng_seed", t.rng_seed, "topology");
  t.validate();
  return t;
}

json TopologyConfig::to_json() const {
  return {{"links",
           {{"device_cloudlet", link_to_json(device_cloudlet)},
            {"device_cloud", link_to_json(device_cloud)},
            {"cloudlet_cloud", link_to_json(cloudlet_cloud)},
            {"intra_tier", link_to_json(intra_tier)}}},
          {"placement",
           {{"brokers", {{"cloudlet", cloudlet_brokers}, {"cloud", cloud_brokers}}},
            {"ingest", ingest},
            {"sink", sink_tier}}},
          {"topics",
           {{"partitions", partitions},
            {"replication_factor", replication_factor},
            {"retention_ms", retention_ms},
            {"segment_bytes", segment_bytes}}},
          {"sink",
           {{"enabled", sink_enabled}, {"rate_cap_per_s", sink_rate_cap_per_s}, {"max_records_per_batch", sink_batch}}},
          {"rng_seed", rng_seed}};
}

void WorkloadSpec::validate(std::int64_t duration_ms) const {
  if (device_count > 10'000) config_error("device_count must be <= 10000");
  if (!(base_rate_per_device_hz >= 0) || !std::isfinite(base_rate_per_device_hz)) {
    config_error("base_rate_per_device_hz must be >= 0");
  }
  for (const auto& b : bursts) {
    if (b.start_ms < 0 || b.duration_ms < 0 || b.start_ms + b.duration_ms > duration_ms) {
      config_error("bursts must lie within the run duration");
    }
    if (!(b.rate_multiplier >= 0) || !std::isfinite(b.rate_multiplier)) config_error("rate_multiplier must be >= 0");
  }
  if (payload_bytes > 64 * 1024) config_error("payload_bytes must be <= 65536");
  if (series_mix.empty()) config_error("series_mix must not be empty");
  double total = 0;
  std::set<std::string> names;
  for (const auto& s : series_mix) {
    if (s.series.empty() || s.series.size() > 200) config_error("series names must be 1..200 bytes");
    if (!names.insert(s.series).second) config_error("duplicate series " + s.series);
    if (!(s.weight >= 0) || !std::isfinite(s.weight)) config_error("series weights must be >= 0");
    total += s.weight;
  }
  if (!(total > 0)) config_error("series weights must not all be zero");
  if (attempts == 0) config_error("attempts must be positive");
  if (request_timeout_ms == 0) config_error("request_timeout_ms must be positive");
  if (drain_timeout_ms < 0) config_error("drain_timeout_ms must be >= 0");
}

WorkloadSpec WorkloadSpec::from_json(const json& j) {
  WorkloadSpec w;
  check_keys(j,
             {"device_count", "base_rate_per_device_hz", "bursts", "payload_bytes", "series_mix",
              "max_in_flight_per_device", "messages_per_device", "attempts", "request_timeout_ms", "retry_backoff_ms", "drain_timeout_ms"},
             "workload");
  read(j, "device_count", w.device_count, "workload");
  read(j, "base_rate_per_device_hz", w.base_rate_per_device_hz, "workload");
  read(j, "payload_bytes", w.payload_bytes, "workload");
  read(j, "max_in_flight_per_device", w.max_in_flight_per_device, "workload");
  read(j, "messages_per_device", w.messages_per_device, "workload");
  read(j, "attempts", w.attempts, "workload");
  read(j, "request_timeout_ms", w.request_timeout_ms, "workload");
  read(j, "retry_backoff_ms", w.retry_backoff_ms, "workload");
  read(j, "drain_timeout_ms", w.drain_timeout_ms, "workload");
  if (j.contains("bursts")) {
    if (!j["bursts"].is_array()) config_error("workload.bursts must be an array");
    for (const auto& b : j["bursts"]) {
      check_keys(b, {"start_ms", "duration_ms", "rate_multiplier"}, "workload.bursts[]");
      Burst burst;
      read(b, "start_ms", burst.start_ms, "workload.bursts[]");
      read(b, "duration_ms", burst.duration_ms, "workload.bursts[]");
      read(b, "rate_multiplier", burst.rate_multiplier, "workload.bursts[]");
      w.bursts.push_back(burst);
    }
  }
  if (j.contains("series_mix")) {
    if (!j["series_mix"].is_array()) config_error("workload.series_mix must be an array");
    w.series_mix.clear();
    for (const auto& s : j["series_mix"]) {
      check_keys(s, {"series", "weight"}, "workload.series_mix[]");
      SeriesWeight sw;
      read(s, "series", sw.series, "workload.series_mix[]");
      read(s, "weight", sw.weight, "workload.series_mix[]");
      w.series_mix.push_back(sw);
    }
  }
  return w;
}

json WorkloadSpec::to_json() const {
  json bursts_j = json::array();
  for (const auto& b : bursts) {
    bursts_j.push_back({{"start_ms", b.start_ms}, {"duration_ms", b.duration_ms}, {"rate_multiplier", b.rate_multiplier}});
  }
  json mix = json::array();
  for (const auto& s : series_mix) mix.push_back({{"series", s.series}, {"weight", s.weight}});
  return {{"device_count", device_count},
          {"base_rate_per_device_hz", base_rate_per_device_hz},
          {"bursts", bursts_j},
          {"payload_bytes", payload_bytes},
          {"series_mix", mix},
          {"max_in_flight_per_device", max_in_flight_per_device},
          {"messages_per_device", messages_per_device},
          {"attempts", attempts},
          {"request_timeout_ms", request_timeout_ms},
          {"retry_backoff_ms", retry_backoff_ms},
          {"drain_timeout_ms", drain_timeout_ms}};
}

Scenario Scenario::from_json(const json& j) {
  Scenario s;
  const auto fail = [](const std::string& why) { throw Error(Errc::ScenarioError, why); };
  if (!j.is_object() || !j.contains("events") || !j["events"].is_array()) fail("scenario needs an events array");
  for (const auto& e : j["events"]) {
    if (!e.is_object()) fail("scenario events must be objects");
    ScenarioEvent ev;
    try {
      ev.at_ms = e.at("at_ms").get<std::int64_t>();
      ev.action = e.at("action").get<std::string>();
      ev.target = e.value("target", "");
      ev.a = e.value("a", "");
      ev.b = e.value("b", "");
    } catch (const json::exception&) {
      fail("scenario event needs integer at_ms and string action/target/a/b");
    }
    s.events.push_back(ev);
  }
  return s;
}

std::int64_t parse_duration_ms(const std::string& text) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(text, &pos);
  } catch (const std::exception&) {
    config_error("bad duration " + text);
  }
  const auto unit = text.substr(pos);
  double scale = 1;
  if (unit == "ms" || unit.empty()) {
    scale = 1;
  } else if (unit == "s") {
    scale = 1000;
  } else if (unit == "m" || unit == "min") {
    scale = 60'000;
  } else {
    config_error("bad duration unit in " + text);
  }
  if (!(v >= 0) || !std::isfinite(v)) config_error("duration must be >= 0");
  return static_cast<std::int64_t>(std::llround(v * scale));
}

std::vector<std::string> device_ids(std::uint64_t seed, std::uint32_t count) {
  // IMEI-shaped 15-digit ids: fixed 8-digit type code, 6-digit serial, 1 check digit.
  std::mt19937_64 rng(seed ^ 0x1de1ce5ULL);
  const std::uint64_t base = rng() % 500'000;
  std::vector<std::string> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto body = "35693803" + [&] {
      auto s = std::to_string((base + i) % 1'000'000);
      return std::string(6 - s.size(), '0') + s;
    }();
    int sum = 0;
    for (std::size_t k = 0; k < body.size(); ++k) {
      int d = body[body.size() - 1 - k] - '0';
      if (k % 2 == 0) {
        d *= 2;
        if (d > 9) d -= 9;
      }
      sum += d;
    }
    out.push_back(body + std::to_string((10 - sum % 10) % 10));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

constexpr std::int64_t kStartUs = 1'700'000'000'000'000;
constexpr std::int64_t kSettleMs = 2000;
constexpr std::uint16_t kGatewayPort = 8080;

json histogram(std::vector<std::int64_t> us) {
  std::sort(us.begin(), us.end());
  const auto ms = [](std::int64_t v) { return static_cast<double>(v) / 1000.0; };
  if (us.empty()) return {{"count", 0}, {"min", 0}, {"p50", 0}, {"p90", 0}, {"p99", 0}, {"max", 0}, {"mean", 0}};
  const auto rank = [&](double q) {
    auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(us.size())));
    return us[std::clamp<std::size_t>(idx, 1, us.size()) - 1];
  };
  std::int64_t total = 0;
  for (auto v : us) total += v;
  return {{"count", us.size()},
          {"min", ms(us.front())},
          {"p50", ms(rank(0.50))},
          {"p90", ms(rank(0.90))},
          {"p99", ms(rank(0.99))},
          {"max", ms(us.back())},
          {"mean", std::round(static_cast<double>(total) / static_cast<double>(us.size())) / 1000.0}};
}

using Source = std::tuple<std::string, std::uint32_t, std::uint64_t>;

struct Message {
  std::string mid;
  std::string series;
  double value = 0;
  std::int64_t first_send_us = 0;
  std::uint32_t attempts = 0;
  bool acked = false;
  bool failed = false;
  bool stored = false;
  std::vector<Source> records;
};

struct Cluster {
  std::string tier;
  std::vector<std::unique_ptr<sim::BrokerProcess>> brokers;
};

struct Endpoint {
  std::string host;
  std::unique_ptr<sim::SimExecutor> exec;
  std::unique_ptr<Transport> transport;
  std::unique_ptr<BrokerClient> client;
};

class World {
 public:
  World(const TopologyConfig& topo, const WorkloadSpec& work, std::int64_t duration_ms, const Scenario& scenario,
        std::filesystem::path root, std::uint64_t seed)
      : topo_(topo),
        work_(work),
        duration_ms_(duration_ms),
        scenario_(scenario),
        root_(std::move(root)),
        seed_(seed),
        sched_(kStartUs),
        net_(sched_, seed),
        control_(sched_) {}

  json run();

 private:
  void build();
  void validate_scenario() const;
  void setup_topics();
  void start_devices();
  void arrival(std::size_t d);
  void enqueue(std::size_t d, const std::string& mid);
  void send(std::size_t d, const std::string& mid);
  void on_reply(std::size_t d, const std::string& mid, CallResult r);
  void settle(std::size_t d, const std::string& mid);
  void apply(const ScenarioEvent& ev);
  std::vector<std::string> hosts_of(const std::string& name) const;
  sim::BrokerProcess* find_broker(const std::string& host);
  Cluster& ingest() { return topo_.ingest == "cloudlet" ? cloudlet_ : cloud_; }
  double rate_at(std::int64_t rel_ms) const;
  std::int64_t rel_ms() const { return (sched_.now_us() - t0_us_) / 1000; }
  std::uint64_t backlog();
  std::optional<std::uint64_t> partition_hw(const std::string& topic, std::uint32_t p);
  std::optional<std::uint64_t> partition_earliest(const std::string& topic, std::uint32_t p);
  void sample();
  json report();
  void dump_stats();

  TopologyConfig topo_;
  WorkloadSpec work_;
  std::int64_t duration_ms_;
  Scenario scenario_;
  std::filesystem::path root_;
  std::uint64_t seed_;

  sim::Scheduler sched_;
  sim::Network net_;
  sim::SimExecutor control_;
  std::int64_t t0_us_ = 0;

  Cluster cloudlet_{"cloudlet", {}};
  Cluster cloud_{"cloud", {}};
  Endpoint gw_end_;
  std::unique_ptr<Gateway> gateway_;
  std::string gateway_address_;
  Endpoint sink_end_;
  std::unique_ptr<Sink> sink_;
  bool sink_stalled_ = false;

  struct Device {
    std::string id;
    std::string host;
    std::unique_ptr<sim::SimExecutor> exec;
    std::unique_ptr<Transport> transport;
    std::mt19937_64 rng;
    std::uint64_t seq = 0;
    std::uint32_t in_flight = 0;
    std::deque<std::string> queue;
  };
  std::vector<Device> devices_;
  std::vector<std::string> topics_;
  std::vector<double> weights_;
  double max_rate_ = 0;

  std::map<std::string, Message> ledger_;
  std::map<Source, std::string> by_source_;  // acked records
  std::set<Source> stored_sources_;
  std::uint64_t busy_ = 0;  // messages queued or in flight across all devices
  std::uint64_t generated_ = 0;
  std::uint64_t duplicated_ = 0;
  std::uint64_t stored_unacked_ = 0;
  std::vector<std::int64_t> ack_us_;
  std::vector<std::int64_t> e2e_us_;
  std::vector<std::pair<std::int64_t, std::uint64_t>> samples_;
  json applied_ = json::array();
};

void World::build() {
  net_.set_link("device", "cloudlet", topo_.device_cloudlet);
  net_.set_link("device", "cloud", topo_.device_cloud);
  net_.set_link("cloudlet", "cloud", topo_.cloudlet_cloud);
  net_.set_link("cloudlet", "cloudlet", topo_.intra_tier);
  net_.set_link("cloud", "cloud", topo_.intra_tier);
  net_.set_link("device", "device", topo_.intra_tier);

  for (auto* cluster : {&cloudlet_, &cloud_}) {
    const auto n = cluster->tier == "cloudlet" ? topo_.cloudlet_brokers : topo_.cloud_brokers;
    if (n == 0) continue;
    auto configs = sim::cluster_configs(static_cast<int>(n), root_ / cluster->tier, cluster->tier + "-b");
    for (auto& c : configs) {
      c.heartbeat_interval_ms = 500;
      c.max_lag_ms = 5000;
      c.isr_check_interval_ms = 250;
      c.retention_check_interval_ms = 500;
      c.checkpoint_interval_ms = 1000;
      c.replica_fetch_wait_ms = 200;
      c.log.fsync = false;
      c.log.segment_max_bytes = topo_.segment_bytes;
      const auto host = cluster->tier + "-b" + std::to_string(c.broker_id);
      net_.add_host(host, cluster->tier);
      cluster->brokers.push_back(std::make_unique<sim::BrokerProcess>(net_, host, c));
    }
  }

  std::vector<std::string> bootstrap;
  for (auto& b : ingest().brokers) bootstrap.push_back(b->config().client_listen);
  ClientOptions opts;
  opts.request_timeout_ms = 3000;

  gw_end_.host = topo_.ingest + "-gw";
  net_.add_host(gw_end_.host, topo_.ingest);
  gw_end_.exec = std::make_unique<sim::SimExecutor>(sched_);
  gw_end_.transport = net_.transport(gw_end_.host, *gw_end_.exec);
  gw_end_.client = std::make_unique<BrokerClient>(*gw_end_.exec, *gw_end_.transport, bootstrap, opts);
  GatewayConfig gc;
  gc.listen = gw_end_.host + ":" + std::to_string(kGatewayPort);
  gc.brokers = bootstrap;
  gc.pseudonym_secret = topo_.pseudonym_secret;
  for (const auto& s : work_.series_mix) gc.routing[s.series] = s.series;
  gc.max_body_bytes = 1u << 20;
  gateway_ = std::make_unique<Gateway>(gc, *gw_end_.exec, *gw_end_.client);
  gateway_address_ = gc.listen;
  net_.listen(gateway_address_, gw_end_.host, *gw_end_.exec, [this](protocol::Frame f, ReplyFn reply) {
    HttpRequest req;
    try {
      req = decode_http_request(f.payload);
    } catch (const Error&) {
      reply(protocol::Frame{protocol::MsgType::Response, 0,
                            encode_http(http_error(400, "bad_request", "undecodable HTTP carriage"))});
      return;
    }
    gateway_->handle(std::move(req), [reply](HttpResponse resp) {
      reply(protocol::Frame{protocol::MsgType::Response, 0, encode_http(resp)});
    });
  });

  sink_end_.host = topo_.sink_tier + "-sink";
  net_.add_host(sink_end_.host, topo_.sink_tier);
  sink_end_.exec = std::make_unique<sim::SimExecutor>(sched_);
  sink_end_.transport = net_.transport(sink_end_.host, *sink_end_.exec);
  sink_end_.client = std::make_unique<BrokerClient>(*sink_end_.exec, *sink_end_.transport, bootstrap, opts);

  for (const auto& s : work_.series_mix) {
    topics_.push_back(s.series);
    weights_.push_back(s.weight);
  }
  double max_mult = 1.0;
  for (const auto& b : work_.bursts) max_mult = std::max(max_mult, b.rate_multiplier);
  max_rate_ = work_.base_rate_per_device_hz * max_mult;

  const auto ids = device_ids(seed_, work_.device_count);
  devices_.resize(work_.device_count);
  for (std::uint32_t i = 0; i < work_.device_count; ++i) {
    auto& d = devices_[i];
    d.id = ids[i];
    d.host = "dev" + std::to_string(i);
    net_.add_host(d.host, "device");
    d.exec = std::make_unique<sim::SimExecutor>(sched_);
    d.transport = net_.transport(d.host, *d.exec);
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32), i, 0xdeu};
    d.rng.seed(seq);
  }
}

sim::BrokerProcess* World::find_broker(const std::string& host) {
  for (auto* c : {&cloudlet_, &cloud_})
    for (auto& b : c->brokers)
      if (b->host() == host) return b.get();
  return nullptr;
}

std::vector<std::string> World::hosts_of(const std::string& name) const {
  std::vector<std::string> out;
  const auto add_cluster = [&](const Cluster& c) {
    for (const auto& b : c.brokers) out.push_back(b->host());
  };
  if (name == "device") {
    for (const auto& d : devices_) out.push_back(d.host);
  } else if (name == "cloudlet" || name == "cloud") {
    add_cluster(name == "cloudlet" ? cloudlet_ : cloud_);
    if (topo_.ingest == name) out.push_back(gw_end_.host);
    if (topo_.sink_tier == name) out.push_back(sink_end_.host);
  } else {
    for (const auto& d : devices_)
      if (d.host == name) out.push_back(name);
    for (const auto* c : {&cloudlet_, &cloud_})
      for (const auto& b : c->brokers)
        if (b->host() == name) out.push_back(name);
    if (name == gw_end_.host || name == sink_end_.host) out.push_back(name);
  }
  return out;
}

void World::validate_scenario() const {
  const auto fail = [](const std::string& why) { throw Error(Errc::ScenarioError, why); };
  const auto broker_known = [&](const std::string& h) {
    for (const auto* c : {&cloudlet_, &cloud_})
      for (const auto& b : c->brokers)
        if (b->host() == h) return true;
    return false;
  };
  for (const auto& ev : scenario_.events) {
    if (ev.at_ms < 0) fail("event time must be >= 0");
    if (ev.action == "kill_broker") {
      if (!broker_known(ev.target)) fail("unknown broker " + ev.target);
    } else if (ev.action == "partition_link") {
      if (hosts_of(ev.a).empty()) fail("unknown link end " + ev.a);
      if (hosts_of(ev.b).empty()) fail("unknown link end " + ev.b);
    } else if (ev.action == "stall_sink") {
      if (!topo_.sink_enabled) fail("stall_sink with the sink disabled");
    } else if (ev.action == "resume") {
      if (!ev.a.empty() || !ev.b.empty()) {
        if (hosts_of(ev.a).empty()) fail("unknown link end " + ev.a);
        if (hosts_of(ev.b).empty()) fail("unknown link end " + ev.b);
      } else if (ev.target == "sink") {
        if (!topo_.sink_enabled) fail("resume sink with the sink disabled");
      } else if (!broker_known(ev.target)) {
        fail("unknown component " + ev.target);
      }
    } else {
      fail("unknown scenario action " + ev.action);
    }
  }
}

void World::apply(const ScenarioEvent& ev) {
  json rec = {{"at_ms", rel_ms()}, {"action", ev.action}};
  if (ev.action == "kill_broker") {
    find_broker(ev.target)->crash();
    rec["target"] = ev.target;
  } else if (ev.action == "partition_link" || (ev.action == "resume" && !ev.a.empty())) {
    for (const auto& x : hosts_of(ev.a))
      for (const auto& y : hosts_of(ev.b)) {
        if (x == y) continue;
        if (ev.action == "partition_link") {
          net_.cut(x, y);
        } else {
          net_.heal(x, y);
        }
      }
    rec["a"] = ev.a;
    rec["b"] = ev.b;
  } else if (ev.action == "stall_sink") {
    sink_stalled_ = true;
    if (sink_) sink_->stop();
  } else if (ev.action == "resume") {
    rec["target"] = ev.target;
    if (ev.target == "sink") {
      sink_stalled_ = false;
      if (sink_) sink_->start();
    } else {
      find_broker(ev.target)->start();
    }
  }
  applied_.push_back(rec);
}

void World::setup_topics() {
  for (auto* c : {&cloudlet_, &cloud_})
    for (auto& b : c->brokers) b->start();
  sched_.run_until(sched_.now_us() + kSettleMs * 1000);

  for (const auto& t : topics_) {
    TopicConfig cfg;
    cfg.name = t;
    cfg.partition_count = topo_.partitions;
    cfg.replication_factor = topo_.replication_factor;
    cfg.retention_ms = topo_.retention_ms;
    std::optional<JsonResult> r;
    gw_end_.client->create_topic(cfg, [&r](JsonResult res) { r = std::move(res); });
    sched_.run_until([&] { return r.has_value(); }, sched_.now_us() + 30'000'000);
    if (!r || (!r->ok() && r->status != Errc::TopicExists)) {
      throw Error(Errc::ConfigError, "cannot create topic " + t + ": " + (r ? r->message : "timed out"));
    }
  }
  // Wait until every partition has a leader the gateway can see.
  const auto ready = [&] {
    const auto& view = gw_end_.client->view();
    for (const auto& t : topics_) {
      auto it = view.topics.find(t);
      if (it == view.topics.end() || it->second.partitions.size() != topo_.partitions) return false;
      for (const auto& p : it->second.partitions)
        if (p.leader == kNoLeader) return false;
    }
    return true;
  };
  for (int i = 0; i < 60 && !ready(); ++i) {
    bool done = false;
    gw_end_.client->refresh_metadata([&done](Errc) { done = true; });
    sched_.run_until([&] { return done; }, sched_.now_us() + 10'000'000);
    sched_.run_until(sched_.now_us() + 500'000);
  }
  if (!ready()) throw Error(Errc::Unavailable, "topics never got leaders");
}

double World::rate_at(std::int64_t rel) const {
  double mult = 1.0;
  for (const auto& b : work_.bursts) {
    if (rel >= b.start_ms && rel < b.start_ms + b.duration_ms) mult = std::max(mult, b.rate_multiplier);
  }
  // Several overlapping bursts use the largest multiplier.
  return work_.base_rate_per_device_hz * mult;
}

void World::start_devices() {
  if (max_rate_ <= 0) return;
  for (std::size_t i = 0; i < devices_.size(); ++i) {
    auto& d = devices_[i];
    std::exponential_distribution<double> gap(max_rate_ / 1000.0);  // per ms
    const auto first_us = static_cast<std::int64_t>(gap(d.rng) * 1000.0);
    d.exec->schedule_after_us(first_us, [this, i] { arrival(i); });
  }
}

// Poisson arrivals by thinning against the peak rate.
void World::arrival(std::size_t i) {
  auto& d = devices_[i];
  const auto rel = rel_ms();
  if (rel >= duration_ms_) return;
  if (work_.messages_per_device > 0 && d.seq >= work_.messages_per_device) return;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(d.rng) * max_rate_ < rate_at(rel)) {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    Message m;
    m.mid = std::to_string(i) + "-" + std::to_string(d.seq++);
    m.series = topics_[pick(d.rng)];
    m.value = std::round(u(d.rng) * 1000.0) / 10.0;
    const auto mid = m.mid;
    ledger_.emplace(mid, std::move(m));
    ++generated_;
    ++busy_;
    enqueue(i, mid);
  }
  std::exponential_distribution<double> gap(max_rate_ / 1000.0);
  const auto next_us = std::max<std::int64_t>(1, static_cast<std::int64_t>(gap(d.rng) * 1000.0));
  d.exec->schedule_after_us(next_us, [this, i] { arrival(i); });
}

void World::enqueue(std::size_t i, const std::string& mid) {
  auto& d = devices_[i];
  ledger_.at(mid).first_send_us = sched_.now_us();
  if (work_.max_in_flight_per_device > 0 && d.in_flight >= work_.max_in_flight_per_device) {
    d.queue.push_back(mid);
    return;
  }
  ++d.in_flight;
  send(i, mid);
}

void World::send(std::size_t i, const std::string& mid) {
  auto& d = devices_[i];
  auto& m = ledger_.at(mid);
  ++m.attempts;
  json body = {{"device_id", d.id},
               {"series", m.series},
               {"value", m.value},
               {"timestamp_ms", sched_.now_us() / 1000},
               {"attributes", {{"mid", m.mid}}}};
  if (work_.payload_bytes > 0) body["attributes"]["pad"] = std::string(work_.payload_bytes, 'x');
  HttpRequest req{"POST", "/v1/measurements", {}, body.dump()};
  protocol::Frame f{protocol::MsgType::Produce, 0, encode_http(req)};
  d.transport->call(gateway_address_, std::move(f), work_.request_timeout_ms,
                    [this, i, mid](CallResult r) { on_reply(i, mid, std::move(r)); });
}

void World::on_reply(std::size_t i, const std::string& mid, CallResult r) {
  auto& m = ledger_.at(mid);
  std::optional<HttpResponse> resp;
  if (r.ok()) {
    try {
      resp = decode_http_response(r.frame.payload);
    } catch (const Error&) {
    }
  }
  if (resp && resp->status == 202) {
    m.acked = true;
    ack_us_.push_back(sched_.now_us() - m.first_send_us);
    Source src{resp->body.value("topic", ""), resp->body.value("partition", 0u),
               resp->body.value("offset", std::uint64_t{0})};
    m.records.push_back(src);
    by_source_[src] = mid;
    if (m.stored) --stored_unacked_;  // the sink got there before the ack did
    return settle(i, mid);
  }
  const bool transient = !resp || resp->status >= 500;
  if (transient && m.attempts < work_.attempts) {
    devices_[i].exec->schedule_after_ms(work_.retry_backoff_ms, [this, i, mid] { send(i, mid); });
    return;
  }
  m.failed = true;
  settle(i, mid);
}

void World::settle(std::size_t i, const std::string&) {
  auto& d = devices_[i];
  --busy_;
  --d.in_flight;
  if (!d.queue.empty()) {
    auto next = d.queue.front();
    d.queue.pop_front();
    ++d.in_flight;
    send(i, next);
  }
}

std::optional<std::uint64_t> World::partition_hw(const std::string& topic, std::uint32_t p) {
  std::optional<std::uint64_t> best;
  const PartitionId pid{topic, p};
  for (auto& b : ingest().brokers) {
    if (!b->up()) continue;
    if (b->node().is_leader(pid)) return b->node().high_watermark(pid);
    auto hw = b->node().high_watermark(pid);
    if (hw && (!best || *hw > *best)) best = hw;
  }
  return best;
}

std::optional<std::uint64_t> World::partition_earliest(const std::string& topic, std::uint32_t p) {
  std::optional<std::uint64_t> best;
  const PartitionId pid{topic, p};
  for (auto& b : ingest().brokers) {
    if (!b->up()) continue;
    auto* log = b->node().log(pid);
    if (!log) continue;
    if (b->node().is_leader(pid)) return log->earliest_offset();
    if (!best || log->earliest_offset() > *best) best = log->earliest_offset();
  }
  return best;
}

std::uint64_t World::backlog() {
  std::uint64_t total = 0;
  const auto pos = sink_ ? sink_->checkpoint_state() : Positions{};
  for (const auto& t : topics_) {
    for (std::uint32_t p = 0; p < topo_.partitions; ++p) {
      const auto hw = partition_hw(t, p).value_or(0);
      auto it = pos.find({t, p});
      const auto at = it == pos.end() ? 0 : it->second;
      if (hw > at) total += hw - at;
    }
  }
  return total;
}

void World::sample() {
  samples_.emplace_back(rel_ms(), backlog());
  control_.schedule_after_ms(1000, [this] { sample(); });
}

json World::run() {
  build();
  validate_scenario();
  setup_topics();

  t0_us_ = sched_.now_us();
  if (topo_.sink_enabled) {
    SinkConfig sc;
    sc.topics = topics_;
    sc.store_dir = root_ / "sink";
    sc.sync = false;
    sc.rate_cap_per_s = topo_.sink_rate_cap_per_s;
    sc.max_records_per_batch = topo_.sink_batch;
    sc.idle_backoff_ms = 100;
    sink_ = std::make_unique<Sink>(sc, *sink_end_.exec, *sink_end_.client);
    sink_->set_stored_hook([this](const std::string& series, const StoredPoint& p) {
      const Source src{series, p.partition, p.offset};
      stored_sources_.insert(src);
      auto mid_it = p.attributes.find("mid");
      if (mid_it == p.attributes.end()) return;
      auto it = ledger_.find(mid_it->second);
      if (it == ledger_.end()) return;
      auto& m = it->second;
      if (m.stored) {
        ++duplicated_;
        return;
      }
      m.stored = true;
      e2e_us_.push_back(sched_.now_us() - m.first_send_us);
      if (!m.acked) ++stored_unacked_;
    });
    sink_->start();
  }
  for (const auto& ev : scenario_.events) {
    control_.schedule_at_us(t0_us_ + ev.at_ms * 1000, [this, ev] { apply(ev); });
  }
  sample();
  start_devices();

  sched_.run_until(t0_us_ + duration_ms_ * 1000);
  const auto deadline = t0_us_ + (duration_ms_ + work_.drain_timeout_ms) * 1000;
  std::int64_t last_check = -1;
  bool last = false;
  sched_.run_until(
      [&] {
        if (busy_ > 0) return false;
        if (!sink_ || sink_stalled_) return true;
        // Backlog needs a scan of every partition; at most once per virtual ms.
        const auto now = sched_.now_us() / 1000;
        if (now == last_check) return last;
        last_check = now;
        last = backlog() == 0;
        return last;
      },
      deadline);
  samples_.emplace_back(rel_ms(), backlog());
  dump_stats();
  return report();
}

void World::dump_stats() {
  const auto dir = root_ / "stats";
  std::filesystem::create_directories(dir);
  atomic_write_file(dir / "gateway.json", gateway_->counters().to_json().dump(2), false);
  json brokers = json::object();
  for (auto* c : {&cloudlet_, &cloud_})
    for (auto& b : c->brokers)
      if (b->up()) brokers[b->host()] = b->node().stats_json();
  atomic_write_file(dir / "brokers.json", brokers.dump(2), false);
  if (sink_) atomic_write_file(dir / "sink.json", sink_->stats_json().dump(2), false);
}

json World::report() {
  std::uint64_t produced = 0, stored = 0, purged = 0, in_flight = 0, failed = 0;
  std::map<std::pair<std::string, std::uint32_t>, std::uint64_t> earliest;
  for (const auto& t : topics_)
    for (std::uint32_t p = 0; p < topo_.partitions; ++p) earliest[{t, p}] = partition_earliest(t, p).value_or(0);
  const auto is_purged = [&](const Source& s) {
    return std::get<2>(s) < earliest[{std::get<0>(s), std::get<1>(s)}] && !stored_sources_.count(s);
  };
  for (const auto& [mid, m] : ledger_) {
    if (m.failed) ++failed;
    if (!m.acked) continue;
    ++produced;
    if (m.stored) {
      ++stored;
    } else if (std::all_of(m.records.begin(), m.records.end(), is_purged)) {
      ++purged;
    } else {
      ++in_flight;
    }
  }
  std::uint64_t purged_records = 0;
  for (const auto& [src, mid] : by_source_)
    if (is_purged(src)) ++purged_records;

  std::uint64_t peak = 0;
  std::int64_t peak_at = 0;
  for (const auto& [t, v] : samples_)
    if (v > peak) {
      peak = v;
      peak_at = t;
    }
  std::optional<std::int64_t> drained_at;
  for (const auto& [t, v] : samples_)
    if (t >= peak_at && v == 0) {
      drained_at = t;
      break;
    }
  json samples = json::array();
  for (const auto& [t, v] : samples_) samples.push_back({t, v});

  const auto lost = sink_ ? sink_->lost() : 0;
  const auto dead = sink_ ? sink_->stats().dead_letters : 0;
  json gaps = json::array();
  if (sink_) {
    for (const auto& g : sink_->gaps()) {
      auto j = g.to_json();
      j["at_ms"] = g.at_ms - t0_us_ / 1000;
      std::optional<std::uint64_t> first;
      for (auto it = stored_sources_.lower_bound({g.topic, g.partition, g.to});
           it != stored_sources_.end() && std::get<0>(*it) == g.topic && std::get<1>(*it) == g.partition; ++it) {
        first = std::get<2>(*it);
        break;
      }
      j["first_stored_after"] = first ? json(*first) : json(nullptr);
      gaps.push_back(j);
    }
  }
  const std::string path = topo_.ingest == "cloudlet" ? "via_cloudlet" : "via_cloud";
  json positions = json::object();
  if (sink_)
    for (const auto& [k, v] : sink_->checkpoint_state()) positions[k.first][std::to_string(k.second)] = v;

  return {{"v", 1},
          {"seed", seed_},
          {"duration_ms", duration_ms_},
          {"devices", work_.device_count},
          {"ingest_path", topo_.ingest},
          {"counts",
           {{"generated", generated_},
            {"produced", produced},
            {"failed", failed},
            {"stored", stored},
            {"stored_unacked", stored_unacked_},
            {"duplicated", duplicated_},
            {"dead_lettered", dead},
            {"lost", lost},
            {"purged", purged},
            {"purged_records", purged_records},
            {"in_flight", in_flight}}},
          {"conservation",
           {{"accounted", stored + purged + in_flight == produced},
            {"loss_matches_purged", lost == purged_records}}},
          {"ack_latency_ms", {{path, histogram(ack_us_)}}},
          {"e2e_latency_ms", histogram(e2e_us_)},
          {"backlog",
           {{"samples", samples},
            {"max", peak},
            {"peak_at_ms", peak_at},
            {"final", samples_.empty() ? 0 : samples_.back().second},
            {"drained", drained_at.has_value()},
            {"drain_time_ms", drained_at ? json(*drained_at - peak_at) : json(nullptr)}}},
          {"sink", {{"enabled", sink_ != nullptr}, {"positions", positions}, {"gaps", gaps}}},
          {"network",
           {{"frames", net_.frames_sent()}, {"retransmissions", net_.retransmissions()}, {"bytes", net_.bytes_sent()}}},
          {"events", applied_}};
}

struct ScratchDir {
  std::filesystem::path path;
  bool owned = false;
  explicit ScratchDir(const RunOptions& o) {
    if (o.data_dir) {
      path = *o.data_dir;
      std::filesystem::create_directories(path);
      if (!std::filesystem::is_empty(path)) {
        throw Error(Errc::ConfigError, "harness data dir " + path.string() + " must be empty");
      }
      return;
    }
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("cloudlet-harness-" + std::to_string((static_cast<std::uint64_t>(rd()) << 32) | rd()));
    std::filesystem::create_directories(path);
    owned = true;
  }
  ~ScratchDir() {
    std::error_code ec;
    if (owned) std::filesystem::remove_all(path, ec);
  }
};

}  // namespace

json simulate(const TopologyConfig& topology, const WorkloadSpec& workload, std::int64_t duration_ms,
              const Scenario& scenario, const RunOptions& options) {
  topology.validate();
  if (duration_ms <= 0) config_error("duration must be positive");
  workload.validate(duration_ms);
  ScratchDir dir(options);
  World w(topology, workload, duration_ms, scenario, dir.path, options.seed.value_or(topology.rng_seed));
  return w.run();
}

json compare_paths(const TopologyConfig& topology, const WorkloadSpec& workload, std::int64_t duration_ms,
                   const RunOptions& options) {
  json out = {{"v", 1}};
  std::map<std::string, double> p50;
  for (const std::string path : {"cloudlet", "cloud"}) {
    auto t = topology;
    t.ingest = path;
    if (path == "cloud" && t.cloud_brokers < t.replication_factor) t.cloud_brokers = t.replication_factor;
    if (path == "cloudlet" && t.cloudlet_brokers < t.replication_factor) t.cloudlet_brokers = t.replication_factor;
    RunOptions o = options;
    if (o.data_dir) o.data_dir = *o.data_dir / path;
    auto r = simulate(t, workload, duration_ms, {}, o);
    const auto& h = r["ack_latency_ms"][path == "cloudlet" ? "via_cloudlet" : "via_cloud"];
    out[path] = {{"p50_ms", h["p50"]}, {"p99_ms", h["p99"]}, {"count", h["count"]},
                 {"failed", r["counts"]["failed"]}};
    p50[path] = h["p50"].get<double>();
  }
  out["ratio_p50"] = p50["cloudlet"] > 0 ? json(p50["cloud"] / p50["cloudlet"]) : json(nullptr);
  return out;
}

json burst_drain(const TopologyConfig& topology, const WorkloadSpec& workload, double consumer_rate_cap,
                 std::int64_t duration_ms, const Scenario& scenario, const RunOptions& options) {
  auto t = topology;
  t.sink_enabled = true;
  t.sink_rate_cap_per_s = consumer_rate_cap;
  auto r = simulate(t, workload, duration_ms, scenario, options);
  return {{"v", 1},
          {"peak_backlog", r["backlog"]["max"]},
          {"drain_time_ms", r["backlog"]["drain_time_ms"]},
          {"drained", r["backlog"]["drained"]},
          {"loss", r["counts"]["lost"]},
          {"report", r}};
}

}  // namespace cloudlet::harness
