// cloudlet: one binary for running and poking at the stack.
// Exit codes: 0 ok, 1 usage error, 2 runtime error.

#include <csignal>
#include <ctime>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cloudlet/broker.hpp"
#include "cloudlet/client.hpp"
#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"
#include "cloudlet/gateway.hpp"
#include "cloudlet/harness.hpp"
#include "cloudlet/sink.hpp"
#include "cloudlet/tcp.hpp"
#include "cloudlet/ts_store.hpp"

using namespace cloudlet;
using nlohmann::json;

namespace {

struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

void wait_for_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw RuntimeFailure(path + ": " + e.what());
  }
}

// Accepts 2024-05-01, 2024-05-01T12:00:00, optional fraction, Z or +hh:mm; or epoch milliseconds.
std::int64_t parse_time_ms(const std::string& text) {
  const auto digits_from = text.starts_with('-') ? 1u : 0u;
  if (text.size() > digits_from && text.find_first_not_of("0123456789", digits_from) == std::string::npos)
    return std::stoll(text);
  std::tm tm{};
  std::istringstream in(text);
  in >> std::get_time(&tm, "%Y-%m-%d");
  if (in.fail()) throw CLI::ValidationError("time", "not an ISO 8601 timestamp: " + text);
  std::int64_t frac_ms = 0;
  std::int64_t offset_s = 0;
  if (in.peek() == 'T' || in.peek() == ' ') {
    in.get();
    in >> std::get_time(&tm, "%H:%M:%S");
    if (in.fail()) throw CLI::ValidationError("time", "bad time of day in " + text);
    if (in.peek() == '.') {
      in.get();
      std::string digits;
      while (std::isdigit(in.peek())) digits += static_cast<char>(in.get());
      digits = (digits + "000").substr(0, 3);
      frac_ms = std::stoll(digits);
    }
    const int c = in.peek();
    if (c == 'Z') {
      in.get();
    } else if (c == '+' || c == '-') {
      in.get();
      int hh = 0, mm = 0;
      char colon = 0;
      in >> hh >> colon >> mm;
      if (in.fail() || colon != ':') throw CLI::ValidationError("time", "bad UTC offset in " + text);
      offset_s = (c == '+' ? 1 : -1) * (hh * 3600 + mm * 60);
    }
  }
  if (in.peek() != EOF) throw CLI::ValidationError("time", "trailing characters in " + text);
  return (static_cast<std::int64_t>(timegm(&tm)) - offset_s) * 1000 + frac_ms;
}

std::string iso_time(std::int64_t ms) {
  const std::time_t secs = static_cast<std::time_t>(ms >= 0 ? ms / 1000 : (ms - 999) / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms - static_cast<std::int64_t>(secs) * 1000));
  return out;
}

// A client on a private event loop; requests run on the loop and block the caller.
class Session {
 public:
  explicit Session(const std::string& brokers)
      : transport_(exec_), client_(exec_, transport_, split_list(brokers)) {}

  template <typename R, typename Start>
  R await(Start start) {
    std::promise<R> p;
    auto fut = p.get_future();
    exec_.post([&] { start([&p](R r) { p.set_value(std::move(r)); }); });
    return fut.get();
  }

  ClusterView metadata() {
    auto code = await<Errc>([this](auto cb) { client_.refresh_metadata(cb); });
    if (code != Errc::Ok && code != Errc::UnknownTopic) throw RuntimeFailure("no broker reachable");
    return exec_.call([this] { return client_.view(); });
  }

  RealExecutor& exec() { return exec_; }
  BrokerClient& client() { return client_; }

 private:
  RealExecutor exec_;
  TcpTransport transport_;
  BrokerClient client_;
};

[[noreturn]] void fail(Errc code, const std::string& message) {
  throw RuntimeFailure(message.empty() ? std::string(errc_name(code)) : message);
}

json partition_json(std::uint32_t p, const PartitionMeta& m) {
  return {{"partition", p}, {"leader", m.leader}, {"leader_epoch", m.leader_epoch}, {"replicas", m.replicas},
          {"isr", m.isr}};
}

std::string ids(const std::vector<BrokerId>& v) {
  std::string s;
  for (auto id : v) s += (s.empty() ? "" : ",") + std::to_string(id);
  return s;
}

struct Globals {
  std::string brokers = "127.0.0.1:9092";
  std::optional<std::string> config;
  bool json = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloudlet messaging stack"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--brokers", g.brokers, "Comma-separated broker client addresses")->capture_default_str();
  app.add_option("--config", g.config, "Config file (broker start)");
  app.add_flag("--json", g.json, "Machine-readable output");

  // broker start
  auto* broker = app.add_subcommand("broker", "Broker process")->require_subcommand(1);
  auto* broker_start = broker->add_subcommand("start", "Run a broker until SIGINT/SIGTERM");
  broker_start->callback([&] {
    auto cfg = BrokerConfig::load(g.config ? std::optional<std::filesystem::path>(*g.config) : std::nullopt);
    RealExecutor exec;
    TcpTransport peers(exec);
    std::unique_ptr<BrokerNode> node;
    TcpServer client_server(
        exec, [&node](protocol::Frame f, ReplyFn r) { node->handle(std::move(f), std::move(r), Origin::Client); },
        {[&node] { node->client_connected(); }, [&node] { node->client_disconnected(); }});
    TcpServer peer_server(exec,
                          [&node](protocol::Frame f, ReplyFn r) { node->handle(std::move(f), std::move(r), Origin::Peer); });
    node = std::make_unique<BrokerNode>(cfg, exec, peers);
    exec.call([&] { node->start(); });
    client_server.listen(cfg.client_listen);
    peer_server.listen(cfg.peer_listen);
    std::cerr << "broker " << cfg.broker_id << " serving clients on " << cfg.client_listen << ", peers on "
              << cfg.peer_listen << std::endl;
    wait_for_signal();
    std::cerr << "shutting down" << std::endl;
    client_server.stop(5000);
    peer_server.stop(1000);
    exec.call([&] { node->stop(); });
  });

  // topic create/list/describe
  auto* topic = app.add_subcommand("topic", "Topic administration")->require_subcommand(1);
  TopicConfig new_topic;
  auto* topic_create = topic->add_subcommand("create", "Create a topic");
  topic_create->add_option("name", new_topic.name, "Topic name")->required();
  topic_create->add_option("--partitions", new_topic.partition_count, "Partition count")->capture_default_str();
  topic_create->add_option("--replication-factor", new_topic.replication_factor, "Replicas per partition")
      ->capture_default_str();
  topic_create->add_option("--retention-ms", new_topic.retention_ms, "Retention in milliseconds")
      ->capture_default_str();
  topic_create->callback([&] {
    Session s(g.brokers);
    auto r = s.await<JsonResult>([&](auto cb) { s.client().create_topic(new_topic, cb); });
    if (!r.ok()) fail(r.status, r.message);
    if (g.json)
      std::cout << r.body.dump() << "\n";
    else
      std::cout << "created " << new_topic.name << "\n";
  });
  auto* topic_list = topic->add_subcommand("list", "List topics");
  topic_list->callback([&] {
    Session s(g.brokers);
    auto view = s.metadata();
    json out = json::array();
    for (const auto& [name, t] : view.topics) {
      if (g.json)
        out.push_back(name);
      else
        std::cout << name << "\n";
    }
    if (g.json) std::cout << out.dump() << "\n";
  });
  std::string describe_name;
  auto* topic_describe = topic->add_subcommand("describe", "Show partition leaders, replicas and ISR");
  topic_describe->add_option("name", describe_name, "Topic name")->required();
  topic_describe->callback([&] {
    Session s(g.brokers);
    auto view = s.metadata();
    auto it = view.topics.find(describe_name);
    if (it == view.topics.end()) fail(Errc::UnknownTopic, "unknown topic '" + describe_name + "'");
    const auto& t = it->second;
    if (g.json) {
      json parts = json::array();
      for (std::uint32_t p = 0; p < t.partitions.size(); ++p) parts.push_back(partition_json(p, t.partitions[p]));
      std::cout << json{{"name", t.config.name},
                        {"partitions", t.config.partition_count},
                        {"replication_factor", t.config.replication_factor},
                        {"retention_ms", t.config.retention_ms},
                        {"assignment", parts}}
                       .dump()
                << "\n";
      return;
    }
    std::cout << t.config.name << " partitions=" << t.config.partition_count
              << " replication_factor=" << t.config.replication_factor << " retention_ms=" << t.config.retention_ms
              << "\n";
    for (std::uint32_t p = 0; p < t.partitions.size(); ++p) {
      const auto& m = t.partitions[p];
      std::cout << "  partition " << p << " leader=" << m.leader << " epoch=" << m.leader_epoch
                << " replicas=" << ids(m.replicas) << " isr=" << ids(m.isr) << "\n";
    }
  });

  // produce
  std::string produce_topic;
  std::optional<std::uint32_t> produce_partition;
  std::string key_separator;
  bool produce_b64 = false;
  bool leader_only = false;
  auto* produce = app.add_subcommand("produce", "Append stdin lines as records; prints partition:offset per line");
  produce->add_option("topic", produce_topic, "Topic")->required();
  produce->add_option("--partition", produce_partition, "Target partition (default: by key, else round-robin)");
  produce->add_option("--key-separator", key_separator, "Split each line into key<sep>value");
  produce->add_flag("--base64", produce_b64, "Lines (key and value) are base64");
  produce->add_flag("--leader-ack", leader_only, "Acknowledge on leader write instead of all in-sync replicas");
  produce->callback([&] {
    std::vector<LogEntry> entries;
    std::string line;
    const auto bytes_of = [&](std::string_view text) {
      if (!produce_b64) return Bytes(text.begin(), text.end());
      auto b = base64_decode(text);
      if (!b) throw CLI::ValidationError("input", "line is not valid base64");
      return *b;
    };
    while (std::getline(std::cin, line)) {
      LogEntry e;
      std::string_view v = line;
      if (!key_separator.empty()) {
        const auto pos = v.find(key_separator);
        if (pos != std::string_view::npos) {
          e.key = bytes_of(v.substr(0, pos));
          v = v.substr(pos + key_separator.size());
        }
      }
      e.value = bytes_of(v);
      e.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count();
      entries.push_back(std::move(e));
    }
    if (entries.empty()) return;
    Session s(g.brokers);
    const auto ack = leader_only ? protocol::AckMode::LeaderOnly : protocol::AckMode::AllIsr;
    constexpr std::size_t kChunk = 500;
    for (std::size_t i = 0; i < entries.size(); i += kChunk) {
      std::vector<LogEntry> chunk(entries.begin() + static_cast<std::ptrdiff_t>(i),
                                  entries.begin() + static_cast<std::ptrdiff_t>(std::min(entries.size(), i + kChunk)));
      auto r = s.await<ProduceResult>(
          [&](auto cb) { s.client().produce(produce_topic, produce_partition, std::move(chunk), ack, cb); });
      if (!r.ok()) fail(r.status, r.message);
      for (const auto& o : r.offsets) {
        if (g.json)
          std::cout << json{{"partition", o.partition}, {"offset", o.offset}}.dump() << "\n";
        else
          std::cout << o.partition << ":" << o.offset << "\n";
      }
    }
  });

  // consume
  std::string consume_topic;
  std::uint32_t consume_partition = 0;
  std::uint64_t consume_from = 0;
  std::optional<std::uint64_t> consume_max;
  bool no_wait = false;
  bool consume_b64 = false;
  std::uint32_t wait_ms = 1000;
  auto* consume = app.add_subcommand("consume", "Print records as offset<TAB>key<TAB>value; never stores a position");
  consume->add_option("topic", consume_topic, "Topic")->required();
  consume->add_option("--partition", consume_partition, "Partition")->capture_default_str();
  consume->add_option("--from", consume_from, "First offset")->capture_default_str();
  consume->add_option("--max", consume_max, "Stop after this many records");
  consume->add_flag("--no-wait", no_wait, "Exit at the end of the log instead of waiting");
  consume->add_flag("--base64", consume_b64, "Print keys and values base64-encoded");
  consume->add_option("--wait-ms", wait_ms, "Long-poll wait per fetch")->check(CLI::Range(0, 30'000))->capture_default_str();
  consume->callback([&] {
    Session s(g.brokers);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::uint64_t offset = consume_from;
    std::uint64_t printed = 0;
    const auto render = [&](const Bytes& b) {
      return consume_b64 ? base64_encode(b) : std::string(b.begin(), b.end());
    };
    while (!g_stop && (!consume_max || printed < *consume_max)) {
      auto r = s.await<FetchResult>([&](auto cb) {
        s.client().fetch(consume_topic, consume_partition, offset, 1u << 20, no_wait ? 0 : wait_ms, cb);
      });
      if (r.status == Errc::OffsetOutOfRange) {
        throw RuntimeFailure("offset " + std::to_string(offset) + " out of range: earliest " +
                             std::to_string(r.earliest_offset) + ", next " + std::to_string(r.next_offset));
      }
      if (!r.ok()) fail(r.status, r.message);
      if (r.records.empty()) {
        if (no_wait) break;
        continue;
      }
      for (const auto& rec : r.records) {
        if (consume_max && printed >= *consume_max) break;
        if (g.json) {
          json j{{"offset", rec.offset}, {"timestamp_ms", rec.timestamp_ms}};
          j["key"] = rec.key ? json(base64_encode(*rec.key)) : json(nullptr);
          j["value"] = base64_encode(rec.value);
          std::cout << j.dump() << "\n";
        } else {
          std::cout << rec.offset << "\t" << (rec.key ? render(*rec.key) : "") << "\t" << render(rec.value) << "\n";
        }
        ++printed;
      }
      std::cout.flush();
      offset = r.records.back().offset + 1;
    }
  });

  // sink run/query
  auto* sink = app.add_subcommand("sink", "Time-series sink")->require_subcommand(1);
  SinkConfig sink_cfg;
  std::string sink_topics;
  std::string sink_store;
  auto* sink_run = sink->add_subcommand("run", "Drain topics into a store until SIGINT/SIGTERM");
  sink_run->add_option("--topics", sink_topics, "Comma-separated topics")->required();
  sink_run->add_option("--store", sink_store, "Store directory")->required();
  sink_run->add_option("--rate-cap", sink_cfg.rate_cap_per_s, "Records per second, 0 = unlimited")
      ->capture_default_str();
  sink_run->add_option("--batch", sink_cfg.max_records_per_batch, "Records per fetch")->capture_default_str();
  sink_run->callback([&] {
    sink_cfg.topics = split_list(sink_topics);
    sink_cfg.store_dir = sink_store;
    Session s(g.brokers);
    Sink worker(sink_cfg, s.exec(), s.client());
    s.exec().call([&] { worker.start(); });
    std::cerr << "sink draining " << sink_topics << " into " << sink_store << std::endl;
    wait_for_signal();
    s.exec().call([&] { worker.stop(); });
    const auto stats = s.exec().call([&] { return worker.stats_json(); });
    std::cerr << stats.dump() << std::endl;
  });
  std::string q_series, q_from, q_to, q_store;
  bool q_json = false, q_csv = false;
  auto* sink_query = sink->add_subcommand("query", "Points of one series in [from, to)");
  sink_query->add_option("--store", q_store, "Store directory")->required();
  sink_query->add_option("--series", q_series, "Series name")->required();
  sink_query->add_option("--from", q_from, "Start, ISO 8601 or epoch ms (inclusive)")->required();
  sink_query->add_option("--to", q_to, "End, ISO 8601 or epoch ms (exclusive)")->required();
  auto* json_flag = sink_query->add_flag("--json", q_json, "JSON array output");
  sink_query->add_flag("--csv", q_csv, "CSV output")->excludes(json_flag);
  sink_query->callback([&] {
    const auto t0 = parse_time_ms(q_from);
    const auto t1 = parse_time_ms(q_to);
    auto store = TsStore::open_read_only(q_store);
    const auto points = store.query_range(q_series, t0, t1);
    if (q_json || (g.json && !q_csv)) {
      json out = json::array();
      for (const auto& p : points) out.push_back(p.to_json());
      std::cout << out.dump() << "\n";
      return;
    }
    if (q_csv) {
      std::cout << "timestamp_ms,device_pseudonym,value,lat,lon,partition,offset\n";
      for (const auto& p : points) {
        std::cout << p.timestamp_ms << "," << p.device_pseudonym << "," << json(p.value).dump() << ","
                  << (p.lat ? json(*p.lat).dump() : "") << "," << (p.lon ? json(*p.lon).dump() : "") << ","
                  << p.partition << "," << p.offset << "\n";
      }
      return;
    }
    for (const auto& p : points)
      std::cout << iso_time(p.timestamp_ms) << "\t" << p.device_pseudonym << "\t" << json(p.value).dump() << "\n";
  });

  // gateway start
  auto* gateway = app.add_subcommand("gateway", "REST gateway")->require_subcommand(1);
  GatewayConfig gw_cfg;
  std::optional<std::string> routing_file, secret_file;
  auto* gateway_start = gateway->add_subcommand("start", "Serve HTTP until SIGINT/SIGTERM");
  gateway_start->add_option("--listen", gw_cfg.listen, "HTTP listen address")->capture_default_str();
  gateway_start->add_option("--routing", routing_file, "JSON file mapping series to topic");
  gateway_start->add_option("--secret-file", secret_file, "Pseudonym secret file (or CLOUDLET_GATEWAY_SECRET_FILE)");
  gateway_start->callback([&] {
    gw_cfg.brokers = split_list(g.brokers);
    gw_cfg.pseudonym_secret =
        GatewayConfig::load_secret(secret_file ? std::optional<std::filesystem::path>(*secret_file) : std::nullopt);
    if (routing_file) gw_cfg.routing = GatewayConfig::load_routing(*routing_file);
    gw_cfg.validate();
    Session s(g.brokers);
    Gateway gw(gw_cfg, s.exec(), s.client());
    HttpServer server(gw, s.exec());
    server.start(gw_cfg.listen);
    std::cerr << "gateway listening on port " << server.port() << std::endl;
    wait_for_signal();
    server.stop();
  });

  // harness run
  auto* harness_cmd = app.add_subcommand("harness", "Virtual-time simulation")->require_subcommand(1);
  std::optional<std::string> topo_file, workload_file, scenario_file, out_file, data_dir;
  std::string duration = "60s";
  std::optional<std::uint64_t> seed;
  auto* harness_run = harness_cmd->add_subcommand("run", "Run a simulation and write its metrics report");
  harness_run->add_option("--topology", topo_file, "TopologyConfig JSON (defaults if omitted)");
  harness_run->add_option("--workload", workload_file, "WorkloadSpec JSON (defaults if omitted)");
  harness_run->add_option("--duration", duration, "Virtual run length: 60s, 500ms, 2m")->capture_default_str();
  harness_run->add_option("--seed", seed, "RNG seed (overrides the topology)");
  harness_run->add_option("--scenario", scenario_file, "Scenario JSON with fault events");
  harness_run->add_option("--out", out_file, "Report path (stdout if omitted)");
  harness_run->add_option("--data-dir", data_dir, "Keep component data here (must be empty)");
  harness_run->callback([&] {
    std::int64_t duration_ms = 0;
    try {
      duration_ms = harness::parse_duration_ms(duration);
    } catch (const Error& e) {
      throw CLI::ValidationError("--duration", e.what());
    }
    auto topo = topo_file ? harness::TopologyConfig::from_json(read_json_file(*topo_file)) : harness::TopologyConfig{};
    auto work = workload_file ? harness::WorkloadSpec::from_json(read_json_file(*workload_file)) : harness::WorkloadSpec{};
    auto scen = scenario_file ? harness::Scenario::from_json(read_json_file(*scenario_file)) : harness::Scenario{};
    harness::RunOptions opts;
    if (data_dir) opts.data_dir = *data_dir;
    opts.seed = seed;
    const auto report = harness::simulate(topo, work, duration_ms, scen, opts);
    if (out_file) {
      atomic_write_file(*out_file, report.dump(2) + "\n", false);
      const auto& c = report["counts"];
      std::cerr << "produced " << c["produced"] << ", stored " << c["stored"] << ", lost " << c["lost"]
                << "; report written to " << *out_file << std::endl;
    } else {
      std::cout << report.dump(2) << "\n";
    }
  });

  // stats
  std::optional<std::string> stats_topic;
  std::optional<std::string> stats_broker;
  std::int64_t since_ms = 0;
  auto* stats = app.add_subcommand("stats", "Broker activity statistics");
  stats->add_option("--broker", stats_broker, "Broker client address (default: every broker in the cluster)");
  stats->add_option("--topic", stats_topic, "Restrict to one topic");
  stats->add_option("--since-ms", since_ms, "Only requests at or after this epoch ms");
  stats->callback([&] {
    Session s(g.brokers);
    std::vector<std::string> targets;
    if (stats_broker) {
      targets.push_back(*stats_broker);
    } else {
      for (const auto& [id, addr] : s.metadata().client_addresses) targets.push_back(addr);
    }
    json query = json::object();
    if (stats_topic) query["topic"] = *stats_topic;
    if (since_ms) query["since_ms"] = since_ms;
    json all = json::array();
    for (const auto& addr : targets) {
      auto r = s.await<JsonResult>([&](auto cb) { s.client().stats(addr, query, cb); });
      if (!r.ok()) fail(r.status, addr + ": " + r.message);
      r.body["address"] = addr;
      all.push_back(r.body);
    }
    std::cout << (g.json ? all.dump() : all.dump(2)) << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    app.exit(e);
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << errc_name(e.code()) << ": " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
