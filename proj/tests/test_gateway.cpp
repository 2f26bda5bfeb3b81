#include <gtest/gtest.h>

#include <future>
#include <random>

#include <httplib.h>

#include "cloudlet/gateway.hpp"
#include "cloudlet/tcp.hpp"
#include "sim_cluster.hpp"

using namespace cloudlet;
using cloudlet::testing::SimCluster;
using nlohmann::json;

namespace {

const std::string kSecret = "0123456789abcdef";

std::string b64(const std::string& s) {
  return base64_encode(ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

struct GatewayFixture {
  SimCluster c;
  std::unique_ptr<Gateway> gw;

  explicit GatewayFixture(int brokers = 1, const std::function<void(BrokerConfig&)>& tweak = {}) : c(brokers, tweak) {
    c.start_all();
    gw = make_gateway(kSecret);
  }

  std::unique_ptr<Gateway> make_gateway(const std::string& secret) {
    GatewayConfig cfg;
    cfg.brokers = c.client->broker_addresses();
    if (cfg.brokers.empty()) cfg.brokers = {c.broker(0).config().client_listen};
    cfg.pseudonym_secret = secret;
    cfg.routing = {{"noise", "noise"}, {"pm25", "air"}};
    cfg.max_body_bytes = 64 * 1024;
    return std::make_unique<Gateway>(cfg, c.client_exec, *c.client);
  }

  HttpResponse call(HttpRequest req, Gateway* g = nullptr) {
    auto* target = g ? g : gw.get();
    return c.await<HttpResponse>([&](auto cb) { target->handle(std::move(req), cb); });
  }
  HttpResponse post(const std::string& path, const json& body) { return call({"POST", path, {}, body.dump()}); }
  HttpResponse get(const std::string& path, std::map<std::string, std::string> q = {}) {
    return call({"GET", path, std::move(q), {}});
  }
};

}  // namespace

TEST(Base64, KnownVectorsAndRejects) {
  EXPECT_EQ(b64(""), "");
  EXPECT_EQ(b64("hi"), "aGk=");
  EXPECT_EQ(b64("foobar"), "Zm9vYmFy");
  auto d = base64_decode("aGk=");
  ASSERT_TRUE(d);
  EXPECT_EQ(std::string(d->begin(), d->end()), "hi");
  EXPECT_EQ(base64_decode("Zm8=")->size(), 2u);
  EXPECT_EQ(base64_decode("")->size(), 0u);
  EXPECT_FALSE(base64_decode("!!"));
  EXPECT_FALSE(base64_decode("aGk"));
  EXPECT_FALSE(base64_decode("a=Gk"));
  EXPECT_FALSE(base64_decode("aG k"));
}

TEST(Base64, RandomRoundTrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    auto b = cloudlet::testing::random_bytes(rng, rng() % 100);
    auto back = base64_decode(base64_encode(b));
    ASSERT_TRUE(back);
    EXPECT_EQ(*back, b);
  }
}

TEST(Pseudonym, MatchesHmacOracle) {
  // Frozen from Python's hmac/hashlib.
  EXPECT_EQ(device_pseudonym("0123456789abcdef", "356938035643809"), "ac6183cea105d5d2");
  EXPECT_EQ(device_pseudonym("fedcba9876543210", "356938035643809"), "b90e59832d21e47b");
}

TEST(Pseudonym, SecretChangesEveryPseudonym) {
  for (int i = 0; i < 200; ++i) {
    const auto id = "device-" + std::to_string(i);
    const auto a = device_pseudonym(kSecret, id);
    EXPECT_EQ(a.size(), 16u);
    EXPECT_EQ(a, device_pseudonym(kSecret, id));
    EXPECT_NE(a, device_pseudonym("another-secret-0000", id));
    EXPECT_EQ(a.find(id), std::string::npos);
  }
}

TEST(GatewayConfig, Validation) {
  GatewayConfig c;
  c.brokers = {"h:1"};
  c.pseudonym_secret = "short";
  EXPECT_THROW(c.validate(), Error);
  c.pseudonym_secret = kSecret;
  EXPECT_NO_THROW(c.validate());
  c.brokers.clear();
  EXPECT_THROW(c.validate(), Error);
}

TEST(Gateway, ProduceAndFetchOverRest) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("t", 1, 1).ok());
  auto r = f.post("/v1/topics/t/messages", {{"records", {{{"value", b64("hi")}}}}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body, json::parse(R"({"offsets":[{"partition":0,"offset":0}]})"));

  auto g = f.get("/v1/topics/t/partitions/0/messages", {{"offset", "0"}});
  ASSERT_EQ(g.status, 200) << g.body.dump();
  ASSERT_EQ(g.body["records"].size(), 1u);
  EXPECT_EQ(g.body["records"][0]["value"], b64("hi"));
  EXPECT_EQ(g.body["records"][0]["offset"], 0);
  EXPECT_FALSE(g.body["records"][0].contains("key"));
  EXPECT_EQ(g.body["high_watermark"], 1);

  auto at_end = f.get("/v1/topics/t/partitions/0/messages", {{"offset", "1"}, {"wait_ms", "0"}});
  ASSERT_EQ(at_end.status, 200);
  EXPECT_TRUE(at_end.body["records"].empty());
  EXPECT_EQ(at_end.body["high_watermark"], 1);
}

TEST(Gateway, KeyedRecordFollowsFnvRouting) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("t8", 8, 1).ok());
  auto r = f.post("/v1/topics/t8/messages", {{"records", {{{"key", b64("a")}, {"value", b64("x")}}}}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["offsets"][0]["partition"], 4);  // FNV-1a("a") = 0xE40C292C, mod 8
}

TEST(Gateway, OrderedOffsetsAndExplicitTimestamps) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("t", 1, 1).ok());
  json recs = json::array();
  for (int i = 0; i < 5; ++i) recs.push_back({{"value", b64("v" + std::to_string(i))}, {"timestamp_ms", 1000 + i}});
  auto r = f.post("/v1/topics/t/messages", {{"records", recs}});
  ASSERT_EQ(r.status, 200);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(r.body["offsets"][i]["offset"], i);
  auto g = f.get("/v1/topics/t/partitions/0/messages", {{"offset", "0"}, {"max_records", "3"}});
  ASSERT_EQ(g.body["records"].size(), 3u);
  EXPECT_EQ(g.body["records"][2]["timestamp_ms"], 1002);
}

TEST(Gateway, ClientErrors) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("t", 1, 1).ok());
  auto bad64 = f.post("/v1/topics/t/messages", {{"records", {{{"value", "!!"}}}}});
  EXPECT_EQ(bad64.status, 400);
  EXPECT_EQ(bad64.body["error"], "bad_base64");
  EXPECT_TRUE(bad64.body.contains("detail"));

  auto badjson = f.call({"POST", "/v1/topics/t/messages", {}, "{not json"});
  EXPECT_EQ(badjson.status, 400);
  EXPECT_EQ(badjson.body["error"], "bad_json");

  auto unknown = f.post("/v1/topics/nope/messages", {{"records", {{{"value", b64("x")}}}}});
  EXPECT_EQ(unknown.status, 404);
  EXPECT_EQ(unknown.body["error"], "unknown_topic");

  auto big = f.call({"POST", "/v1/topics/t/messages", {}, std::string(70 * 1024, 'x')});
  EXPECT_EQ(big.status, 413);

  auto missing = f.get("/v1/topics/t/partitions/0/messages");
  EXPECT_EQ(missing.status, 400);
  EXPECT_EQ(missing.body["error"], "missing_offset");
  EXPECT_EQ(f.get("/v1/topics/t/partitions/0/messages", {{"offset", "-1"}}).status, 400);
  EXPECT_EQ(f.get("/v1/topics/t/partitions/9/messages", {{"offset", "0"}}).status, 404);
  EXPECT_EQ(f.get("/v1/topics/nope/partitions/0/messages", {{"offset", "0"}}).status, 404);
  EXPECT_EQ(f.get("/v1/nothing").status, 404);
  EXPECT_EQ(f.gw->counters().client_errors, 9u);
}

TEST(Gateway, RangeErrorCarriesEarliestOffset) {
  GatewayFixture f(1, [](BrokerConfig& b) {
    b.log.segment_max_bytes = 4096;
    b.retention_check_interval_ms = 200;
  });
  ASSERT_TRUE(f.c.create_topic("short", 1, 1, 1000).ok());
  const std::string payload(400, 'p');
  for (int i = 0; i < 40; ++i) {
    auto r = f.post("/v1/topics/short/messages", {{"records", {{{"value", b64(payload)}}}}});
    ASSERT_EQ(r.status, 200);
  }
  f.c.run_ms(3000);
  auto g = f.get("/v1/topics/short/partitions/0/messages", {{"offset", "0"}});
  ASSERT_EQ(g.status, 416) << g.body.dump();
  EXPECT_EQ(g.body["error"], "offset_out_of_range");
  const auto earliest = g.body["earliest_offset"].get<std::uint64_t>();
  EXPECT_GT(earliest, 0u);
  EXPECT_EQ(earliest, f.c.broker(0).node().log(PartitionId{"short", 0})->earliest_offset());
}

TEST(Gateway, ByteFidelityProperty) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("bytes", 1, 1).ok());
  std::mt19937_64 rng(11);
  std::vector<Bytes> sent;
  for (int i = 0; i < 200; ++i) {
    auto v = cloudlet::testing::random_bytes(rng, i == 0 ? 0 : rng() % 300);
    if (i == 1) v = Bytes(17, 0);
    sent.push_back(v);
    auto r = f.post("/v1/topics/bytes/messages", {{"records", {{{"value", base64_encode(v)}}}}});
    ASSERT_EQ(r.status, 200);
  }
  std::uint64_t off = 0;
  std::size_t idx = 0;
  while (idx < sent.size()) {
    auto g = f.get("/v1/topics/bytes/partitions/0/messages", {{"offset", std::to_string(off)}, {"max_records", "37"}});
    ASSERT_EQ(g.status, 200);
    ASSERT_FALSE(g.body["records"].empty());
    for (const auto& rec : g.body["records"]) {
      auto v = base64_decode(rec["value"].get<std::string>());
      ASSERT_TRUE(v);
      EXPECT_EQ(*v, sent[idx]) << "record " << idx;
      ++idx;
      off = rec["offset"].get<std::uint64_t>() + 1;
    }
  }
}

TEST(Gateway, RestartBetweenProduceAndFetchIsInvisible) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("t", 1, 1).ok());
  ASSERT_EQ(f.post("/v1/topics/t/messages", {{"records", {{{"value", b64("persist")}}}}}).status, 200);
  auto before = f.get("/v1/topics/t/partitions/0/messages", {{"offset", "0"}});
  f.gw = f.make_gateway(kSecret);
  auto after = f.get("/v1/topics/t/partitions/0/messages", {{"offset", "0"}});
  EXPECT_EQ(before.body, after.body);
}

TEST(Gateway, MeasurementsArePseudonymizedAndKeyed) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("noise", 4, 1).ok());
  const std::string imei = "356938035643809";
  json m = {{"device_id", imei}, {"series", "noise"}, {"value", 61.5}, {"timestamp_ms", 1700000000123},
            {"lat", 59.93}, {"lon", 30.31}, {"attributes", {{"unit", "dBA"}}}};
  auto a = f.post("/v1/measurements", m);
  auto b = f.post("/v1/measurements", m);
  ASSERT_EQ(a.status, 202) << a.body.dump();
  EXPECT_EQ(a.body["device_pseudonym"], "ac6183cea105d5d2");
  EXPECT_EQ(a.body["device_pseudonym"], b.body["device_pseudonym"]);
  EXPECT_EQ(a.body["partition"], b.body["partition"]);
  EXPECT_LT(a.body["offset"].get<std::uint64_t>(), b.body["offset"].get<std::uint64_t>());
  EXPECT_EQ(a.body["topic"], "noise");

  json other = m;
  other["device_id"] = "356938035643810";
  auto c = f.post("/v1/measurements", other);
  EXPECT_NE(c.body["device_pseudonym"], a.body["device_pseudonym"]);

  // Stored value is canonical JSON without the raw id.
  const auto p = a.body["partition"].get<std::uint32_t>();
  auto g = f.get("/v1/topics/noise/partitions/" + std::to_string(p) + "/messages", {{"offset", "0"}});
  auto raw = base64_decode(g.body["records"][0]["value"].get<std::string>());
  const std::string text(raw->begin(), raw->end());
  EXPECT_EQ(text,
            R"({"attributes":{"unit":"dBA"},"device_pseudonym":"ac6183cea105d5d2","lat":59.93,"lon":30.31,)"
            R"("series":"noise","timestamp_ms":1700000000123,"value":61.5})");
  EXPECT_EQ(text.find(imei), std::string::npos);
  auto key = base64_decode(g.body["records"][0]["key"].get<std::string>());
  EXPECT_EQ(std::string(key->begin(), key->end()), "ac6183cea105d5d2");
}

TEST(Gateway, MeasurementValidation) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("noise", 1, 1).ok());
  auto unknown = f.post("/v1/measurements", {{"device_id", "d"}, {"series", "radiation"}, {"value", 1}});
  EXPECT_EQ(unknown.status, 400);
  EXPECT_EQ(unknown.body["error"], "unknown_series");
  EXPECT_EQ(f.post("/v1/measurements", {{"device_id", "d"}, {"series", "noise"}, {"value", "loud"}}).status, 400);
  EXPECT_EQ(f.call({"POST", "/v1/measurements", {}, R"({"device_id":"d","series":"noise","value":1e999})"}).status,
            400);
  EXPECT_EQ(f.post("/v1/measurements", {{"device_id", "d"}, {"series", "noise"}, {"value", 1}, {"lat", 10}}).status,
            400);
  EXPECT_EQ(
      f.post("/v1/measurements", {{"device_id", "d"}, {"series", "noise"}, {"value", 1}, {"lat", 91}, {"lon", 0}})
          .status,
      400);
  EXPECT_EQ(f.post("/v1/measurements", {{"series", "noise"}, {"value", 1}}).status, 400);
}

TEST(Gateway, RawIdsNeverReachDisk) {
  GatewayFixture f;
  ASSERT_TRUE(f.c.create_topic("noise", 2, 1).ok());
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("35693803564" + std::to_string(3800 + i));
  for (const auto& id : ids) {
    ASSERT_EQ(f.post("/v1/measurements", {{"device_id", id}, {"series", "noise"}, {"value", 1.0}}).status, 202);
  }
  f.c.broker(0).stop();
  for (const auto& entry : std::filesystem::recursive_directory_iterator(f.c.dir.path())) {
    if (!entry.is_regular_file()) continue;
    const auto content = read_file(entry.path());
    for (const auto& id : ids) EXPECT_EQ(content.find(id), std::string::npos) << entry.path();
  }
}

TEST(Gateway, StatsCountAndMarkUnreachableBrokers) {
  GatewayFixture f(2);
  auto fresh = f.get("/v1/stats");
  ASSERT_EQ(fresh.status, 200);
  EXPECT_EQ(fresh.body["gateway"]["measurements"], 0);
  EXPECT_EQ(fresh.body["brokers"]["0"]["produce_requests"], 0);
  EXPECT_EQ(fresh.body["brokers"]["1"]["fetch_requests"], 0);

  ASSERT_TRUE(f.c.create_topic("noise", 2, 1).ok());
  for (int i = 0; i < 7; ++i) {
    f.post("/v1/measurements", {{"device_id", "dev" + std::to_string(i)}, {"series", "noise"}, {"value", i}});
  }
  auto s = f.get("/v1/stats", {{"topic", "noise"}});
  EXPECT_EQ(s.body["gateway"]["measurements"], 7);
  const auto produced = s.body["brokers"]["0"]["produce_requests"].get<int>() +
                        s.body["brokers"]["1"]["produce_requests"].get<int>();
  EXPECT_EQ(produced, 7);

  f.c.broker(1).crash();
  auto partial = f.get("/v1/stats");
  ASSERT_EQ(partial.status, 200);
  EXPECT_EQ(partial.body["brokers"]["1"]["unreachable"], true);
  EXPECT_FALSE(partial.body["brokers"]["0"].contains("unreachable"));
}

TEST(HttpServer, ServesRealHttp) {
  cloudlet::testing::TempDir dir;
  RealExecutor exec;
  TcpTransport peers(exec);
  std::unique_ptr<BrokerNode> node;
  TcpServer broker_server(exec, [&node](protocol::Frame f, ReplyFn r) {
    node->handle(std::move(f), std::move(r), Origin::Client);
  });
  broker_server.listen("127.0.0.1:0");
  BrokerConfig bc;
  bc.data_dir = dir / "b0";
  bc.client_listen = "127.0.0.1:" + std::to_string(broker_server.port());
  node = std::make_unique<BrokerNode>(bc, exec, peers);
  exec.call([&] { node->start(); });

  TcpTransport transport(exec);
  BrokerClient client(exec, transport, {bc.client_listen});
  GatewayConfig gc;
  gc.brokers = {bc.client_listen};
  gc.pseudonym_secret = kSecret;
  gc.max_body_bytes = 4096;
  Gateway gw(gc, exec, client);
  HttpServer http(gw, exec);
  http.start("127.0.0.1:0");

  httplib::Client cli("127.0.0.1", http.port());
  std::promise<JsonResult> created;
  exec.post([&] {
    TopicConfig t;
    t.name = "web";
    client.create_topic(t, [&](JsonResult r) { created.set_value(r); });
  });
  ASSERT_TRUE(created.get_future().get().ok());

  auto res = cli.Post("/v1/topics/web/messages", R"({"records":[{"value":"aGk="}]})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["offsets"][0]["offset"], 0);

  auto get = cli.Get("/v1/topics/web/partitions/0/messages?offset=0");
  ASSERT_TRUE(get);
  EXPECT_EQ(get->status, 200);
  EXPECT_EQ(json::parse(get->body)["records"][0]["value"], "aGk=");

  auto media = cli.Post("/v1/topics/web/messages", "x", "text/plain");
  ASSERT_TRUE(media);
  EXPECT_EQ(media->status, 415);

  auto big = cli.Post("/v1/topics/web/messages", std::string(10000, 'x'), "application/json");
  ASSERT_TRUE(big);
  EXPECT_EQ(big->status, 413);
  EXPECT_EQ(json::parse(big->body)["error"], "body_too_large");

  http.stop();
  broker_server.stop(500);
  exec.call([&] { node->stop(); });
}
