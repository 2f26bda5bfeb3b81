#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <future>

#include "cloudlet/broker.hpp"
#include "cloudlet/client.hpp"
#include "cloudlet/tcp.hpp"
#include "test_util.hpp"

using namespace cloudlet;
using cloudlet::testing::TempDir;

namespace {

CallResult call_sync(Transport& t, const std::string& address, protocol::Frame f, std::int64_t timeout_ms) {
  std::promise<CallResult> p;
  t.call(address, std::move(f), timeout_ms, [&p](CallResult r) { p.set_value(std::move(r)); });
  return p.get_future().get();
}

std::string local(std::uint16_t port) { return "127.0.0.1:" + std::to_string(port); }

RequestHandler echo() {
  return [](protocol::Frame f, ReplyFn reply) {
    reply(protocol::response_frame(f.correlation_id, Errc::Ok, {}, f.payload));
  };
}

}  // namespace

TEST(HostPort, Parse) {
  auto hp = HostPort::parse("example.org:9092");
  EXPECT_EQ(hp.host, "example.org");
  EXPECT_EQ(hp.port, 9092);
  EXPECT_EQ(HostPort::parse("[::1]:80").host, "::1");
  EXPECT_THROW(HostPort::parse("nohost"), Error);
  EXPECT_THROW(HostPort::parse("h:99999"), Error);
  EXPECT_THROW(HostPort::parse("h:12x"), Error);
}

TEST(Tcp, RequestResponseRoundTrip) {
  RealExecutor exec;
  TcpServer server(exec, echo());
  server.listen("127.0.0.1:0");
  TcpTransport transport(exec);
  for (int i = 0; i < 20; ++i) {
    Bytes payload{static_cast<std::uint8_t>(i), 0, 255};
    auto r = call_sync(transport, local(server.port()),
                       protocol::request_frame(protocol::MsgType::Metadata, payload), 2000);
    ASSERT_TRUE(r.ok()) << r.error;
    auto resp = protocol::decode_response(r.frame.payload);
    EXPECT_EQ(resp.body, payload);
  }
}

TEST(Tcp, ConcurrentCallsAllComplete) {
  RealExecutor exec;
  TcpServer server(exec, echo());
  server.listen("127.0.0.1:0");
  TcpTransport transport(exec);
  std::mutex mu;
  std::condition_variable cv;
  int done = 0, ok = 0;
  for (int i = 0; i < 200; ++i) {
    transport.call(local(server.port()), protocol::request_frame(protocol::MsgType::Metadata, Bytes(i % 50)), 5000,
                   [&](CallResult r) {
                     std::lock_guard lock(mu);
                     ++done;
                     if (r.ok()) ++ok;
                     cv.notify_all();
                   });
  }
  std::unique_lock lock(mu);
  ASSERT_TRUE(cv.wait_for(lock, std::chrono::seconds(20), [&] { return done == 200; }));
  EXPECT_EQ(ok, 200);
}

TEST(Tcp, SecondBindFails) {
  RealExecutor exec;
  TcpServer a(exec, echo());
  a.listen("127.0.0.1:0");
  TcpServer b(exec, echo());
  try {
    b.listen(local(a.port()));
    FAIL() << "expected BindFailed";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::BindFailed);
  }
}

TEST(Tcp, UnreachableAndSilentPeers) {
  RealExecutor exec;
  TcpTransport transport(exec);
  std::uint16_t dead_port;
  {
    TcpServer s(exec, echo());
    s.listen("127.0.0.1:0");
    dead_port = s.port();
  }
  auto r = call_sync(transport, local(dead_port), protocol::request_frame(protocol::MsgType::Metadata, {}), 1000);
  EXPECT_EQ(r.status, Errc::Unavailable);

  TcpServer silent(exec, [](protocol::Frame, ReplyFn) {});
  silent.listen("127.0.0.1:0");
  auto t = call_sync(transport, local(silent.port()), protocol::request_frame(protocol::MsgType::Metadata, {}), 300);
  EXPECT_EQ(t.status, Errc::RequestTimeout);
  silent.stop(100);
}

TEST(Tcp, MalformedFrameClosesOnlyThatConnection) {
  RealExecutor exec;
  TcpServer server(exec, echo());
  server.listen("127.0.0.1:0");

  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(server.port());
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  const std::uint8_t garbage[] = {0, 0, 0, 9, 0x7f, 1, 2, 3, 4, 5, 6, 7, 8};
  ASSERT_EQ(::send(fd, garbage, sizeof garbage, 0), static_cast<ssize_t>(sizeof garbage));
  std::uint8_t buf[16];
  EXPECT_EQ(::recv(fd, buf, sizeof buf, 0), 0);  // server closed it
  ::close(fd);

  TcpTransport transport(exec);
  auto r = call_sync(transport, local(server.port()), protocol::request_frame(protocol::MsgType::Metadata, {}), 2000);
  EXPECT_TRUE(r.ok());
}

TEST(Tcp, BrokerServesClientOverSockets) {
  TempDir dir;
  RealExecutor exec;
  TcpTransport peers(exec);
  BrokerConfig cfg;
  cfg.broker_id = 0;
  cfg.data_dir = dir / "b0";
  std::unique_ptr<BrokerNode> node;
  TcpServer server(exec, [&node](protocol::Frame f, ReplyFn r) { node->handle(std::move(f), std::move(r), Origin::Client); },
                   {[&node] { node->client_connected(); }, [&node] { node->client_disconnected(); }});
  server.listen("127.0.0.1:0");
  cfg.client_listen = local(server.port());  // advertised in metadata
  node = std::make_unique<BrokerNode>(cfg, exec, peers);
  exec.call([&] { node->start(); });

  TcpTransport transport(exec);
  BrokerClient client(exec, transport, {local(server.port())});
  std::promise<JsonResult> created;
  exec.post([&] {
    TopicConfig t;
    t.name = "tcp";
    t.partition_count = 2;
    client.create_topic(t, [&](JsonResult r) { created.set_value(std::move(r)); });
  });
  ASSERT_TRUE(created.get_future().get().ok());

  std::promise<ProduceResult> produced;
  exec.post([&] {
    std::vector<LogEntry> es(3);
    es[0].value = {'a'};
    es[1].value = {};
    es[2].value = {0, 1, 2};
    client.produce("tcp", 1u, es, protocol::AckMode::AllIsr, [&](ProduceResult r) { produced.set_value(std::move(r)); });
  });
  auto p = produced.get_future().get();
  ASSERT_TRUE(p.ok()) << p.message;
  EXPECT_EQ(p.offsets.back().offset, 2u);

  std::promise<FetchResult> fetched;
  exec.post([&] { client.fetch("tcp", 1, 0, 1u << 20, 0, [&](FetchResult r) { fetched.set_value(std::move(r)); }); });
  auto f = fetched.get_future().get();
  ASSERT_TRUE(f.ok());
  ASSERT_EQ(f.records.size(), 3u);
  EXPECT_EQ(f.records[2].value, (Bytes{0, 1, 2}));
  EXPECT_EQ(exec.call([&] { return node->stats().connected_clients(); }), 1u);

  server.stop(1000);
  exec.call([&] { node->stop(); });
}
