#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "cloudlet/runtime.hpp"

namespace cloudlet {

struct HostPort {
  std::string host;
  std::uint16_t port = 0;

  // "host:port"; throws ConfigError.
  static HostPort parse(const std::string& address);
};

// Serves the binary protocol on a TCP port. Each connection handles one request
// at a time: the frame is posted to |exec|, and the reply is written back once
// the handler answers. A malformed frame closes the connection.
class TcpServer {
 public:
  struct Hooks {
    std::function<void()> connected;
    std::function<void()> disconnected;
  };

  TcpServer(Executor& exec, RequestHandler handler, Hooks hooks = {});
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  // Throws BindFailed. Port 0 picks an ephemeral port; see port().
  void listen(const std::string& address);
  std::uint16_t port() const { return port_; }

  // Stops accepting, waits up to |drain_ms| for in-flight requests, then closes everything.
  void stop(std::int64_t drain_ms = 5000);

 private:
  struct Conn;
  void accept_loop();
  void serve(std::shared_ptr<Conn> conn);

  Executor& exec_;
  RequestHandler handler_;
  Hooks hooks_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::set<std::shared_ptr<Conn>> conns_;
  std::vector<std::thread> threads_;
  int in_flight_ = 0;
};

// Client side of the binary protocol over TCP. Calls run on a small worker pool
// with one pooled connection per in-flight call; completions are posted to |exec|.
class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(Executor& exec, std::size_t max_workers = 64);
  ~TcpTransport() override;

  void call(const std::string& address, protocol::Frame request, std::int64_t timeout_ms,
            std::function<void(CallResult)> done) override;

 private:
  struct Job {
    std::string address;
    protocol::Frame request;
    std::int64_t timeout_ms;
    std::function<void(CallResult)> done;
  };
  void worker();
  CallResult perform(Job& job);
  int checkout(const std::string& address, std::int64_t timeout_ms, std::string& error);
  void checkin(const std::string& address, int fd);

  Executor& exec_;
  std::size_t max_workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Job> jobs_;
  std::vector<std::thread> workers_;
  std::size_t idle_ = 0;
  bool stopping_ = false;
  std::multimap<std::string, int> idle_conns_;
  std::set<int> busy_fds_;
  std::uint32_t next_correlation_ = 0;
};

}  // namespace cloudlet
