#include "cloudlet/tcp.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <future>

#include "cloudlet/error.hpp"

namespace cloudlet {

namespace {

using Clock = std::chrono::steady_clock;

enum class IoStatus { Ok, Closed, Timeout, Error };

IoStatus write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const auto w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoStatus::Timeout;
      return IoStatus::Error;
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
  return IoStatus::Ok;
}

IoStatus read_all(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const auto r = ::recv(fd, p, n, 0);
    if (r == 0) return IoStatus::Closed;
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoStatus::Timeout;
      return IoStatus::Error;
    }
    p += r;
    n -= static_cast<std::size_t>(r);
  }
  return IoStatus::Ok;
}

// Reads one frame. Throws Errc::Malformed for a bad header.
IoStatus read_frame(int fd, protocol::Frame& out) {
  Bytes buf(4);
  auto st = read_all(fd, buf.data(), 4);
  if (st != IoStatus::Ok) return st;
  const std::uint32_t total = (std::uint32_t{buf[0]} << 24) | (std::uint32_t{buf[1]} << 16) |
                              (std::uint32_t{buf[2]} << 8) | std::uint32_t{buf[3]};
  if (total < 5 || total > protocol::kMaxFrameBytes) throw Error(Errc::Malformed, "bad frame length");
  buf.resize(4 + total);
  st = read_all(fd, buf.data() + 4, total);
  if (st != IoStatus::Ok) return st;
  std::size_t consumed = 0;
  auto f = protocol::decode_frame(buf, consumed);
  if (!f) throw Error(Errc::Malformed, "short frame");
  out = std::move(*f);
  return IoStatus::Ok;
}

void set_timeouts(int fd, std::int64_t timeout_ms) {
  timeval tv{};
  timeout_ms = std::max<std::int64_t>(timeout_ms, 1);
  tv.tv_sec = timeout_ms / 1000;
  tv.tv_usec = static_cast<suseconds_t>((timeout_ms % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

addrinfo* resolve(const HostPort& hp, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port = std::to_string(hp.port);
  const char* host = hp.host.empty() ? nullptr : hp.host.c_str();
  if (::getaddrinfo(host, port.c_str(), &hints, &res) != 0) return nullptr;
  return res;
}

int connect_with_timeout(const std::string& address, std::int64_t timeout_ms, std::string& error) {
  HostPort hp;
  try {
    hp = HostPort::parse(address);
  } catch (const Error& e) {
    error = e.what();
    return -1;
  }
  addrinfo* res = resolve(hp, false);
  if (!res) {
    error = "cannot resolve " + address;
    return -1;
  }
  int fd = -1;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    const int flags = ::fcntl(fd, F_GETFL);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      pollfd pfd{fd, POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(std::max<std::int64_t>(timeout_ms, 1)));
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        if (rc == 0) errno = ETIMEDOUT;
        rc = -1;
      }
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, flags);
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      break;
    }
    error = "connect to " + address + ": " + std::strerror(errno);
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  return fd;
}

}  // namespace

HostPort HostPort::parse(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::ConfigError, "address must be host:port: " + address);
  HostPort hp;
  hp.host = address.substr(0, colon);
  if (hp.host.size() >= 2 && hp.host.front() == '[' && hp.host.back() == ']') hp.host = hp.host.substr(1, hp.host.size() - 2);
  const auto port = address.substr(colon + 1);
  try {
    std::size_t used = 0;
    const auto v = std::stoul(port, &used);
    if (used != port.size() || v > 65535) throw std::out_of_range("port");
    hp.port = static_cast<std::uint16_t>(v);
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, "bad port in address " + address);
  }
  return hp;
}

// ---- server ----

struct TcpServer::Conn {
  int fd = -1;
  std::thread thread;
  std::atomic<bool> done{false};
};

TcpServer::TcpServer(Executor& exec, RequestHandler handler, Hooks hooks)
    : exec_(exec), handler_(std::move(handler)), hooks_(std::move(hooks)) {}

TcpServer::~TcpServer() { stop(0); }

void TcpServer::listen(const std::string& address) {
  const auto hp = HostPort::parse(address);
  addrinfo* res = resolve(hp, true);
  if (!res) throw Error(Errc::BindFailed, "cannot resolve " + address);
  std::string error = "no usable address";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 128) == 0) {
      listen_fd_ = fd;
      break;
    }
    error = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (listen_fd_ < 0) throw Error(Errc::BindFailed, "cannot listen on " + address + ": " + error);

  sockaddr_storage ss{};
  socklen_t len = sizeof ss;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&ss), &len);
  port_ = ntohs(ss.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port
                                         : reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

void TcpServer::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      break;  // listener shut down
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto conn = std::make_shared<Conn>();
    conn->fd = fd;
    std::lock_guard lock(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    for (auto it = conns_.begin(); it != conns_.end();) {
      if ((*it)->done) {
        (*it)->thread.join();
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
    conns_.insert(conn);
    conn->thread = std::thread([this, conn] { serve(conn); });
  }
}

void TcpServer::serve(std::shared_ptr<Conn> conn) {
  if (hooks_.connected) exec_.post(hooks_.connected);
  for (;;) {
    protocol::Frame request;
    try {
      if (read_frame(conn->fd, request) != IoStatus::Ok) break;
    } catch (const Error&) {
      break;  // malformed: drop the connection
    }
    {
      std::lock_guard lock(mu_);
      if (stopping_) break;
      ++in_flight_;
    }
    auto promise = std::make_shared<std::promise<protocol::Frame>>();
    auto answered = std::make_shared<std::atomic<bool>>(false);
    auto future = promise->get_future();
    exec_.post([this, request = std::move(request), promise, answered]() mutable {
      handler_(std::move(request), [promise, answered](protocol::Frame response) {
        if (!answered->exchange(true)) promise->set_value(std::move(response));
      });
    });
    bool ok = false;
    while (true) {
      if (future.wait_for(std::chrono::milliseconds(50)) == std::future_status::ready) {
        const auto bytes = protocol::encode_frame(future.get());
        ok = write_all(conn->fd, bytes.data(), bytes.size()) == IoStatus::Ok;
        break;
      }
      std::lock_guard lock(mu_);
      if (stopping_ && listen_fd_ < 0) break;  // drain deadline passed
    }
    {
      std::lock_guard lock(mu_);
      --in_flight_;
    }
    cv_.notify_all();
    if (!ok) break;
  }
  {
    std::lock_guard lock(mu_);
    ::shutdown(conn->fd, SHUT_RDWR);
    ::close(conn->fd);
    conn->fd = -1;
  }
  if (hooks_.disconnected) exec_.post(hooks_.disconnected);
  conn->done = true;
}

void TcpServer::stop(std::int64_t drain_ms) {
  if (stopping_.exchange(true)) {
    if (acceptor_.joinable()) acceptor_.join();
    return;
  }
  if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
  if (acceptor_.joinable()) acceptor_.join();
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, std::chrono::milliseconds(drain_ms), [this] { return in_flight_ == 0; });
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
  for (auto& c : conns_) {
    if (c->fd >= 0) ::shutdown(c->fd, SHUT_RDWR);
  }
  auto conns = std::move(conns_);
  conns_.clear();
  lock.unlock();
  for (auto& c : conns) {
    if (c->thread.joinable()) c->thread.join();
  }
}

// ---- transport ----

TcpTransport::TcpTransport(Executor& exec, std::size_t max_workers) : exec_(exec), max_workers_(max_workers) {}

TcpTransport::~TcpTransport() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
    for (int fd : busy_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  cv_.notify_all();
  for (auto& t : workers_) t.join();
  for (auto& [_, fd] : idle_conns_) ::close(fd);
}

void TcpTransport::call(const std::string& address, protocol::Frame request, std::int64_t timeout_ms,
                        std::function<void(CallResult)> done) {
  std::lock_guard lock(mu_);
  if (stopping_) return;
  jobs_.push_back(Job{address, std::move(request), timeout_ms, std::move(done)});
  if (idle_ == 0 && workers_.size() < max_workers_) {
    workers_.emplace_back([this] { worker(); });
  } else {
    cv_.notify_one();
  }
}

void TcpTransport::worker() {
  std::unique_lock lock(mu_);
  for (;;) {
    ++idle_;
    cv_.wait(lock, [this] { return stopping_ || !jobs_.empty(); });
    --idle_;
    if (stopping_) return;
    auto job = std::move(jobs_.front());
    jobs_.pop_front();
    job.request.correlation_id = ++next_correlation_;
    lock.unlock();
    auto result = perform(job);
    exec_.post([done = std::move(job.done), result = std::move(result)]() mutable { done(std::move(result)); });
    lock.lock();
  }
}

int TcpTransport::checkout(const std::string& address, std::int64_t timeout_ms, std::string& error) {
  {
    std::lock_guard lock(mu_);
    auto it = idle_conns_.find(address);
    if (it != idle_conns_.end()) {
      const int fd = it->second;
      idle_conns_.erase(it);
      busy_fds_.insert(fd);
      return fd;
    }
  }
  const int fd = connect_with_timeout(address, timeout_ms, error);
  if (fd >= 0) {
    std::lock_guard lock(mu_);
    busy_fds_.insert(fd);
  }
  return fd;
}

void TcpTransport::checkin(const std::string& address, int fd) {
  std::lock_guard lock(mu_);
  busy_fds_.erase(fd);
  if (stopping_) {
    ::close(fd);
    return;
  }
  idle_conns_.emplace(address, fd);
}

CallResult TcpTransport::perform(Job& job) {
  const auto deadline = Clock::now() + std::chrono::milliseconds(job.timeout_ms);
  const auto bytes = protocol::encode_frame(job.request);
  auto remaining = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  };
  auto discard = [this](int fd) {
    {
      std::lock_guard lock(mu_);
      busy_fds_.erase(fd);
    }
    ::close(fd);
  };
  // A pooled connection may have been closed by the server while idle; in that
  // case nothing was processed and one fresh attempt is safe.
  for (int attempt = 0; attempt < 2; ++attempt) {
    bool pooled = false;
    {
      std::lock_guard lock(mu_);
      pooled = idle_conns_.count(job.address) > 0;
    }
    std::string error;
    const int fd = checkout(job.address, remaining(), error);
    if (fd < 0) return CallResult{Errc::Unavailable, error, {}};
    set_timeouts(fd, remaining());
    auto st = write_all(fd, bytes.data(), bytes.size());
    protocol::Frame response;
    if (st == IoStatus::Ok) {
      try {
        st = read_frame(fd, response);
      } catch (const Error& e) {
        discard(fd);
        return CallResult{Errc::Unavailable, e.what(), {}};
      }
    }
    if (st == IoStatus::Ok) {
      if (response.correlation_id != job.request.correlation_id) {
        discard(fd);
        return CallResult{Errc::Unavailable, "correlation id mismatch", {}};
      }
      checkin(job.address, fd);
      return CallResult{Errc::Ok, {}, std::move(response)};
    }
    discard(fd);
    if (st == IoStatus::Timeout) return CallResult{Errc::RequestTimeout, "request to " + job.address + " timed out", {}};
    if (!pooled || remaining() <= 0) break;
  }
  return CallResult{Errc::Unavailable, "connection to " + job.address + " lost", {}};
}

}  // namespace cloudlet
