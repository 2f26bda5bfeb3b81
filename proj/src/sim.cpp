#include "cloudlet/sim.hpp"

#include <algorithm>
#include <cmath>

namespace cloudlet::sim {

TimerId Scheduler::schedule_at(std::int64_t at_us, std::function<void()> fn) {
  const TimerId id = next_id_++;
  const Key key{std::max(at_us, now_us_), id};
  queue_.emplace(key, std::move(fn));
  by_id_.emplace(id, key);
  return id;
}

void Scheduler::cancel(TimerId id) {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return;
  queue_.erase(it->second);
  by_id_.erase(it);
}

bool Scheduler::run_next() {
  if (queue_.empty()) return false;
  auto it = queue_.begin();
  now_us_ = it->first.at_us;
  auto fn = std::move(it->second);
  by_id_.erase(it->first.id);
  queue_.erase(it);
  ++processed_;
  fn();
  return true;
}

void Scheduler::run_until(std::int64_t t_us) {
  while (!queue_.empty() && queue_.begin()->first.at_us <= t_us) run_next();
  now_us_ = std::max(now_us_, t_us);
}

bool Scheduler::run_until(const std::function<bool()>& pred, std::int64_t deadline_us) {
  while (!pred()) {
    if (queue_.empty() || queue_.begin()->first.at_us > deadline_us) {
      now_us_ = std::max(now_us_, deadline_us);
      return pred();
    }
    run_next();
  }
  return true;
}

TimerId SimExecutor::schedule_after_us(std::int64_t delay_us, std::function<void()> fn) {
  return schedule_at_us(sched_.now_us() + std::max<std::int64_t>(0, delay_us), std::move(fn));
}

TimerId SimExecutor::schedule_at_us(std::int64_t at_us, std::function<void()> fn) {
  if (!*alive_) return 0;
  // The id is only known after scheduling, so the wrapper looks it up through a shared slot.
  auto slot = std::make_shared<TimerId>(0);
  const auto id = sched_.schedule_at(at_us, [this, alive = alive_, slot, fn = std::move(fn)] {
    if (!*alive) return;
    timers_.erase(*slot);
    fn();
  });
  *slot = id;
  timers_.insert(id);
  return id;
}

void SimExecutor::halt() {
  if (!*alive_) return;
  *alive_ = false;
  for (auto id : timers_) sched_.cancel(id);
  timers_.clear();
}

Network::Network(Scheduler& sched, std::uint64_t seed) : sched_(sched), rng_(seed) {}

void Network::add_host(const std::string& host, const std::string& tier) { tier_of_[host] = tier; }

void Network::set_link(const std::string& tier_a, const std::string& tier_b, const LinkModel& model) {
  links_[{tier_a, tier_b}] = model;
  links_[{tier_b, tier_a}] = model;
}

const LinkModel& Network::model_for(const std::string& src, const std::string& dst) const {
  if (src == dst) return local_;
  auto a = tier_of_.find(src);
  auto b = tier_of_.find(dst);
  if (a == tier_of_.end() || b == tier_of_.end()) return local_;
  auto it = links_.find({a->second, b->second});
  return it == links_.end() ? local_ : it->second;
}

double Network::uniform01() { return static_cast<double>(rng_() >> 11) * (1.0 / 9007199254740992.0); }

void Network::cut(const std::string& a, const std::string& b) {
  cuts_.insert({a, b});
  cuts_.insert({b, a});
}

void Network::heal(const std::string& a, const std::string& b) {
  cuts_.erase({a, b});
  cuts_.erase({b, a});
}

bool Network::is_cut(const std::string& a, const std::string& b) const { return cuts_.contains({a, b}); }

std::optional<std::int64_t> Network::transmit(const std::string& src, const std::string& dst, std::size_t bytes) {
  if (is_cut(src, dst)) return std::nullopt;
  const auto& m = model_for(src, dst);
  const auto now = sched_.now_us();
  auto& free_at = link_free_at_[{src, dst}];
  const auto depart = std::max(now, free_at);
  std::int64_t tx_us = 0;
  if (m.bandwidth_bytes_per_s > 0) {
    tx_us = static_cast<std::int64_t>(
        std::ceil(static_cast<double>(bytes) * 1e6 / static_cast<double>(m.bandwidth_bytes_per_s)));
  }
  free_at = depart + tx_us;
  std::int64_t extra = 0;
  if (m.loss_probability > 0) {
    for (int attempt = 0; attempt < 64 && uniform01() < m.loss_probability; ++attempt) {
      extra += kRetransmitTimeoutUs;
      ++retransmissions_;
    }
  }
  double delay_ms = m.one_way_latency_ms;
  if (m.jitter_ms > 0) delay_ms += (uniform01() * 2.0 - 1.0) * m.jitter_ms;
  delay_ms = std::max(0.0, delay_ms);
  auto arrival = depart + tx_us + static_cast<std::int64_t>(std::llround(delay_ms * 1000.0)) + extra;
  auto& last = last_arrival_[{src, dst}];
  arrival = std::max(arrival, last);
  last = arrival;
  ++frames_sent_;
  bytes_sent_ += bytes;
  return arrival;
}

void Network::listen(const std::string& address, const std::string& host, SimExecutor& exec, RequestHandler handler,
                     std::function<void(const std::string&)> on_connect) {
  auto l = std::make_shared<Listener>();
  l->host = host;
  l->exec = &exec;
  l->handler = std::move(handler);
  l->on_connect = std::move(on_connect);
  l->incarnation = ++incarnations_;
  listeners_[address] = std::move(l);
}

void Network::unlisten(const std::string& address) { listeners_.erase(address); }

class Network::SimTransport final : public Transport {
 public:
  SimTransport(Network& net, std::string host, SimExecutor& exec) : net_(net), host_(std::move(host)), exec_(exec) {}

  void call(const std::string& address, protocol::Frame request, std::int64_t timeout_ms,
            std::function<void(CallResult)> done) override {
    request.correlation_id = ++next_correlation_;
    struct State {
      bool finished = false;
      TimerId timer = 0;
      std::function<void(CallResult)> done;
    };
    auto st = std::make_shared<State>();
    st->done = std::move(done);
    auto finish = [st](CallResult r) {
      if (st->finished) return;
      st->finished = true;
      st->done(std::move(r));
    };
    st->timer = exec_.schedule_after_ms(timeout_ms, [finish, address] {
      finish(CallResult{Errc::RequestTimeout, "request to " + address + " timed out", {}});
    });

    auto it = net_.listeners_.find(address);
    if (it == net_.listeners_.end()) {
      // Nothing bound: the connection attempt is refused after one round trip.
      const auto& m = net_.model_for(host_, host_);
      exec_.schedule_after_us(static_cast<std::int64_t>(2 * m.one_way_latency_ms * 1000) + 1,
                              [finish, st, this, address] {
                                exec_.cancel(st->timer);
                                finish(CallResult{Errc::Unavailable, "connection to " + address + " refused", {}});
                              });
      return;
    }
    std::weak_ptr<Listener> weak = it->second;
    const auto server_host = it->second->host;
    const auto size = protocol::kFrameHeaderBytes + request.payload.size();
    auto arrival = net_.transmit(host_, server_host, size);
    if (!arrival) return;  // dropped; the timeout fires
    auto& sched = net_.sched_;
    // The caller may be gone by the time this runs; only touch |this| while |alive| holds.
    sched.schedule_at(*arrival, [this, weak, request = std::move(request), finish, st, server_host,
                                 client_host = host_, alive = exec_alive()]() mutable {
      auto listener = weak.lock();
      if (!listener || !listener->exec->alive()) return;
      if (listener->seen.insert(client_host).second && listener->on_connect) listener->on_connect(client_host);
      const auto incarnation = listener->incarnation;
      const auto corr = request.correlation_id;
      auto reply = [this, weak, finish, st, server_host, incarnation, corr, alive](protocol::Frame response) {
        auto l = weak.lock();
        if (!l || l->incarnation != incarnation || !*alive) return;
        response.correlation_id = corr;
        auto back = net_.transmit(server_host, host_, protocol::kFrameHeaderBytes + response.payload.size());
        if (!back) return;
        exec_.schedule_at_us(*back, [this, finish, st, alive, response = std::move(response)]() mutable {
          if (st->finished || !*alive) return;
          exec_.cancel(st->timer);
          finish(CallResult{Errc::Ok, {}, std::move(response)});
        });
      };
      listener->handler(std::move(request), std::move(reply));
    });
  }

 private:
  // Guards replies after this transport's owner crashed.
  std::shared_ptr<bool> exec_alive() {
    if (!alive_) alive_ = std::make_shared<bool>(true);
    return alive_;
  }

 public:
  ~SimTransport() override {
    if (alive_) *alive_ = false;
  }

 private:
  Network& net_;
  std::string host_;
  SimExecutor& exec_;
  std::uint32_t next_correlation_ = 0;
  std::shared_ptr<bool> alive_;
};

std::unique_ptr<Transport> Network::transport(const std::string& host, SimExecutor& exec) {
  return std::make_unique<SimTransport>(*this, host, exec);
}

}  // namespace cloudlet::sim
