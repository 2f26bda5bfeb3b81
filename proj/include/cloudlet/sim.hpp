#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>

#include "cloudlet/runtime.hpp"

namespace cloudlet::sim {

// Deterministic discrete-event scheduler. Events at equal times run in scheduling order.
class Scheduler {
 public:
  explicit Scheduler(std::int64_t start_us) : now_us_(start_us) {}

  std::int64_t now_us() const { return now_us_; }
  TimerId schedule_at(std::int64_t at_us, std::function<void()> fn);
  void cancel(TimerId id);

  // Runs the earliest event. Returns false when nothing is pending.
  bool run_next();
  // Runs every event due at or before |t_us|, then advances the clock to |t_us|.
  void run_until(std::int64_t t_us);
  // Runs until |pred| holds or |deadline_us| passes. Returns pred().
  bool run_until(const std::function<bool()>& pred, std::int64_t deadline_us);

  std::size_t pending() const { return queue_.size(); }
  std::uint64_t processed() const { return processed_; }

 private:
  struct Key {
    std::int64_t at_us;
    TimerId id;
    auto operator<=>(const Key&) const = default;
  };
  std::int64_t now_us_;
  std::map<Key, std::function<void()>> queue_;
  std::map<TimerId, Key> by_id_;
  TimerId next_id_ = 1;
  std::uint64_t processed_ = 0;
};

// A component's view of the shared virtual clock. halt() models a process crash:
// every pending timer of this executor is dropped and later ones never fire.
class SimExecutor final : public Executor {
 public:
  explicit SimExecutor(Scheduler& sched) : sched_(sched), alive_(std::make_shared<bool>(true)) {}
  ~SimExecutor() override { halt(); }

  std::int64_t now_us() const override { return sched_.now_us(); }
  TimerId schedule_after_us(std::int64_t delay_us, std::function<void()> fn) override;
  void cancel(TimerId id) override { sched_.cancel(id); }
  TimerId schedule_at_us(std::int64_t at_us, std::function<void()> fn);

  void halt();
  bool alive() const { return *alive_; }
  Scheduler& scheduler() { return sched_; }

 private:
  Scheduler& sched_;
  std::shared_ptr<bool> alive_;
  std::set<TimerId> timers_;
};

struct LinkModel {
  double one_way_latency_ms = 0.0;
  double jitter_ms = 0.0;                  // uniform +/- jitter
  std::uint64_t bandwidth_bytes_per_s = 0;  // 0 = unlimited
  double loss_probability = 0.0;           // per frame, recovered by retransmission
};

inline constexpr std::int64_t kRetransmitTimeoutUs = 200'000;

// Simulated network of named hosts grouped into tiers. Frames travel over FIFO
// links whose delay is serialization + propagation + jitter; a lost frame is
// retransmitted after kRetransmitTimeoutUs.
class Network {
 public:
  Network(Scheduler& sched, std::uint64_t seed);

  void add_host(const std::string& host, const std::string& tier);
  void set_link(const std::string& tier_a, const std::string& tier_b, const LinkModel& model);
  void set_local_link(const LinkModel& model) { local_ = model; }

  void listen(const std::string& address, const std::string& host, SimExecutor& exec, RequestHandler handler,
              std::function<void(const std::string& client_host)> on_connect = {});
  void unlisten(const std::string& address);

  std::unique_ptr<Transport> transport(const std::string& host, SimExecutor& exec);

  // Drops all frames between the two hosts (both directions) until heal().
  void cut(const std::string& host_a, const std::string& host_b);
  void heal(const std::string& host_a, const std::string& host_b);
  bool is_cut(const std::string& a, const std::string& b) const;

  std::uint64_t frames_sent() const { return frames_sent_; }
  std::uint64_t retransmissions() const { return retransmissions_; }
  std::uint64_t bytes_sent() const { return bytes_sent_; }
  Scheduler& scheduler() { return sched_; }

  // Arrival time of a frame of |bytes| sent now from |src| to |dst|, or nullopt if the path is cut.
  std::optional<std::int64_t> transmit(const std::string& src, const std::string& dst, std::size_t bytes);

 private:
  class SimTransport;
  struct Listener {
    std::string host;
    SimExecutor* exec;
    RequestHandler handler;
    std::function<void(const std::string&)> on_connect;
    std::set<std::string> seen;
    std::uint64_t incarnation;
  };

  const LinkModel& model_for(const std::string& src, const std::string& dst) const;
  double uniform01();

  Scheduler& sched_;
  std::mt19937_64 rng_;
  std::map<std::string, std::string> tier_of_;
  std::map<std::pair<std::string, std::string>, LinkModel> links_;
  LinkModel local_{0.05, 0.0, 0, 0.0};
  std::map<std::string, std::shared_ptr<Listener>> listeners_;
  std::set<std::pair<std::string, std::string>> cuts_;
  std::map<std::pair<std::string, std::string>, std::int64_t> link_free_at_;
  std::map<std::pair<std::string, std::string>, std::int64_t> last_arrival_;
  std::uint64_t incarnations_ = 0;
  std::uint64_t frames_sent_ = 0;
  std::uint64_t retransmissions_ = 0;
  std::uint64_t bytes_sent_ = 0;
};

}  // namespace cloudlet::sim
