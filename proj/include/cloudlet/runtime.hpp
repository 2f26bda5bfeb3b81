#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <type_traits>

#include "cloudlet/protocol.hpp"

namespace cloudlet {

using TimerId = std::uint64_t;

// Single-threaded event loop with timers. All component logic runs on one of
// these, so components never see concurrent callbacks. The simulator swaps in
// a virtual clock; the CLI uses RealExecutor.
class Executor {
 public:
  virtual ~Executor() = default;

  // Microseconds since the Unix epoch.
  virtual std::int64_t now_us() const = 0;
  std::int64_t now_ms() const { return now_us() / 1000; }

  virtual TimerId schedule_after_us(std::int64_t delay_us, std::function<void()> fn) = 0;
  virtual void cancel(TimerId id) = 0;

  TimerId schedule_after_ms(std::int64_t delay_ms, std::function<void()> fn) {
    return schedule_after_us(delay_ms * 1000, std::move(fn));
  }
  void post(std::function<void()> fn) { schedule_after_us(0, std::move(fn)); }
};

class RealExecutor final : public Executor {
 public:
  RealExecutor();
  ~RealExecutor() override;

  std::int64_t now_us() const override;
  TimerId schedule_after_us(std::int64_t delay_us, std::function<void()> fn) override;
  void cancel(TimerId id) override;

  // Runs |fn| on the loop thread and waits for its result. Must not be called from the loop thread.
  template <typename F>
  auto call(F&& fn) -> std::invoke_result_t<F> {
    using R = std::invoke_result_t<F>;
    std::packaged_task<R()> task(std::forward<F>(fn));
    auto fut = task.get_future();
    post([&task] { task(); });
    return fut.get();
  }

  bool on_loop_thread() const { return std::this_thread::get_id() == thread_.get_id(); }
  void stop();

 private:
  void run();

  struct Key {
    std::int64_t deadline_us;
    TimerId id;
    auto operator<=>(const Key&) const = default;
  };

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<Key, std::function<void()>> queue_;
  std::map<TimerId, Key> by_id_;
  TimerId next_id_ = 1;
  bool stopping_ = false;
  std::thread thread_;
};

struct CallResult {
  Errc status = Errc::Ok;  // transport-level outcome: Ok, Unavailable or RequestTimeout
  std::string error;
  protocol::Frame frame;

  bool ok() const { return status == Errc::Ok; }
};

using ReplyFn = std::function<void(protocol::Frame)>;
using RequestHandler = std::function<void(protocol::Frame request, ReplyFn reply)>;

// Request/response messaging between components. |done| runs on the caller's executor.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void call(const std::string& address, protocol::Frame request, std::int64_t timeout_ms,
                    std::function<void(CallResult)> done) = 0;
};

// Unwraps a transport result into a protocol response, folding transport failures in.
protocol::Response to_response(const CallResult& r);

}  // namespace cloudlet
