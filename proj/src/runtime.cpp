#include "cloudlet/runtime.hpp"

#include <chrono>

namespace cloudlet {

RealExecutor::RealExecutor() : thread_([this] { run(); }) {}

RealExecutor::~RealExecutor() { stop(); }

std::int64_t RealExecutor::now_us() const {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

namespace {

std::int64_t steady_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

TimerId RealExecutor::schedule_after_us(std::int64_t delay_us, std::function<void()> fn) {
  std::lock_guard lock(mu_);
  const TimerId id = next_id_++;
  const Key key{steady_us() + std::max<std::int64_t>(0, delay_us), id};
  queue_.emplace(key, std::move(fn));
  by_id_.emplace(id, key);
  cv_.notify_one();
  return id;
}

void RealExecutor::cancel(TimerId id) {
  std::lock_guard lock(mu_);
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return;
  queue_.erase(it->second);
  by_id_.erase(it);
}

void RealExecutor::stop() {
  {
    std::lock_guard lock(mu_);
    if (stopping_) {
      if (!thread_.joinable()) return;
    }
    stopping_ = true;
    cv_.notify_all();
  }
  if (thread_.joinable() && !on_loop_thread()) thread_.join();
}

void RealExecutor::run() {
  std::unique_lock lock(mu_);
  while (!stopping_) {
    if (queue_.empty()) {
      cv_.wait(lock);
      continue;
    }
    auto it = queue_.begin();
    const auto now = steady_us();
    if (it->first.deadline_us > now) {
      cv_.wait_for(lock, std::chrono::microseconds(it->first.deadline_us - now));
      continue;
    }
    auto fn = std::move(it->second);
    by_id_.erase(it->first.id);
    queue_.erase(it);
    lock.unlock();
    fn();
    lock.lock();
  }
}

protocol::Response to_response(const CallResult& r) {
  if (!r.ok()) return protocol::Response{r.status, r.error, {}};
  if (r.frame.type != protocol::MsgType::Response) {
    return protocol::Response{Errc::Malformed, "expected a response frame", {}};
  }
  try {
    return protocol::decode_response(r.frame.payload);
  } catch (const Error& e) {
    return protocol::Response{Errc::Malformed, e.what(), {}};
  }
}

}  // namespace cloudlet
