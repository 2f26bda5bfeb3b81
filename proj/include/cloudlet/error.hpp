#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cloudlet {

// Error codes double as wire status codes (0 is success).
enum class Errc : std::uint16_t {
  Ok = 0,
  StorageFull = 1,
  LogClosed = 2,
  OffsetOutOfRange = 3,
  CorruptRecord = 4,
  UnrecoverableLog = 5,
  TopicExists = 6,
  InvalidConfig = 7,
  InsufficientBrokers = 8,
  UnknownTopic = 9,
  UnknownTopicOrPartition = 10,
  NotLeader = 11,
  RequestTimeout = 12,
  FencedEpoch = 13,
  NoViableLeader = 14,
  DataDirLocked = 15,
  BindFailed = 16,
  MessageTooLarge = 17,
  DecodeError = 18,
  UnknownSeries = 19,
  ConfigError = 20,
  ScenarioError = 21,
  Unavailable = 22,
  Io = 23,
  Malformed = 24,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Raised when a consumer position falls outside [earliest, next].
class OffsetOutOfRangeError : public Error {
 public:
  OffsetOutOfRangeError(std::uint64_t requested, std::uint64_t earliest, std::uint64_t next)
      : Error(Errc::OffsetOutOfRange,
              "offset " + std::to_string(requested) + " out of range [" + std::to_string(earliest) + ", " +
                  std::to_string(next) + "]"),
        requested_(requested),
        earliest_(earliest),
        next_(next) {}

  std::uint64_t requested() const noexcept { return requested_; }
  std::uint64_t earliest_offset() const noexcept { return earliest_; }
  std::uint64_t next_offset() const noexcept { return next_; }

 private:
  std::uint64_t requested_;
  std::uint64_t earliest_;
  std::uint64_t next_;
};

}  // namespace cloudlet
