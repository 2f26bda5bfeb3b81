#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "cloudlet/bytes.hpp"

namespace cloudlet {

struct LogConfig {
  std::uint64_t retention_ms = 86'400'000;
  std::uint64_t segment_max_bytes = 16u << 20;
  std::uint32_t index_interval_bytes = 4096;
  std::uint32_t max_record_bytes = 1u << 20;
  // Total on-disk quota for this log; 0 means bounded only by the device.
  std::uint64_t capacity_bytes = 0;
  // fsync on segment roll and close. Data always reaches the OS before append returns.
  bool fsync = true;

  void validate() const;
};

struct LogEntry {
  std::optional<Bytes> key;
  Bytes value;
  std::int64_t timestamp_ms = 0;
};

struct Record {
  std::uint64_t offset = 0;
  std::int64_t timestamp_ms = 0;
  std::optional<Bytes> key;
  Bytes value;
  std::uint32_t crc = 0;

  bool operator==(const Record&) const = default;
};

// On-disk / on-wire record framing (big-endian):
//   length u32 | crc u32 | attributes u8 | timestamp_ms i64 | key_len i32 | key | value_len u32 | value
// |length| counts every byte after itself; |crc| covers every byte after itself.
namespace record_format {

inline constexpr std::size_t kLengthBytes = 4;
inline constexpr std::size_t kOverheadBytes = 4 + 4 + 1 + 8 + 4 + 4;

std::size_t framed_size(const std::optional<Bytes>& key, std::size_t value_size);
void append(Bytes& out, const std::optional<Bytes>& key, ByteView value, std::int64_t timestamp_ms);
inline void append(Bytes& out, const LogEntry& e) { append(out, e.key, e.value, e.timestamp_ms); }
inline void append(Bytes& out, const Record& r) { append(out, r.key, r.value, r.timestamp_ms); }

// Decodes exactly one frame; throws Errc::CorruptRecord on crc or framing mismatch.
Record decode(ByteView frame, std::uint64_t offset);

// Splits a dense run of frames whose first record sits at |base_offset|.
std::vector<Record> decode_all(ByteView frames, std::uint64_t base_offset);

}  // namespace record_format

struct SegmentInfo {
  std::uint64_t base_offset = 0;
  std::uint64_t record_count = 0;
  std::uint64_t size_bytes = 0;
  std::int64_t max_timestamp_ms = std::numeric_limits<std::int64_t>::min();
  std::filesystem::path log_path;
  std::filesystem::path index_path;
};

struct IndexEntry {
  std::uint32_t relative_offset;
  std::uint32_t position;
};

std::string segment_file_stem(std::uint64_t base_offset);

// Append-only log for one partition, stored as CRC-framed segment files with
// sparse offset indexes. One writer at a time; readers may run concurrently with
// appends and only observe fully written records.
class CommitLog {
 public:
  // Opens (creating if needed) the log in |dir| and runs recover().
  CommitLog(std::filesystem::path dir, LogConfig config);
  ~CommitLog();
  CommitLog(const CommitLog&) = delete;
  CommitLog& operator=(const CommitLog&) = delete;

  // Returns the offset assigned to the first entry.
  std::uint64_t append(std::span<const LogEntry> entries);

  // Records with offset >= from_offset, contiguous, bounded by |max_bytes| of framed
  // size (at least one record if any exists) and by |end_offset| when given.
  std::vector<Record> read(std::uint64_t from_offset, std::uint32_t max_bytes,
                           std::optional<std::uint64_t> end_offset = std::nullopt) const;

  // Deletes the oldest sealed segments whose newest record is outside the window.
  std::uint64_t enforce_retention(std::int64_t now_ms);

  // Validates the tail segment, truncating at the first corrupt or partial record.
  std::uint64_t recover();

  // Drops every record at offset >= |offset|.
  void truncate_to(std::uint64_t offset);
  // Drops everything and restarts the log at |start_offset|.
  void reset(std::uint64_t start_offset);

  void close();

  std::uint64_t earliest_offset() const;
  std::uint64_t next_offset() const;
  std::uint64_t size_bytes() const;
  std::vector<SegmentInfo> segments() const;
  std::vector<IndexEntry> index_entries(std::uint64_t segment_base) const;
  // Bytes cut from the tail segment by the most recent recover().
  std::uint64_t last_recovery_truncated_bytes() const { return recovery_truncated_; }
  const std::filesystem::path& dir() const { return dir_; }
  const LogConfig& config() const { return config_; }

 private:
  struct Segment;
  using SegmentPtr = std::shared_ptr<Segment>;

  SegmentPtr open_segment(std::uint64_t base, bool create);
  void roll_locked();
  void remove_segment_files(Segment& seg);
  std::uint64_t position_for_locked(const Segment& seg, std::uint64_t offset) const;
  void ensure_open() const;

  std::filesystem::path dir_;
  LogConfig config_;
  mutable std::mutex mu_;
  std::vector<SegmentPtr> segments_;
  std::uint64_t next_offset_ = 0;
  std::uint64_t recovery_truncated_ = 0;
  bool closed_ = false;
};

}  // namespace cloudlet
