#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cloudlet/fsutil.hpp"

namespace cloudlet {

struct StoredPoint {
  std::int64_t timestamp_ms = 0;
  std::string device_pseudonym;
  double value = 0;
  std::optional<double> lat;
  std::optional<double> lon;
  std::map<std::string, std::string> attributes;
  std::uint32_t partition = 0;  // source position in the measurement topic
  std::uint64_t offset = 0;

  bool operator==(const StoredPoint&) const = default;
  nlohmann::json to_json() const;
};

// Row order: timestamp, then device, then source.
bool point_less(const StoredPoint& a, const StoredPoint& b);

struct RowKey {
  std::string series;
  std::int64_t bucket_start_ms = 0;
  auto operator<=>(const RowKey&) const = default;
};

// Embedded wide-row time-series store. One file per (series, day bucket) holding
// the row's points in order plus a footer; rows are rewritten atomically on flush.
// Writes go to a pending buffer and become visible to queries only after flush().
class TsStore {
 public:
  static constexpr std::int64_t kBucketMs = 86'400'000;

  explicit TsStore(std::filesystem::path dir, bool sync = true);
  // Snapshot of an existing store that may be owned by a running sink. add/flush throw.
  static TsStore open_read_only(std::filesystem::path dir);

  static std::int64_t bucket_of(std::int64_t ts_ms);

  // Buffers the point unless (series, partition, offset) is already stored or pending.
  bool add(const std::string& series, StoredPoint p);
  // Makes every pending point durable and visible.
  void flush();

  // Points with t0 <= ts < t1, in row order. Throws UnknownSeries for a series never stored.
  std::vector<StoredPoint> query_range(const std::string& series, std::int64_t t0_ms, std::int64_t t1_ms) const;

  std::vector<std::string> series() const;
  std::size_t size() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path row_path(const RowKey& k) const;
  struct ReadOnly {};
  TsStore(std::filesystem::path dir, ReadOnly);
  void load();

  std::filesystem::path dir_;
  bool sync_;
  std::optional<DirLock> lock_;
  mutable std::shared_mutex mu_;
  std::map<RowKey, std::vector<StoredPoint>> rows_;
  std::map<RowKey, std::vector<StoredPoint>> pending_;
  std::set<std::tuple<std::string, std::uint32_t, std::uint64_t>> sources_;
  std::size_t count_ = 0;
};

namespace ts_format {

// Row file body: repeated (len u32 | crc u32 | point), then footer
// magic "CLTS" | count u64 | min_ts i64 | max_ts i64 | crc u32 over everything before it.
std::string encode_row(const std::vector<StoredPoint>& points);
std::vector<StoredPoint> decode_row(std::string_view data);

// Percent-encodes anything outside [A-Za-z0-9._-] so a series name is a safe file name.
std::string encode_name(const std::string& series);
std::string decode_name(const std::string& file);

}  // namespace ts_format

}  // namespace cloudlet
