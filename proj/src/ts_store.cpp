#include "cloudlet/ts_store.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <mutex>

#include "cloudlet/bytes.hpp"
#include "cloudlet/checksum.hpp"
#include "cloudlet/error.hpp"

namespace cloudlet {

using nlohmann::json;

json StoredPoint::to_json() const {
  json j = {{"timestamp_ms", timestamp_ms},
            {"device_pseudonym", device_pseudonym},
            {"value", value},
            {"partition", partition},
            {"offset", offset}};
  if (lat) j["lat"] = *lat;
  if (lon) j["lon"] = *lon;
  if (!attributes.empty()) j["attributes"] = attributes;
  return j;
}

bool point_less(const StoredPoint& a, const StoredPoint& b) {
  return std::tie(a.timestamp_ms, a.device_pseudonym, a.partition, a.offset) <
         std::tie(b.timestamp_ms, b.device_pseudonym, b.partition, b.offset);
}

namespace ts_format {

namespace {

constexpr std::uint32_t kMagic = 0x434c5453;  // "CLTS"
constexpr std::size_t kFooterBytes = 4 + 8 + 8 + 8 + 4;

std::uint32_t crc_of(std::string_view s) { return crc32(s); }

}  // namespace

std::string encode_row(const std::vector<StoredPoint>& points) {
  Bytes out;
  ByteWriter w(out);
  std::int64_t lo = points.empty() ? 0 : points.front().timestamp_ms;
  std::int64_t hi = lo;
  for (const auto& p : points) {
    Bytes body;
    ByteWriter b(body);
    b.i64(p.timestamp_ms);
    b.str(p.device_pseudonym);
    b.u64(std::bit_cast<std::uint64_t>(p.value));
    const bool loc = p.lat && p.lon;
    b.u8(loc ? 1 : 0);
    if (loc) {
      b.u64(std::bit_cast<std::uint64_t>(*p.lat));
      b.u64(std::bit_cast<std::uint64_t>(*p.lon));
    }
    b.u32(p.partition);
    b.u64(p.offset);
    b.u32(static_cast<std::uint32_t>(p.attributes.size()));
    for (const auto& [k, v] : p.attributes) {
      b.str(k);
      b.str(v);
    }
    w.u32(static_cast<std::uint32_t>(body.size()));
    w.u32(crc32(body));
    w.raw(body);
    lo = std::min(lo, p.timestamp_ms);
    hi = std::max(hi, p.timestamp_ms);
  }
  w.u32(kMagic);
  w.u64(points.size());
  w.i64(lo);
  w.i64(hi);
  const std::string_view sofar(reinterpret_cast<const char*>(out.data()), out.size());
  w.u32(crc_of(sofar));
  return std::string(out.begin(), out.end());
}

std::vector<StoredPoint> decode_row(std::string_view data) {
  if (data.size() < kFooterBytes) throw Error(Errc::CorruptRecord, "row file too short");
  const auto footer_at = data.size() - kFooterBytes;
  ByteReader f(ByteView(reinterpret_cast<const std::uint8_t*>(data.data()) + footer_at, kFooterBytes));
  if (f.u32() != kMagic) throw Error(Errc::CorruptRecord, "row file footer magic mismatch");
  const auto count = f.u64();
  f.i64();
  f.i64();
  const auto crc = f.u32();
  if (crc != crc_of(data.substr(0, data.size() - 4))) throw Error(Errc::CorruptRecord, "row file checksum mismatch");

  std::vector<StoredPoint> out;
  ByteReader r(ByteView(reinterpret_cast<const std::uint8_t*>(data.data()), footer_at));
  try {
    while (!r.done()) {
      const auto len = r.u32();
      const auto pcrc = r.u32();
      const auto body = r.raw(len);
      if (crc32(body) != pcrc) throw Error(Errc::CorruptRecord, "point checksum mismatch");
      ByteReader b(body);
      StoredPoint p;
      p.timestamp_ms = b.i64();
      p.device_pseudonym = b.str();
      p.value = std::bit_cast<double>(b.u64());
      if (b.u8() & 1) {
        p.lat = std::bit_cast<double>(b.u64());
        p.lon = std::bit_cast<double>(b.u64());
      }
      p.partition = b.u32();
      p.offset = b.u64();
      const auto n = b.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto k = b.str();
        p.attributes[k] = b.str();
      }
      out.push_back(std::move(p));
    }
  } catch (const Error& e) {
    if (e.code() == Errc::CorruptRecord) throw;
    throw Error(Errc::CorruptRecord, std::string("row file framing: ") + e.what());
  }
  if (out.size() != count) throw Error(Errc::CorruptRecord, "row file count mismatch");
  return out;
}

std::string encode_name(const std::string& series) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : series) {
    if (std::isalnum(c) || c == '.' || c == '_' || c == '-') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    }
  }
  if (out == "." || out == "..") out = "%2E" + out.substr(1);
  return out;
}

std::string decode_name(const std::string& file) {
  std::string out;
  for (std::size_t i = 0; i < file.size(); ++i) {
    if (file[i] == '%' && i + 2 < file.size()) {
      out.push_back(static_cast<char>(std::stoi(file.substr(i + 1, 2), nullptr, 16)));
      i += 2;
    } else {
      out.push_back(file[i]);
    }
  }
  return out;
}

}  // namespace ts_format

namespace {

const std::filesystem::path& ensure_dir(const std::filesystem::path& p) {
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TsStore::TsStore(std::filesystem::path dir, bool sync) : dir_(std::move(dir)), sync_(sync) {
  lock_.emplace(ensure_dir(dir_));
  load();
}

TsStore::TsStore(std::filesystem::path dir, ReadOnly) : dir_(std::move(dir)), sync_(false) {
  if (!std::filesystem::exists(dir_ / "store.json")) throw Error(Errc::ConfigError, "no store at " + dir_.string());
  load();
}

TsStore TsStore::open_read_only(std::filesystem::path dir) { return TsStore(std::move(dir), ReadOnly{}); }

std::int64_t TsStore::bucket_of(std::int64_t ts_ms) {
  auto q = ts_ms / kBucketMs;
  if (ts_ms % kBucketMs != 0 && ts_ms < 0) --q;
  return q * kBucketMs;
}

std::filesystem::path TsStore::row_path(const RowKey& k) const {
  return dir_ / "rows" / ts_format::encode_name(k.series) / (std::to_string(k.bucket_start_ms) + ".row");
}

void TsStore::load() {
  const auto meta = dir_ / "store.json";
  if (std::filesystem::exists(meta)) {
    auto j = json::parse(read_file(meta), nullptr, false);
    if (j.is_discarded() || j.value("bucket_ms", std::int64_t{0}) != kBucketMs) {
      throw Error(Errc::ConfigError, "store at " + dir_.string() + " uses a different bucket size");
    }
  } else {
    atomic_write_file(meta, json{{"v", 1}, {"bucket_ms", kBucketMs}}.dump(), sync_);
  }
  const auto rows = dir_ / "rows";
  if (!std::filesystem::exists(rows)) return;
  for (const auto& sdir : std::filesystem::directory_iterator(rows)) {
    if (!sdir.is_directory()) continue;
    const auto series = ts_format::decode_name(sdir.path().filename().string());
    for (const auto& f : std::filesystem::directory_iterator(sdir.path())) {
      if (f.path().extension() != ".row") continue;
      RowKey key{series, std::stoll(f.path().stem().string())};
      auto points = ts_format::decode_row(read_file(f.path()));
      for (const auto& p : points) sources_.emplace(series, p.partition, p.offset);
      count_ += points.size();
      rows_[key] = std::move(points);
    }
  }
}

bool TsStore::add(const std::string& series, StoredPoint p) {
  if (!lock_) throw Error(Errc::Io, "store opened read-only");
  std::unique_lock lock(mu_);
  if (!sources_.emplace(series, p.partition, p.offset).second) return false;
  pending_[RowKey{series, bucket_of(p.timestamp_ms)}].push_back(std::move(p));
  return true;
}

void TsStore::flush() {
  if (!lock_) throw Error(Errc::Io, "store opened read-only");
  std::map<RowKey, std::vector<StoredPoint>> pending;
  std::map<RowKey, std::vector<StoredPoint>> merged;
  {
    std::shared_lock lock(mu_);
    pending = pending_;
    for (auto& [key, pts] : pending) {
      auto it = rows_.find(key);
      auto row = it == rows_.end() ? std::vector<StoredPoint>{} : it->second;
      std::sort(pts.begin(), pts.end(), point_less);
      std::vector<StoredPoint> out;
      out.reserve(row.size() + pts.size());
      std::merge(row.begin(), row.end(), pts.begin(), pts.end(), std::back_inserter(out), point_less);
      merged[key] = std::move(out);
    }
  }
  for (const auto& [key, pts] : merged) {
    const auto path = row_path(key);
    std::filesystem::create_directories(path.parent_path());
    atomic_write_file(path, ts_format::encode_row(pts), sync_);
  }
  std::unique_lock lock(mu_);
  for (auto& [key, pts] : merged) {
    count_ += pts.size() - (rows_.count(key) ? rows_[key].size() : 0);
    rows_[key] = std::move(pts);
  }
  // Points added while the files were written stay pending.
  for (auto& [key, pts] : pending) {
    auto& cur = pending_[key];
    cur.erase(cur.begin(), cur.begin() + static_cast<std::ptrdiff_t>(std::min(cur.size(), pts.size())));
    if (cur.empty()) pending_.erase(key);
  }
}

std::vector<StoredPoint> TsStore::query_range(const std::string& series, std::int64_t t0_ms,
                                              std::int64_t t1_ms) const {
  std::shared_lock lock(mu_);
  auto it = rows_.lower_bound(RowKey{series, INT64_MIN});
  if (it == rows_.end() || it->first.series != series) throw Error(Errc::UnknownSeries, "unknown series " + series);
  std::vector<StoredPoint> out;
  if (t0_ms >= t1_ms) return out;
  // Clamp so flooring an extreme t0 cannot overflow.
  const auto first = t0_ms < INT64_MIN + kBucketMs ? INT64_MIN : bucket_of(t0_ms);
  for (it = rows_.lower_bound(RowKey{series, first}); it != rows_.end() && it->first.series == series;
       ++it) {
    if (it->first.bucket_start_ms >= t1_ms) break;
    const auto& pts = it->second;
    auto lo = std::partition_point(pts.begin(), pts.end(), [&](const StoredPoint& p) { return p.timestamp_ms < t0_ms; });
    for (auto p = lo; p != pts.end() && p->timestamp_ms < t1_ms; ++p) out.push_back(*p);
  }
  return out;
}

std::vector<std::string> TsStore::series() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, _] : rows_) {
    if (out.empty() || out.back() != k.series) out.push_back(k.series);
  }
  return out;
}

std::size_t TsStore::size() const {
  std::shared_lock lock(mu_);
  return count_;
}

}  // namespace cloudlet
