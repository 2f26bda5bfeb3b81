#include "cloudlet/commit_log.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <map>

#include "cloudlet/checksum.hpp"
#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"

namespace cloudlet {

namespace fs = std::filesystem;

void LogConfig::validate() const {
  if (retention_ms < 1000) throw Error(Errc::InvalidConfig, "retention_ms must be >= 1000");
  if (segment_max_bytes < 4096) throw Error(Errc::InvalidConfig, "segment_max_bytes must be >= 4096");
  if (index_interval_bytes < 128) throw Error(Errc::InvalidConfig, "index_interval_bytes must be >= 128");
  if (max_record_bytes == 0) throw Error(Errc::InvalidConfig, "max_record_bytes must be > 0");
}

namespace record_format {

std::size_t framed_size(const std::optional<Bytes>& key, std::size_t value_size) {
  return kOverheadBytes + (key ? key->size() : 0) + value_size;
}

void append(Bytes& out, const std::optional<Bytes>& key, ByteView value, std::int64_t timestamp_ms) {
  const std::size_t start = out.size();
  ByteWriter w(out);
  w.u32(0);  // length, patched below
  w.u32(0);  // crc, patched below
  w.u8(0);
  w.i64(timestamp_ms);
  w.opt_blob(key);
  w.blob(value);
  const auto length = static_cast<std::uint32_t>(out.size() - start - 4);
  w.patch_u32(start, length);
  const auto crc = crc32(ByteView(out.data() + start + 8, out.size() - start - 8));
  w.patch_u32(start + 4, crc);
}

Record decode(ByteView frame, std::uint64_t offset) {
  try {
    ByteReader r(frame);
    const auto length = r.u32();
    if (length != frame.size() - 4) throw Error(Errc::CorruptRecord, "length mismatch");
    Record rec;
    rec.offset = offset;
    rec.crc = r.u32();
    if (crc32(frame.subspan(8)) != rec.crc) {
      throw Error(Errc::CorruptRecord, "crc mismatch at offset " + std::to_string(offset));
    }
    if (r.u8() != 0) throw Error(Errc::CorruptRecord, "unsupported attributes");
    rec.timestamp_ms = r.i64();
    rec.key = r.opt_blob();
    rec.value = r.blob();
    if (!r.done()) throw Error(Errc::CorruptRecord, "trailing bytes in record");
    return rec;
  } catch (const Error& e) {
    if (e.code() == Errc::CorruptRecord) throw;
    throw Error(Errc::CorruptRecord, std::string("malformed record at offset ") + std::to_string(offset) + ": " +
                                         e.what());
  }
}

std::vector<Record> decode_all(ByteView frames, std::uint64_t base_offset) {
  std::vector<Record> out;
  std::size_t pos = 0;
  while (pos < frames.size()) {
    if (frames.size() - pos < 4) throw Error(Errc::CorruptRecord, "partial length field");
    ByteReader r(frames.subspan(pos, 4));
    const std::size_t len = r.u32();
    if (frames.size() - pos - 4 < len) throw Error(Errc::CorruptRecord, "partial record");
    out.push_back(decode(frames.subspan(pos, len + 4), base_offset + out.size()));
    pos += len + 4;
  }
  return out;
}

}  // namespace record_format

std::string segment_file_stem(std::uint64_t base_offset) {
  std::string digits = std::to_string(base_offset);
  return std::string(20 - digits.size(), '0') + digits;
}

namespace {

constexpr std::size_t kScanHeaderBytes = 4 + 4 + 1 + 8;

[[noreturn]] void throw_write_error(const std::string& what) {
  if (errno == ENOSPC || errno == EDQUOT) throw Error(Errc::StorageFull, what + ": " + std::strerror(errno));
  throw Error(Errc::Io, what + ": " + std::strerror(errno));
}

void full_pwrite(int fd, const std::uint8_t* data, std::size_t len, std::uint64_t off, const char* what) {
  while (len > 0) {
    ssize_t n = ::pwrite(fd, data, len, static_cast<off_t>(off));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_write_error(what);
    }
    data += n;
    off += static_cast<std::uint64_t>(n);
    len -= static_cast<std::size_t>(n);
  }
}

std::size_t full_pread(int fd, std::uint8_t* buf, std::size_t len, std::uint64_t off) {
  std::size_t done = 0;
  while (done < len) {
    ssize_t n = ::pread(fd, buf + done, len - done, static_cast<off_t>(off + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::Io, std::string("pread: ") + std::strerror(errno));
    }
    if (n == 0) break;
    done += static_cast<std::size_t>(n);
  }
  return done;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::int64_t be64s(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | p[i];
  return static_cast<std::int64_t>(v);
}

std::optional<std::uint64_t> parse_stem(const std::string& stem) {
  if (stem.size() != 20 || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), v);
  if (ec != std::errc() || p != stem.data() + stem.size()) return std::nullopt;
  return v;
}

Bytes encode_index(const std::vector<IndexEntry>& entries) {
  Bytes out;
  out.reserve(entries.size() * 8);
  ByteWriter w(out);
  for (const auto& e : entries) {
    w.u32(e.relative_offset);
    w.u32(e.position);
  }
  return out;
}

}  // namespace

struct CommitLog::Segment {
  std::uint64_t base = 0;
  fs::path log_path;
  fs::path index_path;
  int log_fd = -1;
  int index_fd = -1;
  std::atomic<std::uint64_t> size{0};
  std::atomic<std::uint64_t> count{0};
  std::int64_t max_ts = std::numeric_limits<std::int64_t>::min();
  std::vector<IndexEntry> index;
  std::uint64_t bytes_since_index = 0;

  ~Segment() {
    if (log_fd >= 0) ::close(log_fd);
    if (index_fd >= 0) ::close(index_fd);
  }

  void add_index(std::uint32_t rel, std::uint32_t pos) { index.push_back({rel, pos}); }

  void rewrite_index_file() const {
    auto data = encode_index(index);
    if (::ftruncate(index_fd, 0) != 0) throw Error(Errc::Io, "truncate index");
    if (!data.empty()) full_pwrite(index_fd, data.data(), data.size(), 0, "write index");
  }
};

CommitLog::CommitLog(fs::path dir, LogConfig config) : dir_(std::move(dir)), config_(config) {
  config_.validate();
  fs::create_directories(dir_);
  recover();
}

CommitLog::~CommitLog() {
  try {
    close();
  } catch (...) {
  }
}

CommitLog::SegmentPtr CommitLog::open_segment(std::uint64_t base, bool create) {
  auto seg = std::make_shared<Segment>();
  seg->base = base;
  const auto stem = segment_file_stem(base);
  seg->log_path = dir_ / (stem + ".log");
  seg->index_path = dir_ / (stem + ".index");
  const int flags = O_RDWR | O_CLOEXEC | (create ? O_CREAT | O_EXCL : 0);
  seg->log_fd = ::open(seg->log_path.c_str(), flags, 0644);
  if (seg->log_fd < 0) throw_write_error("open " + seg->log_path.string());
  seg->index_fd = ::open(seg->index_path.c_str(), O_RDWR | O_CLOEXEC | O_CREAT | (create ? O_TRUNC : 0), 0644);
  if (seg->index_fd < 0) throw_write_error("open " + seg->index_path.string());
  return seg;
}

void CommitLog::ensure_open() const {
  if (closed_) throw Error(Errc::LogClosed, "log " + dir_.string() + " is closed");
}

std::uint64_t CommitLog::recover() {
  std::lock_guard lock(mu_);
  segments_.clear();
  closed_ = false;
  recovery_truncated_ = 0;

  std::map<std::uint64_t, bool> bases;
  for (const auto& ent : fs::directory_iterator(dir_)) {
    if (!ent.is_regular_file()) continue;
    const auto name = ent.path().filename().string();
    const auto ext = ent.path().extension().string();
    if (ext == ".log") {
      auto base = parse_stem(ent.path().stem().string());
      if (!base) throw Error(Errc::UnrecoverableLog, "unexpected segment file name " + name);
      bases[*base] = true;
    } else if (ext == ".index") {
      auto base = parse_stem(ent.path().stem().string());
      if (!base) throw Error(Errc::UnrecoverableLog, "unexpected index file name " + name);
      bases.try_emplace(*base, false);
    }
  }
  // Index files without a log are leftovers of a deleted segment.
  for (auto it = bases.begin(); it != bases.end();) {
    if (!it->second) {
      fs::remove(dir_ / (segment_file_stem(it->first) + ".index"));
      it = bases.erase(it);
    } else {
      ++it;
    }
  }

  if (bases.empty()) {
    segments_.push_back(open_segment(0, true));
    next_offset_ = 0;
    return next_offset_;
  }

  std::size_t i = 0;
  std::uint64_t expected_base = bases.begin()->first;
  for (const auto& [base, _] : bases) {
    const bool tail = (++i == bases.size());
    if (base != expected_base) {
      throw Error(Errc::UnrecoverableLog, "segment " + segment_file_stem(base) + " does not follow offset " +
                                              std::to_string(expected_base));
    }
    auto seg = open_segment(base, false);
    const auto file_size = static_cast<std::uint64_t>(fs::file_size(seg->log_path));

    // Scan framing; the tail segment additionally checks every crc and is cut at the first bad record.
    std::uint64_t pos = 0;
    std::uint64_t count = 0;
    std::vector<std::uint8_t> buf;
    while (pos < file_size) {
      if (file_size - pos < kScanHeaderBytes) break;
      std::uint8_t hdr[kScanHeaderBytes];
      if (full_pread(seg->log_fd, hdr, sizeof hdr, pos) != sizeof hdr) break;
      const std::uint64_t len = be32(hdr);
      if (len < record_format::kOverheadBytes - 4 || len > file_size - pos - 4) break;
      if (tail) {
        buf.resize(len + 4);
        if (full_pread(seg->log_fd, buf.data(), buf.size(), pos) != buf.size()) break;
        try {
          (void)record_format::decode(buf, base + count);
        } catch (const Error&) {
          break;
        }
      }
      if (seg->index.empty() || seg->bytes_since_index >= config_.index_interval_bytes) {
        seg->add_index(static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(pos));
        seg->bytes_since_index = 0;
      }
      seg->bytes_since_index += len + 4;
      seg->max_ts = std::max(seg->max_ts, be64s(hdr + 9));
      pos += len + 4;
      ++count;
    }
    if (pos != file_size) {
      if (!tail) {
        throw Error(Errc::UnrecoverableLog, "sealed segment " + seg->log_path.string() + " has broken framing");
      }
      if (::ftruncate(seg->log_fd, static_cast<off_t>(pos)) != 0) throw Error(Errc::Io, "truncate tail segment");
      recovery_truncated_ = file_size - pos;
    }
    seg->size = pos;
    seg->count = count;

    if (tail) {
      seg->rewrite_index_file();
    } else {
      // Prefer the persisted sparse index when it is well formed.
      const auto idx_size = fs::file_size(seg->index_path);
      bool ok = idx_size % 8 == 0;
      std::vector<IndexEntry> loaded;
      if (ok && idx_size > 0) {
        std::vector<std::uint8_t> raw(idx_size);
        ok = full_pread(seg->index_fd, raw.data(), raw.size(), 0) == raw.size();
        for (std::size_t k = 0; ok && k < raw.size(); k += 8) {
          IndexEntry e{be32(&raw[k]), be32(&raw[k + 4])};
          if (e.relative_offset >= count || e.position >= pos ||
              (!loaded.empty() && (e.relative_offset <= loaded.back().relative_offset ||
                                   e.position <= loaded.back().position))) {
            ok = false;
          }
          loaded.push_back(e);
        }
      }
      if (ok && !loaded.empty()) {
        seg->index = std::move(loaded);
      } else {
        seg->rewrite_index_file();
      }
    }
    expected_base = base + count;
    segments_.push_back(std::move(seg));
  }
  next_offset_ = expected_base;
  return next_offset_;
}

std::uint64_t CommitLog::position_for_locked(const Segment& seg, std::uint64_t offset) const {
  const auto rel = offset - seg.base;
  std::uint64_t pos = 0;
  std::uint64_t at = 0;
  auto it = std::upper_bound(seg.index.begin(), seg.index.end(), rel,
                             [](std::uint64_t r, const IndexEntry& e) { return r < e.relative_offset; });
  if (it != seg.index.begin()) {
    --it;
    pos = it->position;
    at = it->relative_offset;
  }
  const auto size = seg.size.load();
  while (at < rel) {
    std::uint8_t hdr[4];
    if (pos + 4 > size || full_pread(seg.log_fd, hdr, 4, pos) != 4) {
      throw Error(Errc::CorruptRecord, "framing broken while seeking in " + seg.log_path.string());
    }
    pos += 4 + be32(hdr);
    ++at;
  }
  return pos;
}

std::uint64_t CommitLog::append(std::span<const LogEntry> entries) {
  std::lock_guard lock(mu_);
  ensure_open();
  if (entries.empty()) return next_offset_;

  std::uint64_t total_new = 0;
  for (const auto& e : entries) {
    const auto payload = (e.key ? e.key->size() : 0) + e.value.size();
    if (payload > config_.max_record_bytes) {
      throw Error(Errc::MessageTooLarge, "record of " + std::to_string(payload) + " bytes exceeds limit " +
                                             std::to_string(config_.max_record_bytes));
    }
    total_new += record_format::framed_size(e.key, e.value.size());
  }
  if (config_.capacity_bytes != 0) {
    std::uint64_t used = 0;
    for (const auto& s : segments_) used += s->size;
    if (used + total_new > config_.capacity_bytes) {
      throw Error(Errc::StorageFull, "log capacity of " + std::to_string(config_.capacity_bytes) + " bytes reached");
    }
  }

  struct Chunk {
    std::uint64_t base;
    bool fresh;
    std::uint64_t start_size;
    std::uint64_t bytes_since_index;
    std::size_t index_start;
    Bytes data;
    std::vector<IndexEntry> index;
    std::uint64_t count = 0;
    std::int64_t max_ts = std::numeric_limits<std::int64_t>::min();
  };
  auto& active = *segments_.back();
  std::vector<Chunk> chunks;
  chunks.push_back({active.base, false, active.size.load(), active.bytes_since_index, active.index.size(), {}, {}});
  std::uint64_t offset = next_offset_;
  for (const auto& e : entries) {
    const auto fsize = record_format::framed_size(e.key, e.value.size());
    auto* c = &chunks.back();
    const auto seg_size = c->start_size + c->data.size();
    if (seg_size > 0 && seg_size + fsize > config_.segment_max_bytes) {
      chunks.push_back({offset, true, 0, 0, 0, {}, {}});
      c = &chunks.back();
    }
    const auto pos = c->start_size + c->data.size();
    if (pos == 0 || c->bytes_since_index >= config_.index_interval_bytes) {
      c->index.push_back({static_cast<std::uint32_t>(offset - c->base), static_cast<std::uint32_t>(pos)});
      c->bytes_since_index = 0;
    }
    record_format::append(c->data, e);
    c->bytes_since_index += fsize;
    c->max_ts = std::max(c->max_ts, e.timestamp_ms);
    ++c->count;
    ++offset;
  }

  std::vector<SegmentPtr> created;
  try {
    for (auto& c : chunks) {
      Segment* seg = &active;
      if (c.fresh) {
        created.push_back(open_segment(c.base, true));
        seg = created.back().get();
      }
      if (!c.data.empty()) full_pwrite(seg->log_fd, c.data.data(), c.data.size(), c.start_size, "append log");
      if (!c.index.empty()) {
        auto idx = encode_index(c.index);
        full_pwrite(seg->index_fd, idx.data(), idx.size(), c.index_start * 8, "append index");
      }
    }
  } catch (...) {
    [[maybe_unused]] int rc = ::ftruncate(active.log_fd, static_cast<off_t>(chunks.front().start_size));
    rc = ::ftruncate(active.index_fd, static_cast<off_t>(active.index.size() * 8));
    for (auto& seg : created) remove_segment_files(*seg);
    throw;
  }

  for (std::size_t k = 0; k < chunks.size(); ++k) {
    auto& c = chunks[k];
    Segment* seg = &active;
    if (c.fresh) {
      roll_locked();
      seg = created[k - 1].get();
      segments_.push_back(created[k - 1]);
    }
    seg->index.insert(seg->index.end(), c.index.begin(), c.index.end());
    seg->bytes_since_index = c.bytes_since_index;
    seg->max_ts = std::max(seg->max_ts, c.max_ts);
    seg->size = c.start_size + c.data.size();
    seg->count += c.count;
  }
  const auto base_offset = next_offset_;
  next_offset_ = offset;
  return base_offset;
}

void CommitLog::roll_locked() {
  // Seals the current tail before a new segment is published behind it.
  auto& tail = *segments_.back();
  if (config_.fsync) {
    ::fsync(tail.log_fd);
    ::fsync(tail.index_fd);
  }
}

void CommitLog::remove_segment_files(Segment& seg) {
  std::error_code ec;
  fs::remove(seg.log_path, ec);
  fs::remove(seg.index_path, ec);
}

std::vector<Record> CommitLog::read(std::uint64_t from_offset, std::uint32_t max_bytes,
                                    std::optional<std::uint64_t> end_offset) const {
  std::vector<std::pair<SegmentPtr, std::uint64_t>> snapshot;
  std::uint64_t pos = 0;
  std::uint64_t limit = 0;
  {
    std::lock_guard lock(mu_);
    ensure_open();
    const auto earliest = segments_.front()->base;
    if (from_offset < earliest || from_offset > next_offset_) {
      throw OffsetOutOfRangeError(from_offset, earliest, next_offset_);
    }
    limit = std::min(next_offset_, end_offset.value_or(next_offset_));
    if (from_offset >= limit) return {};
    auto it = std::upper_bound(segments_.begin(), segments_.end(), from_offset,
                               [](std::uint64_t off, const SegmentPtr& s) { return off < s->base; });
    --it;
    pos = position_for_locked(**it, from_offset);
    for (; it != segments_.end(); ++it) snapshot.emplace_back(*it, (*it)->size.load());
  }

  std::vector<Record> out;
  std::uint64_t used = 0;
  std::uint64_t offset = from_offset;
  Bytes frame;
  for (std::size_t s = 0; s < snapshot.size() && offset < limit; ++s) {
    const auto& [seg, size] = snapshot[s];
    if (s > 0) pos = 0;
    while (pos < size && offset < limit) {
      std::uint8_t hdr[4];
      if (size - pos < 4 || full_pread(seg->log_fd, hdr, 4, pos) != 4) {
        throw Error(Errc::CorruptRecord, "framing broken at offset " + std::to_string(offset));
      }
      const std::uint64_t len = be32(hdr);
      if (len > size - pos - 4) throw Error(Errc::CorruptRecord, "framing broken at offset " + std::to_string(offset));
      if (!out.empty() && used + len + 4 > max_bytes) return out;
      frame.resize(len + 4);
      if (full_pread(seg->log_fd, frame.data(), frame.size(), pos) != frame.size()) {
        throw Error(Errc::CorruptRecord, "short read at offset " + std::to_string(offset));
      }
      out.push_back(record_format::decode(frame, offset));
      used += len + 4;
      pos += len + 4;
      ++offset;
    }
  }
  return out;
}

std::uint64_t CommitLog::enforce_retention(std::int64_t now_ms) {
  std::lock_guard lock(mu_);
  if (closed_) return 0;
  const std::int64_t cutoff = now_ms - static_cast<std::int64_t>(config_.retention_ms);
  std::uint64_t purged = 0;
  // Only a prefix is removed so the readable range stays dense.
  while (segments_.size() > 1 && segments_.front()->max_ts < cutoff) {
    auto& seg = *segments_.front();
    purged += seg.count;
    remove_segment_files(seg);
    segments_.erase(segments_.begin());
  }
  return purged;
}

void CommitLog::truncate_to(std::uint64_t offset) {
  std::lock_guard lock(mu_);
  ensure_open();
  if (offset >= next_offset_) return;
  if (offset <= segments_.front()->base) {
    for (auto& s : segments_) remove_segment_files(*s);
    segments_.clear();
    segments_.push_back(open_segment(offset, true));
    next_offset_ = offset;
    return;
  }
  while (segments_.back()->base >= offset) {
    remove_segment_files(*segments_.back());
    segments_.pop_back();
  }
  auto& seg = *segments_.back();
  const auto pos = position_for_locked(seg, offset);
  if (::ftruncate(seg.log_fd, static_cast<off_t>(pos)) != 0) throw Error(Errc::Io, "truncate segment");
  const auto rel = offset - seg.base;
  std::erase_if(seg.index, [rel](const IndexEntry& e) { return e.relative_offset >= rel; });
  seg.rewrite_index_file();
  seg.size = pos;
  seg.count = rel;
  // Recompute the timestamp bound and index cadence over what remains.
  seg.max_ts = std::numeric_limits<std::int64_t>::min();
  std::uint64_t p = 0;
  std::uint64_t last_indexed = seg.index.empty() ? 0 : seg.index.back().position;
  while (p < pos) {
    std::uint8_t hdr[kScanHeaderBytes];
    if (full_pread(seg.log_fd, hdr, sizeof hdr, p) != sizeof hdr) break;
    seg.max_ts = std::max(seg.max_ts, be64s(hdr + 9));
    p += 4 + be32(hdr);
  }
  seg.bytes_since_index = pos - last_indexed;
  if (config_.fsync) ::fsync(seg.log_fd);
  next_offset_ = offset;
}

void CommitLog::reset(std::uint64_t start_offset) {
  std::lock_guard lock(mu_);
  ensure_open();
  for (auto& s : segments_) remove_segment_files(*s);
  segments_.clear();
  segments_.push_back(open_segment(start_offset, true));
  next_offset_ = start_offset;
}

void CommitLog::close() {
  std::lock_guard lock(mu_);
  if (closed_) return;
  if (config_.fsync && !segments_.empty()) {
    ::fsync(segments_.back()->log_fd);
    ::fsync(segments_.back()->index_fd);
  }
  segments_.clear();
  closed_ = true;
}

std::uint64_t CommitLog::earliest_offset() const {
  std::lock_guard lock(mu_);
  ensure_open();
  return segments_.front()->base;
}

std::uint64_t CommitLog::next_offset() const {
  std::lock_guard lock(mu_);
  ensure_open();
  return next_offset_;
}

std::uint64_t CommitLog::size_bytes() const {
  std::lock_guard lock(mu_);
  std::uint64_t total = 0;
  for (const auto& s : segments_) total += s->size;
  return total;
}

std::vector<SegmentInfo> CommitLog::segments() const {
  std::lock_guard lock(mu_);
  std::vector<SegmentInfo> out;
  for (const auto& s : segments_) {
    out.push_back({s->base, s->count.load(), s->size.load(), s->max_ts, s->log_path, s->index_path});
  }
  return out;
}

std::vector<IndexEntry> CommitLog::index_entries(std::uint64_t segment_base) const {
  std::lock_guard lock(mu_);
  for (const auto& s : segments_) {
    if (s->base == segment_base) return s->index;
  }
  return {};
}

}  // namespace cloudlet
