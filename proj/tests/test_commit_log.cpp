#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <thread>

#include "cloudlet/commit_log.hpp"
#include "cloudlet/error.hpp"
#include "test_util.hpp"

namespace cloudlet {
namespace {

using testing::random_bytes;
using testing::TempDir;

LogEntry entry(std::string value, std::int64_t ts = 1000, std::optional<std::string> key = std::nullopt) {
  LogEntry e;
  if (key) e.key = to_bytes(*key);
  e.value = to_bytes(value);
  e.timestamp_ms = ts;
  return e;
}

LogConfig small_config() {
  LogConfig cfg;
  cfg.retention_ms = 300'000;
  cfg.segment_max_bytes = 4096;
  cfg.index_interval_bytes = 128;
  cfg.fsync = false;
  return cfg;
}

Errc error_code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Ok;
}

TEST(RecordFormat, LayoutIsBigEndianWithCrcOverBody) {
  Bytes out;
  record_format::append(out, to_bytes("k"), to_bytes("hi"), 0x0102030405060708);
  ASSERT_EQ(out.size(), record_format::kOverheadBytes + 3);
  // length counts everything after itself
  EXPECT_EQ(out[0], 0);
  EXPECT_EQ(out[3], out.size() - 4);
  EXPECT_EQ(out[8], 0);  // attributes
  EXPECT_EQ(out[9], 0x01);
  EXPECT_EQ(out[16], 0x08);
  EXPECT_EQ(out[20], 1);  // key_len
  EXPECT_EQ(out[21], 'k');
  EXPECT_EQ(out[25], 2);  // value_len
  auto rec = record_format::decode(out, 7);
  EXPECT_EQ(rec.offset, 7u);
  EXPECT_EQ(to_string(*rec.key), "k");
  EXPECT_EQ(to_string(rec.value), "hi");
}

TEST(RecordFormat, AbsentKeyUsesMinusOneSentinel) {
  Bytes out;
  record_format::append(out, std::nullopt, {}, 5);
  EXPECT_EQ(out[17], 0xFF);
  EXPECT_EQ(out[20], 0xFF);
  auto rec = record_format::decode(out, 0);
  EXPECT_FALSE(rec.key.has_value());
  EXPECT_TRUE(rec.value.empty());
}

TEST(CommitLog, AppendToEmptyLogStartsAtZero) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  std::vector<LogEntry> es{entry("a"), entry("b"), entry("c")};
  EXPECT_EQ(log.append(es), 0u);
  EXPECT_EQ(log.next_offset(), 3u);
}

TEST(CommitLog, AppendAfterExistingOffsetsContinuesCounter) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  for (int i = 0; i < 42; ++i) {
    std::vector<LogEntry> es{entry("x")};
    log.append(es);
  }
  std::vector<LogEntry> es{entry("y")};
  EXPECT_EQ(log.append(es), 42u);
}

TEST(CommitLog, ThousandRecordsRollSegmentsAndReadBackIdentically) {
  TempDir dir;
  auto cfg = small_config();
  cfg.segment_max_bytes = 16384;
  CommitLog log(dir.path(), cfg);
  std::mt19937_64 rng(1);
  std::vector<LogEntry> written;
  for (int i = 0; i < 1000; ++i) {
    LogEntry e;
    e.value = random_bytes(rng, 100);
    e.timestamp_ms = 1000 + i;
    written.push_back(e);
  }
  for (std::size_t i = 0; i < written.size(); i += 37) {
    auto n = std::min<std::size_t>(37, written.size() - i);
    log.append(std::span(written).subspan(i, n));
  }
  EXPECT_GT(log.segments().size(), 1u);
  for (const auto& seg : log.segments()) {
    EXPECT_LE(seg.size_bytes, cfg.segment_max_bytes);
    EXPECT_EQ(seg.log_path.filename().string(), segment_file_stem(seg.base_offset) + ".log");
    EXPECT_EQ(seg.log_path.stem().string().size(), 20u);
  }
  std::vector<Record> all;
  std::uint64_t at = 0;
  while (at < log.next_offset()) {
    auto batch = log.read(at, 4096);
    ASSERT_FALSE(batch.empty());
    for (auto& r : batch) all.push_back(std::move(r));
    at = all.back().offset + 1;
  }
  ASSERT_EQ(all.size(), written.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(all[i].offset, i);
    EXPECT_EQ(all[i].value, written[i].value);
    EXPECT_EQ(all[i].timestamp_ms, written[i].timestamp_ms);
  }
}

TEST(CommitLog, ReadOnEmptyLogIsEmpty) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  EXPECT_TRUE(log.read(0, 1u << 20).empty());
}

TEST(CommitLog, SuffixRead) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  for (int i = 0; i < 10; ++i) {
    std::vector<LogEntry> es{entry("v" + std::to_string(i))};
    log.append(es);
  }
  auto recs = log.read(5, 0xFFFFFFFF);
  ASSERT_EQ(recs.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(recs[i].offset, 5u + i);
    EXPECT_EQ(to_string(recs[i].value), "v" + std::to_string(5 + i));
  }
}

TEST(CommitLog, ReadRespectsByteBudgetButReturnsAtLeastOne) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  std::vector<LogEntry> es{entry(std::string(500, 'a')), entry(std::string(500, 'b'))};
  log.append(es);
  EXPECT_EQ(log.read(0, 10).size(), 1u);
  const auto one = record_format::framed_size(std::nullopt, 500);
  EXPECT_EQ(log.read(0, static_cast<std::uint32_t>(2 * one - 1)).size(), 1u);
  EXPECT_EQ(log.read(0, static_cast<std::uint32_t>(2 * one)).size(), 2u);
  EXPECT_EQ(log.read(0, 1u << 20, 1).size(), 1u);
}

TEST(CommitLog, ReadBeyondNextOffsetIsOutOfRange) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  std::vector<LogEntry> es{entry("a")};
  log.append(es);
  EXPECT_TRUE(log.read(1, 100).empty());
  try {
    log.read(2, 100);
    FAIL();
  } catch (const OffsetOutOfRangeError& e) {
    EXPECT_EQ(e.earliest_offset(), 0u);
    EXPECT_EQ(e.next_offset(), 1u);
  }
}

// Exactly 100 records of 16-byte values fill a 4100-byte segment.
LogConfig hundred_per_segment() {
  auto cfg = small_config();
  cfg.segment_max_bytes = 100 * record_format::framed_size(std::nullopt, 16);
  return cfg;
}

TEST(CommitLog, ReadOfPurgedOffsetReportsEarliest) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  const std::int64_t now = 10'000'000;
  for (int i = 0; i < 200; ++i) {
    std::vector<LogEntry> es{entry(std::string(16, 'x'), i < 100 ? 1000 : now)};
    log.append(es);
  }
  ASSERT_EQ(log.segments().size(), 2u);
  ASSERT_EQ(log.segments()[0].record_count, 100u);
  EXPECT_EQ(log.enforce_retention(now), 100u);
  try {
    log.read(0, 1u << 20);
    FAIL();
  } catch (const OffsetOutOfRangeError& e) {
    EXPECT_EQ(e.earliest_offset(), 100u);
  }
  EXPECT_EQ(log.read(100, 1u << 20).size(), 100u);
}

TEST(CommitLog, RetentionKeepsFreshActiveSegment) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  std::vector<LogEntry> es{entry("a", 5'000'000)};
  log.append(es);
  EXPECT_EQ(log.enforce_retention(5'000'001), 0u);
  EXPECT_EQ(log.earliest_offset(), 0u);
}

TEST(CommitLog, RetentionPurgesOldSealedSegmentsButNeverActive) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  for (int i = 0; i < 250; ++i) {
    std::vector<LogEntry> es{entry(std::string(16, 'x'), 1000 + i)};
    log.append(es);
  }
  auto segs = log.segments();
  ASSERT_EQ(segs.size(), 3u);
  const auto expected = segs[0].record_count + segs[1].record_count;
  // Everything is old, including the active segment.
  EXPECT_EQ(log.enforce_retention(100'000'000), expected);
  ASSERT_EQ(log.segments().size(), 1u);
  EXPECT_EQ(log.earliest_offset(), 200u);
  EXPECT_EQ(log.read(200, 1u << 20).size(), 50u);
}

TEST(CommitLog, SealedSegmentWithOneFreshRecordIsKept) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  const std::int64_t now = 10'000'000;
  for (int i = 0; i < 150; ++i) {
    std::vector<LogEntry> es{entry(std::string(16, 'x'), i == 50 ? now : 1000)};
    log.append(es);
  }
  EXPECT_EQ(log.enforce_retention(now), 0u);
  EXPECT_EQ(log.earliest_offset(), 0u);
}

TEST(CommitLog, RetentionNeverDeletesRecordsInsideWindow) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    TempDir dir;
    CommitLog log(dir.path(), hundred_per_segment());
    std::vector<std::int64_t> ts;
    for (int i = 0; i < 500; ++i) {
      ts.push_back(static_cast<std::int64_t>(rng() % 1'000'000));
      std::vector<LogEntry> es{entry(std::string(16, 'x'), ts.back())};
      log.append(es);
    }
    const std::int64_t now = 300'000 + static_cast<std::int64_t>(rng() % 1'000'000);
    log.enforce_retention(now);
    const auto earliest = log.earliest_offset();
    for (std::uint64_t off = 0; off < earliest; ++off) {
      ASSERT_LT(ts[off], now - 300'000) << "record " << off << " deleted inside window";
    }
    // Readable offsets are exactly [earliest, next).
    auto recs = log.read(earliest, 0xFFFFFFFF);
    ASSERT_EQ(recs.size(), log.next_offset() - earliest);
    for (std::size_t i = 0; i < recs.size(); ++i) ASSERT_EQ(recs[i].offset, earliest + i);
  }
}

TEST(CommitLog, CleanReopenRecoversNextOffset) {
  TempDir dir;
  {
    CommitLog log(dir.path(), small_config());
    for (int i = 0; i < 10; ++i) {
      std::vector<LogEntry> es{entry("r" + std::to_string(i))};
      log.append(es);
    }
  }
  CommitLog log(dir.path(), small_config());
  EXPECT_EQ(log.next_offset(), 10u);
  EXPECT_EQ(log.last_recovery_truncated_bytes(), 0u);
}

TEST(CommitLog, HalfWrittenTailRecordIsTruncated) {
  TempDir dir;
  std::filesystem::path tail;
  std::uint64_t end_of_8 = 0;
  {
    CommitLog log(dir.path(), small_config());
    for (int i = 0; i < 10; ++i) {
      std::vector<LogEntry> es{entry("value-" + std::to_string(i))};
      log.append(es);
      if (i == 8) end_of_8 = log.segments().back().size_bytes;
    }
    tail = log.segments().back().log_path;
  }
  const auto full = std::filesystem::file_size(tail);
  // Cut record 9 in the middle of its value bytes.
  std::filesystem::resize_file(tail, full - 3);
  CommitLog log(dir.path(), small_config());
  EXPECT_EQ(log.next_offset(), 9u);
  EXPECT_EQ(std::filesystem::file_size(tail), end_of_8);
  EXPECT_EQ(log.read(0, 1u << 20).size(), 9u);
}

TEST(CommitLog, BitFlipInSealedSegmentSurfacesAsCorruptRecord) {
  TempDir dir;
  std::filesystem::path sealed;
  std::uint64_t pos5 = 0;
  {
    CommitLog log(dir.path(), hundred_per_segment());
    for (int i = 0; i < 150; ++i) {
      std::vector<LogEntry> es{entry(std::string(16, 'a' + (i % 26)))};
      log.append(es);
    }
    sealed = log.segments().front().log_path;
    pos5 = 5 * record_format::framed_size(std::nullopt, 16);
  }
  {
    std::fstream f(sealed, std::ios::in | std::ios::out | std::ios::binary);
    const auto value_pos = static_cast<std::streamoff>(pos5 + record_format::kOverheadBytes + 3);
    f.seekg(value_pos);
    char c;
    f.get(c);
    f.seekp(value_pos);
    f.put(static_cast<char>(c ^ 0x10));
  }
  CommitLog log(dir.path(), hundred_per_segment());
  EXPECT_EQ(log.next_offset(), 150u);
  EXPECT_EQ(error_code_of([&] { log.read(5, 1u << 20); }), Errc::CorruptRecord);
  EXPECT_EQ(log.read(0, 1u << 20, 5).size(), 5u);
  EXPECT_EQ(log.read(100, 1u << 20).size(), 50u);
}

TEST(CommitLog, IndexEntriesPointAtRecordStarts) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    LogEntry e;
    e.value = random_bytes(rng, rng() % 40);
    std::vector<LogEntry> es{e};
    log.append(es);
  }
  for (const auto& seg : log.segments()) {
    auto idx = log.index_entries(seg.base_offset);
    ASSERT_FALSE(idx.empty());
    EXPECT_EQ(idx.front().relative_offset, 0u);
    EXPECT_EQ(idx.front().position, 0u);
    EXPECT_EQ(std::filesystem::file_size(seg.index_path), idx.size() * 8);
    std::ifstream f(seg.log_path, std::ios::binary);
    Bytes content((std::istreambuf_iterator<char>(f)), {});
    for (const auto& e : idx) {
      // Walking the framing from 0 must land on |position| after |relative_offset| records.
      std::uint64_t pos = 0;
      for (std::uint32_t k = 0; k < e.relative_offset; ++k) {
        ByteReader r(ByteView(content).subspan(pos, 4));
        pos += 4 + r.u32();
      }
      EXPECT_EQ(pos, e.position);
    }
  }
}

TEST(CommitLog, RoundTripPropertyAcrossReopen) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    TempDir dir;
    std::vector<LogEntry> written;
    for (int i = 0; i < 200; ++i) {
      LogEntry e;
      switch (rng() % 3) {
        case 0: break;
        case 1: e.key = Bytes{}; break;
        default: e.key = random_bytes(rng, rng() % 64);
      }
      e.value = random_bytes(rng, rng() % 4 == 0 ? 0 : rng() % 700);
      e.timestamp_ms = static_cast<std::int64_t>(rng());
      written.push_back(e);
    }
    {
      CommitLog log(dir.path(), small_config());
      for (std::size_t i = 0; i < 100;) {
        auto n = std::min<std::size_t>(1 + rng() % 10, 100 - i);
        log.append(std::span(written).subspan(i, n));
        i += n;
      }
    }
    CommitLog log(dir.path(), small_config());
    log.append(std::span(written).subspan(100));
    auto recs = log.read(0, 0xFFFFFFFF);
    ASSERT_EQ(recs.size(), written.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      ASSERT_EQ(recs[i].key, written[i].key);
      ASSERT_EQ(recs[i].value, written[i].value);
      ASSERT_EQ(recs[i].timestamp_ms, written[i].timestamp_ms);
    }
  }
}

TEST(CommitLog, RecoveryAfterArbitraryTailTruncationYieldsPrefix) {
  std::mt19937_64 rng(17);
  TempDir origin;
  std::vector<LogEntry> written;
  {
    auto cfg = small_config();
    cfg.segment_max_bytes = 1u << 20;
    CommitLog log(origin.path(), cfg);
    for (int i = 0; i < 60; ++i) {
      LogEntry e;
      e.value = random_bytes(rng, rng() % 50);
      written.push_back(e);
      std::vector<LogEntry> es{e};
      log.append(es);
    }
  }
  const auto tail = origin / (segment_file_stem(0) + ".log");
  const auto full = std::filesystem::file_size(tail);
  for (std::uint64_t cut = 0; cut <= full; cut += 1 + rng() % 7) {
    TempDir copy;
    std::filesystem::copy(origin.path(), copy.path(), std::filesystem::copy_options::recursive |
                                                         std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(copy / (segment_file_stem(0) + ".log"), cut);
    CommitLog log(copy.path(), small_config());
    auto recs = log.read(0, 0xFFFFFFFF);
    ASSERT_EQ(recs.size(), log.next_offset());
    for (std::size_t i = 0; i < recs.size(); ++i) ASSERT_EQ(recs[i].value, written[i].value);
  }
}

TEST(CommitLog, EverySingleBitFlipIsDetected) {
  TempDir dir;
  const auto path = dir / (segment_file_stem(0) + ".log");
  {
    CommitLog log(dir.path(), small_config());
    std::vector<LogEntry> es{entry("abc", 77, "k")};
    log.append(es);
    es = {entry("trailer")};
    log.append(es);
  }
  std::ifstream in(path, std::ios::binary);
  const Bytes original((std::istreambuf_iterator<char>(in)), {});
  const auto first = record_format::framed_size(to_bytes("k"), 3);
  // Bits of the first record body (after the length field).
  for (std::size_t byte = 4; byte < first; ++byte) {
    for (int bit = 0; bit < 8; ++bit) {
      Bytes mutated = original;
      mutated[byte] ^= static_cast<std::uint8_t>(1u << bit);
      bool detected = false;
      try {
        auto recs = record_format::decode_all(mutated, 0);
        detected = recs.empty() || to_string(recs[0].value) != "abc";
      } catch (const Error& e) {
        detected = e.code() == Errc::CorruptRecord;
      }
      ASSERT_TRUE(detected) << "byte " << byte << " bit " << bit;
    }
  }
}

TEST(CommitLog, CapacityExceededRejectsAtomically) {
  TempDir dir;
  auto cfg = small_config();
  cfg.capacity_bytes = 5000;
  CommitLog log(dir.path(), cfg);
  std::vector<LogEntry> es(10, entry(std::string(300, 'z')));
  log.append(es);
  const auto before = log.size_bytes();
  std::vector<LogEntry> more(10, entry(std::string(300, 'z')));
  EXPECT_EQ(error_code_of([&] { log.append(more); }), Errc::StorageFull);
  EXPECT_EQ(log.next_offset(), 10u);
  EXPECT_EQ(log.size_bytes(), before);
}

TEST(CommitLog, OversizedRecordRejected) {
  TempDir dir;
  auto cfg = small_config();
  cfg.max_record_bytes = 100;
  CommitLog log(dir.path(), cfg);
  std::vector<LogEntry> es{entry(std::string(101, 'x'))};
  EXPECT_EQ(error_code_of([&] { log.append(es); }), Errc::MessageTooLarge);
  EXPECT_EQ(log.next_offset(), 0u);
}

TEST(CommitLog, ClosedLogRejectsOperations) {
  TempDir dir;
  CommitLog log(dir.path(), small_config());
  log.close();
  std::vector<LogEntry> es{entry("a")};
  EXPECT_EQ(error_code_of([&] { log.append(es); }), Errc::LogClosed);
  EXPECT_EQ(error_code_of([&] { log.read(0, 10); }), Errc::LogClosed);
}

TEST(CommitLog, TruncateAndResetKeepOffsetsDense) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  for (int i = 0; i < 250; ++i) {
    std::vector<LogEntry> es{entry(std::string(16, 'q'))};
    log.append(es);
  }
  log.truncate_to(130);
  EXPECT_EQ(log.next_offset(), 130u);
  EXPECT_EQ(log.segments().size(), 2u);
  std::vector<LogEntry> es{entry(std::string(16, 'n'))};
  EXPECT_EQ(log.append(es), 130u);
  auto recs = log.read(0, 0xFFFFFFFF);
  ASSERT_EQ(recs.size(), 131u);
  EXPECT_EQ(to_string(recs.back().value), std::string(16, 'n'));
  log.reset(500);
  EXPECT_EQ(log.earliest_offset(), 500u);
  EXPECT_EQ(log.next_offset(), 500u);
  EXPECT_EQ(log.append(es), 500u);
}

TEST(CommitLog, TruncatedLogSurvivesReopen) {
  TempDir dir;
  {
    CommitLog log(dir.path(), hundred_per_segment());
    for (int i = 0; i < 250; ++i) {
      std::vector<LogEntry> es{entry(std::string(16, 'q'))};
      log.append(es);
    }
    log.truncate_to(42);
  }
  CommitLog log(dir.path(), hundred_per_segment());
  EXPECT_EQ(log.next_offset(), 42u);
}

TEST(CommitLog, MisnamedSegmentIsUnrecoverable) {
  TempDir dir;
  { CommitLog log(dir.path(), small_config()); }
  std::ofstream(dir / "123.log") << "junk";
  EXPECT_EQ(error_code_of([&] { CommitLog log(dir.path(), small_config()); }), Errc::UnrecoverableLog);
}

TEST(CommitLog, GapBetweenSegmentsIsUnrecoverable) {
  TempDir dir;
  {
    CommitLog log(dir.path(), hundred_per_segment());
    for (int i = 0; i < 250; ++i) {
      std::vector<LogEntry> es{entry(std::string(16, 'q'))};
      log.append(es);
    }
  }
  std::filesystem::remove(dir / (segment_file_stem(100) + ".log"));
  EXPECT_EQ(error_code_of([&] { CommitLog log(dir.path(), hundred_per_segment()); }), Errc::UnrecoverableLog);
}

TEST(CommitLog, ConfigBoundsAreValidated) {
  TempDir dir;
  LogConfig cfg;
  cfg.retention_ms = 999;
  EXPECT_EQ(error_code_of([&] { CommitLog log(dir.path(), cfg); }), Errc::InvalidConfig);
  cfg = LogConfig{};
  cfg.segment_max_bytes = 4095;
  EXPECT_EQ(error_code_of([&] { CommitLog log(dir.path(), cfg); }), Errc::InvalidConfig);
  cfg = LogConfig{};
  cfg.index_interval_bytes = 127;
  EXPECT_EQ(error_code_of([&] { CommitLog log(dir.path(), cfg); }), Errc::InvalidConfig);
}

TEST(CommitLog, ConcurrentReadersNeverSeePartialRecords) {
  TempDir dir;
  CommitLog log(dir.path(), hundred_per_segment());
  std::atomic<bool> done{false};
  std::atomic<int> failures{0};
  std::thread reader([&] {
    while (!done) {
      try {
        const auto start = log.earliest_offset();
        auto recs = log.read(start, 0xFFFFFFFF);
        for (std::size_t i = 0; i < recs.size(); ++i) {
          if (recs[i].offset != start + i || recs[i].value.size() != 16) ++failures;
        }
      } catch (...) {
        ++failures;
      }
    }
  });
  for (int i = 0; i < 2000; ++i) {
    std::vector<LogEntry> es{entry(std::string(16, 'c'))};
    log.append(es);
  }
  done = true;
  reader.join();
  EXPECT_EQ(failures.load(), 0);
}

}  // namespace
}  // namespace cloudlet
