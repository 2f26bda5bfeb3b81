#pragma once

// Binary protocol shared by the client port and the peer port.
//
// Frame (big-endian):
//   total_len u32 | msg_type u8 | correlation_id u32 | payload
// total_len counts every byte after itself (1 + 4 + payload size).
//
// Payload layouts. Strings are u16 length + bytes; lists are u32 count + items;
// blobs are u32 length + bytes; optional blobs are i32 length (-1 absent) + bytes.
//
//   1 produce   topic str | partition i32 (-1 = route by key) | ack_mode u8 (0 leader_only, 1 all_isr)
//               | timeout_ms u32 | entries list of (key opt_blob | value blob | timestamp_ms i64)
//     reply     offsets list of (partition u32 | offset u64) | committed u8
//   2 fetch     topic str | partition u32 | from_offset u64 | max_bytes u32 | wait_ms u32
//               | replica_id i32 (-1 = consumer) | leader_epoch u32
//     reply     high_watermark u64 | earliest_offset u64 | next_offset u64 | leader_epoch u32
//               | base_offset u64 | records blob (dense run of on-disk record frames)
//   3 heartbeat broker_id i32 | metadata_version u64 | isr proposals list of
//               (topic str | partition u32 | leader_epoch u32 | isr list of i32)
//     reply     broker_id i32 | metadata_version u64 | accepted proposals (same layout)
//   4 metadata  kind u8 (0 get, 1 create_topic, 2 push, 3 stats) | body blob
//               create_topic body: name str | partition_count u32 | replication_factor u32 | retention_ms u64
//               push body: registry snapshot JSON; stats body: JSON query (may be empty)
//     reply     JSON document (registry snapshot plus "brokers" and "controller", or stats)
//   5 failover  topic str | partition u32 | leader i32 | leader_epoch u32 | isr list of i32
//               | registry snapshot JSON blob
//     reply     empty
//   6 response  status u16 (0 = ok, otherwise an Errc) | message str | body blob
//               body is the per-request reply above when status is 0; on NotLeader it is
//               leader i32 | leader_epoch u32 | leader_address str; on OffsetOutOfRange it is
//               earliest_offset u64 | next_offset u64.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cloudlet/bytes.hpp"
#include "cloudlet/commit_log.hpp"
#include "cloudlet/error.hpp"
#include "cloudlet/topics.hpp"

namespace cloudlet::protocol {

enum class MsgType : std::uint8_t {
  Produce = 1,
  Fetch = 2,
  Heartbeat = 3,
  Metadata = 4,
  FailoverDecree = 5,
  Response = 6,
};

inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;
inline constexpr std::size_t kFrameHeaderBytes = 4 + 1 + 4;

struct Frame {
  MsgType type = MsgType::Response;
  std::uint32_t correlation_id = 0;
  Bytes payload;
};

Bytes encode_frame(const Frame& f);
// Decodes one frame from the front of |buf|. Returns nullopt when more bytes are
// needed; throws Errc::Malformed for an unknown type or an oversized length.
std::optional<Frame> decode_frame(ByteView buf, std::size_t& consumed);

enum class AckMode : std::uint8_t { LeaderOnly = 0, AllIsr = 1 };

struct ProduceRequest {
  std::string topic;
  std::int32_t partition = -1;
  AckMode ack = AckMode::AllIsr;
  std::uint32_t timeout_ms = 30000;
  std::vector<LogEntry> entries;
};

struct PartitionOffset {
  std::uint32_t partition = 0;
  std::uint64_t offset = 0;
  bool operator==(const PartitionOffset&) const = default;
};

struct ProduceResponse {
  std::vector<PartitionOffset> offsets;
  bool committed = false;
};

struct FetchRequest {
  std::string topic;
  std::uint32_t partition = 0;
  std::uint64_t from_offset = 0;
  std::uint32_t max_bytes = 1u << 20;
  std::uint32_t wait_ms = 0;
  std::int32_t replica_id = -1;
  std::uint32_t leader_epoch = 0;
};

struct FetchResponse {
  std::uint64_t high_watermark = 0;
  std::uint64_t earliest_offset = 0;
  std::uint64_t next_offset = 0;
  std::uint32_t leader_epoch = 0;
  std::uint64_t base_offset = 0;
  Bytes records;  // framed records, first at base_offset

  std::vector<Record> decode_records() const { return record_format::decode_all(records, base_offset); }
};

struct IsrProposal {
  std::string topic;
  std::uint32_t partition = 0;
  std::uint32_t leader_epoch = 0;
  std::vector<BrokerId> isr;
  bool operator==(const IsrProposal&) const = default;
};

struct Heartbeat {
  BrokerId broker_id = 0;
  std::uint64_t metadata_version = 0;
  std::vector<IsrProposal> proposals;
};

enum class MetadataKind : std::uint8_t { Get = 0, CreateTopic = 1, Push = 2, Stats = 3 };

struct MetadataRequest {
  MetadataKind kind = MetadataKind::Get;
  TopicConfig create;  // CreateTopic only
  std::string json;    // Push snapshot / Stats query
};

struct FailoverDecree {
  std::string topic;
  std::uint32_t partition = 0;
  BrokerId leader = kNoLeader;
  std::uint32_t leader_epoch = 0;
  std::vector<BrokerId> isr;
  std::string snapshot;
};

struct NotLeaderHint {
  BrokerId leader = kNoLeader;
  std::uint32_t leader_epoch = 0;
  std::string leader_address;
};

struct RangeHint {
  std::uint64_t earliest_offset = 0;
  std::uint64_t next_offset = 0;
};

struct Response {
  Errc status = Errc::Ok;
  std::string message;
  Bytes body;

  bool ok() const { return status == Errc::Ok; }
};

Bytes encode(const ProduceRequest& m);
Bytes encode(const ProduceResponse& m);
Bytes encode(const FetchRequest& m);
Bytes encode(const FetchResponse& m);
Bytes encode(const Heartbeat& m);
Bytes encode(const MetadataRequest& m);
Bytes encode(const FailoverDecree& m);
Bytes encode(const NotLeaderHint& m);
Bytes encode(const RangeHint& m);
Bytes encode(const Response& m);

ProduceRequest decode_produce_request(ByteView b);
ProduceResponse decode_produce_response(ByteView b);
FetchRequest decode_fetch_request(ByteView b);
FetchResponse decode_fetch_response(ByteView b);
Heartbeat decode_heartbeat(ByteView b);
MetadataRequest decode_metadata_request(ByteView b);
FailoverDecree decode_failover_decree(ByteView b);
NotLeaderHint decode_not_leader(ByteView b);
RangeHint decode_range(ByteView b);
Response decode_response(ByteView b);

inline Frame request_frame(MsgType type, Bytes payload) { return Frame{type, 0, std::move(payload)}; }
Frame response_frame(std::uint32_t correlation_id, Errc status, std::string message = {}, Bytes body = {});

}  // namespace cloudlet::protocol
