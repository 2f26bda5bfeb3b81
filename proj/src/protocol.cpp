#include "cloudlet/protocol.hpp"

namespace cloudlet::protocol {

namespace {

// Every payload decoder must consume its input exactly.
void expect_done(const ByteReader& r) {
  if (!r.done()) throw Error(Errc::Malformed, "trailing bytes in payload");
}

void put_ids(ByteWriter& w, const std::vector<BrokerId>& ids) {
  w.u32(static_cast<std::uint32_t>(ids.size()));
  for (auto id : ids) w.i32(id);
}

std::vector<BrokerId> get_ids(ByteReader& r) {
  const auto n = r.u32();
  if (n > r.remaining() / 4) throw Error(Errc::Malformed, "id list longer than payload");
  std::vector<BrokerId> ids(n);
  for (auto& id : ids) id = r.i32();
  return ids;
}

void put_proposals(ByteWriter& w, const std::vector<IsrProposal>& ps) {
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    w.str(p.topic);
    w.u32(p.partition);
    w.u32(p.leader_epoch);
    put_ids(w, p.isr);
  }
}

std::vector<IsrProposal> get_proposals(ByteReader& r) {
  const auto n = r.u32();
  if (n > r.remaining()) throw Error(Errc::Malformed, "proposal list longer than payload");
  std::vector<IsrProposal> ps(n);
  for (auto& p : ps) {
    p.topic = r.str();
    p.partition = r.u32();
    p.leader_epoch = r.u32();
    p.isr = get_ids(r);
  }
  return ps;
}

template <typename F>
auto decoding(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == Errc::Malformed) throw;
    throw Error(Errc::Malformed, e.what());
  }
}

}  // namespace

Bytes encode_frame(const Frame& f) {
  Bytes out;
  out.reserve(kFrameHeaderBytes + f.payload.size());
  ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(1 + 4 + f.payload.size()));
  w.u8(static_cast<std::uint8_t>(f.type));
  w.u32(f.correlation_id);
  w.raw(f.payload);
  return out;
}

std::optional<Frame> decode_frame(ByteView buf, std::size_t& consumed) {
  consumed = 0;
  if (buf.size() < 4) return std::nullopt;
  ByteReader r(buf);
  const auto total = r.u32();
  if (total < 5 || total > kMaxFrameBytes) throw Error(Errc::Malformed, "bad frame length");
  if (buf.size() - 4 < total) return std::nullopt;
  Frame f;
  const auto type = r.u8();
  if (type < 1 || type > 6) throw Error(Errc::Malformed, "unknown message type " + std::to_string(type));
  f.type = static_cast<MsgType>(type);
  f.correlation_id = r.u32();
  auto payload = r.raw(total - 5);
  f.payload.assign(payload.begin(), payload.end());
  consumed = 4 + total;
  return f;
}

Bytes encode(const ProduceRequest& m) {
  Bytes out;
  ByteWriter w(out);
  w.str(m.topic);
  w.i32(m.partition);
  w.u8(static_cast<std::uint8_t>(m.ack));
  w.u32(m.timeout_ms);
  w.u32(static_cast<std::uint32_t>(m.entries.size()));
  for (const auto& e : m.entries) {
    w.opt_blob(e.key);
    w.blob(e.value);
    w.i64(e.timestamp_ms);
  }
  return out;
}

ProduceRequest decode_produce_request(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    ProduceRequest m;
    m.topic = r.str();
    m.partition = r.i32();
    const auto ack = r.u8();
    if (ack > 1) throw Error(Errc::Malformed, "bad ack mode");
    m.ack = static_cast<AckMode>(ack);
    m.timeout_ms = r.u32();
    const auto n = r.u32();
    if (n > r.remaining()) throw Error(Errc::Malformed, "entry count longer than payload");
    m.entries.resize(n);
    for (auto& e : m.entries) {
      e.key = r.opt_blob();
      e.value = r.blob();
      e.timestamp_ms = r.i64();
    }
    expect_done(r);
    return m;
  });
}

Bytes encode(const ProduceResponse& m) {
  Bytes out;
  ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(m.offsets.size()));
  for (const auto& o : m.offsets) {
    w.u32(o.partition);
    w.u64(o.offset);
  }
  w.u8(m.committed ? 1 : 0);
  return out;
}

ProduceResponse decode_produce_response(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    ProduceResponse m;
    const auto n = r.u32();
    if (n > r.remaining() / 12) throw Error(Errc::Malformed, "offset list longer than payload");
    m.offsets.resize(n);
    for (auto& o : m.offsets) {
      o.partition = r.u32();
      o.offset = r.u64();
    }
    m.committed = r.u8() != 0;
    expect_done(r);
    return m;
  });
}

Bytes encode(const FetchRequest& m) {
  Bytes out;
  ByteWriter w(out);
  w.str(m.topic);
  w.u32(m.partition);
  w.u64(m.from_offset);
  w.u32(m.max_bytes);
  w.u32(m.wait_ms);
  w.i32(m.replica_id);
  w.u32(m.leader_epoch);
  return out;
}

FetchRequest decode_fetch_request(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    FetchRequest m;
    m.topic = r.str();
    m.partition = r.u32();
    m.from_offset = r.u64();
    m.max_bytes = r.u32();
    m.wait_ms = r.u32();
    m.replica_id = r.i32();
    m.leader_epoch = r.u32();
    expect_done(r);
    return m;
  });
}

Bytes encode(const FetchResponse& m) {
  Bytes out;
  ByteWriter w(out);
  w.u64(m.high_watermark);
  w.u64(m.earliest_offset);
  w.u64(m.next_offset);
  w.u32(m.leader_epoch);
  w.u64(m.base_offset);
  w.blob(m.records);
  return out;
}

FetchResponse decode_fetch_response(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    FetchResponse m;
    m.high_watermark = r.u64();
    m.earliest_offset = r.u64();
    m.next_offset = r.u64();
    m.leader_epoch = r.u32();
    m.base_offset = r.u64();
    m.records = r.blob();
    expect_done(r);
    return m;
  });
}

Bytes encode(const Heartbeat& m) {
  Bytes out;
  ByteWriter w(out);
  w.i32(m.broker_id);
  w.u64(m.metadata_version);
  put_proposals(w, m.proposals);
  return out;
}

Heartbeat decode_heartbeat(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    Heartbeat m;
    m.broker_id = r.i32();
    m.metadata_version = r.u64();
    m.proposals = get_proposals(r);
    expect_done(r);
    return m;
  });
}

Bytes encode(const MetadataRequest& m) {
  Bytes body;
  ByteWriter bw(body);
  if (m.kind == MetadataKind::CreateTopic) {
    bw.str(m.create.name);
    bw.u32(m.create.partition_count);
    bw.u32(m.create.replication_factor);
    bw.u64(m.create.retention_ms);
  } else {
    bw.raw(to_bytes(m.json));
  }
  Bytes out;
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.blob(body);
  return out;
}

MetadataRequest decode_metadata_request(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    MetadataRequest m;
    const auto kind = r.u8();
    if (kind > 3) throw Error(Errc::Malformed, "bad metadata kind");
    m.kind = static_cast<MetadataKind>(kind);
    auto body = r.blob();
    expect_done(r);
    if (m.kind == MetadataKind::CreateTopic) {
      ByteReader br(body);
      m.create.name = br.str();
      m.create.partition_count = br.u32();
      m.create.replication_factor = br.u32();
      m.create.retention_ms = br.u64();
      expect_done(br);
    } else {
      m.json = to_string(body);
    }
    return m;
  });
}

Bytes encode(const FailoverDecree& m) {
  Bytes out;
  ByteWriter w(out);
  w.str(m.topic);
  w.u32(m.partition);
  w.i32(m.leader);
  w.u32(m.leader_epoch);
  put_ids(w, m.isr);
  w.blob(to_bytes(m.snapshot));
  return out;
}

FailoverDecree decode_failover_decree(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    FailoverDecree m;
    m.topic = r.str();
    m.partition = r.u32();
    m.leader = r.i32();
    m.leader_epoch = r.u32();
    m.isr = get_ids(r);
    m.snapshot = to_string(r.blob());
    expect_done(r);
    return m;
  });
}

Bytes encode(const NotLeaderHint& m) {
  Bytes out;
  ByteWriter w(out);
  w.i32(m.leader);
  w.u32(m.leader_epoch);
  w.str(m.leader_address);
  return out;
}

NotLeaderHint decode_not_leader(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    NotLeaderHint m;
    m.leader = r.i32();
    m.leader_epoch = r.u32();
    m.leader_address = r.str();
    expect_done(r);
    return m;
  });
}

Bytes encode(const RangeHint& m) {
  Bytes out;
  ByteWriter w(out);
  w.u64(m.earliest_offset);
  w.u64(m.next_offset);
  return out;
}

RangeHint decode_range(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    RangeHint m;
    m.earliest_offset = r.u64();
    m.next_offset = r.u64();
    expect_done(r);
    return m;
  });
}

Bytes encode(const Response& m) {
  Bytes out;
  ByteWriter w(out);
  w.u16(static_cast<std::uint16_t>(m.status));
  w.str(m.message.size() > 0xFFFF ? m.message.substr(0, 0xFFFF) : m.message);
  w.blob(m.body);
  return out;
}

Response decode_response(ByteView b) {
  return decoding([&] {
    ByteReader r(b);
    Response m;
    m.status = static_cast<Errc>(r.u16());
    m.message = r.str();
    m.body = r.blob();
    expect_done(r);
    return m;
  });
}

Frame response_frame(std::uint32_t correlation_id, Errc status, std::string message, Bytes body) {
  return Frame{MsgType::Response, correlation_id, encode(Response{status, std::move(message), std::move(body)})};
}

}  // namespace cloudlet::protocol
