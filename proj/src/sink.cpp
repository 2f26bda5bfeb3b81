#include "cloudlet/sink.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"
#include "cloudlet/gateway.hpp"

namespace cloudlet {

using nlohmann::json;

json GapEvent::to_json() const {
  return {{"topic", topic}, {"partition", partition}, {"from", from}, {"to", to}, {"at_ms", at_ms}};
}

GapEvent GapEvent::from_json(const json& j) {
  GapEvent g;
  g.topic = j.at("topic").get<std::string>();
  g.partition = j.at("partition").get<std::uint32_t>();
  g.from = j.at("from").get<std::uint64_t>();
  g.to = j.at("to").get<std::uint64_t>();
  g.at_ms = j.at("at_ms").get<std::int64_t>();
  return g;
}

json SinkStats::to_json() const {
  return {{"fetches", fetches},   {"fetch_errors", fetch_errors}, {"records", records},
          {"stored", stored},     {"duplicates", duplicates},     {"dead_letters", dead_letters},
          {"batches", batches}};
}

DecodedMeasurement decode_measurement(ByteView value) {
  const auto fail = [](const std::string& why) { throw Error(Errc::DecodeError, why); };
  json j = json::parse(value.begin(), value.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail("not a JSON object");
  DecodedMeasurement m;
  if (!j.contains("series") || !j["series"].is_string()) fail("series missing");
  m.series = j["series"].get<std::string>();
  if (!j.contains("device_pseudonym") || !j["device_pseudonym"].is_string()) fail("device_pseudonym missing");
  m.point.device_pseudonym = j["device_pseudonym"].get<std::string>();
  if (!j.contains("value") || !j["value"].is_number()) fail("value missing");
  m.point.value = j["value"].get<double>();
  if (!std::isfinite(m.point.value)) fail("value not finite");
  if (!j.contains("timestamp_ms") || !j["timestamp_ms"].is_number_integer()) fail("timestamp_ms missing");
  m.point.timestamp_ms = j["timestamp_ms"].get<std::int64_t>();
  const bool has_lat = j.contains("lat") && j["lat"].is_number();
  const bool has_lon = j.contains("lon") && j["lon"].is_number();
  if (has_lat != has_lon) fail("lat/lon must come together");
  if (has_lat) {
    m.point.lat = j["lat"].get<double>();
    m.point.lon = j["lon"].get<double>();
  }
  if (j.contains("attributes")) {
    if (!j["attributes"].is_object()) fail("attributes not an object");
    for (const auto& [k, v] : j["attributes"].items()) {
      if (!v.is_string()) fail("attribute " + k + " not a string");
      m.point.attributes[k] = v.get<std::string>();
    }
  }
  return m;
}

Sink::Sink(SinkConfig config, Executor& exec, BrokerClient& client)
    : config_(std::move(config)), exec_(exec), client_(client), alive_(std::make_shared<bool>(true)) {
  if (config_.topics.empty()) throw Error(Errc::ConfigError, "sink needs at least one topic");
  if (config_.max_records_per_batch == 0) throw Error(Errc::ConfigError, "max_records_per_batch must be positive");
  if (config_.rate_cap_per_s < 0) throw Error(Errc::ConfigError, "rate cap must be >= 0");
  store_ = std::make_unique<TsStore>(config_.store_dir, config_.sync);
  load_state();
}

Sink::~Sink() {
  *alive_ = false;
  stop();
}

void Sink::load_state() {
  if (std::filesystem::exists(checkpoint_path())) {
    json j = json::parse(read_file(checkpoint_path()), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(Errc::CorruptRecord, "unreadable sink checkpoint");
    for (const auto& [topic, parts] : j.at("positions").items()) {
      for (const auto& [p, off] : parts.items()) {
        positions_[{topic, static_cast<std::uint32_t>(std::stoul(p))}] = off.get<std::uint64_t>();
      }
    }
    for (const auto& g : j.value("gaps", json::array())) gaps_.push_back(GapEvent::from_json(g));
    lost_ = j.value("lost", std::uint64_t{0});
  }
  if (std::filesystem::exists(dead_letter_path())) {
    auto text = read_file(dead_letter_path());
    if (!text.empty() && text.back() != '\n') {
      // Drop a line torn by a crash so the next append starts clean.
      text.erase(text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1);
      atomic_write_file(dead_letter_path(), text, config_.sync);
    }
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;  // torn final line
      dead_set_.emplace(j.value("topic", ""), j.value("partition", 0u), j.value("offset", std::uint64_t{0}));
    }
  }
}

void Sink::start() {
  if (running_) return;
  running_ = true;
  crashed_ = false;
  discover();
}

void Sink::stop() {
  running_ = false;
  if (timer_) exec_.cancel(*timer_);
  if (meta_timer_) exec_.cancel(*meta_timer_);
  timer_.reset();
  meta_timer_.reset();
}

Positions Sink::checkpoint_state() const {
  Positions out = positions_;
  for (const auto& k : partitions_) out.emplace(k, 0);
  return out;
}

json Sink::stats_json() const {
  json positions = json::object();
  for (const auto& [k, v] : checkpoint_state()) positions[k.first][std::to_string(k.second)] = v;
  json gaps = json::array();
  for (const auto& g : gaps_) gaps.push_back(g.to_json());
  json out = stats_.to_json();
  out["positions"] = positions;
  out["gaps"] = gaps;
  out["lost"] = lost_;
  return out;
}

bool Sink::stage(std::string_view name) {
  if (stage_hook_ && stage_hook_(name)) {
    crashed_ = true;
    stop();
    return false;
  }
  return true;
}

void Sink::schedule_step(std::int64_t delay_ms) {
  if (!running_) return;
  if (timer_) exec_.cancel(*timer_);
  auto alive = alive_;
  timer_ = exec_.schedule_after_ms(delay_ms, [this, alive] {
    if (!*alive) return;
    timer_.reset();
    step();
  });
}

void Sink::discover() {
  auto alive = alive_;
  client_.refresh_metadata([this, alive](Errc) {
    if (!*alive || !running_) return;
    const auto& view = client_.view();
    bool missing = false;
    std::vector<PartitionKey> parts;
    for (const auto& t : config_.topics) {
      auto it = view.topics.find(t);
      if (it == view.topics.end()) {
        missing = true;
        continue;
      }
      for (std::uint32_t p = 0; p < it->second.partitions.size(); ++p) parts.emplace_back(t, p);
    }
    partitions_ = std::move(parts);
    if (cursor_ >= partitions_.size()) cursor_ = 0;
    if (missing || partitions_.empty()) {
      auto alive2 = alive_;
      if (meta_timer_) exec_.cancel(*meta_timer_);
      meta_timer_ = exec_.schedule_after_ms(config_.metadata_refresh_ms, [this, alive2] {
        if (!*alive2 || !running_) return;
        meta_timer_.reset();
        discover();
      });
      if (partitions_.empty()) return;
      // Drain what exists meanwhile; the refresh timer above adds the rest.
    }
    if (!in_flight_ && !timer_) schedule_step(0);
  });
}

void Sink::step() {
  if (!running_ || in_flight_ || partitions_.empty()) return;
  if (cursor_ >= partitions_.size()) cursor_ = 0;
  const auto key = partitions_[cursor_];
  const auto pos = positions_.count(key) ? positions_[key] : 0;
  in_flight_ = true;
  ++stats_.fetches;
  auto alive = alive_;
  client_.fetch(key.first, key.second, pos, config_.max_bytes, 0, [this, alive, key, pos](FetchResult r) {
    if (!*alive) return;
    in_flight_ = false;
    if (!running_) return;
    on_fetch(key, pos, std::move(r));
  });
}

void Sink::on_fetch(const PartitionKey& key, std::uint64_t asked, FetchResult r) {
  const auto advance = [this](std::int64_t delay_ms) {
    if (++cursor_ >= partitions_.size()) {
      cursor_ = 0;
      if (!round_progress_ && delay_ms == 0) delay_ms = config_.idle_backoff_ms;
      round_progress_ = false;
    }
    schedule_step(delay_ms);
  };

  if (r.status == Errc::OffsetOutOfRange) {
    observed_hw_[key] = r.high_watermark;
    if (asked < r.earliest_offset) {
      gaps_.push_back(GapEvent{key.first, key.second, asked, r.earliest_offset, exec_.now_ms()});
      lost_ += r.earliest_offset - asked;
      positions_[key] = r.earliest_offset;
    } else {
      // Ahead of the log, e.g. after an unclean leader change. Resume at its end.
      positions_[key] = r.next_offset;
    }
    persist_checkpoint();
    round_progress_ = true;
    return advance(0);
  }
  if (!r.ok()) {
    ++stats_.fetch_errors;
    if (r.status == Errc::UnknownTopic || r.status == Errc::UnknownTopicOrPartition) {
      discover();
      return;
    }
    return advance(config_.error_backoff_ms);
  }
  observed_hw_[key] = r.high_watermark;
  if (!stage("fetched")) return;

  std::uint64_t next = asked;
  std::size_t taken = 0;
  std::vector<std::pair<std::string, StoredPoint>> fresh;
  std::vector<json> dead;
  for (const auto& rec : r.records) {
    if (rec.offset < next) continue;
    if (taken >= config_.max_records_per_batch) break;
    ++taken;
    ++stats_.records;
    next = rec.offset + 1;
    try {
      auto m = decode_measurement(rec.value);
      m.point.partition = key.second;
      m.point.offset = rec.offset;
      if (store_->add(m.series, m.point)) {
        fresh.emplace_back(std::move(m.series), std::move(m.point));
      } else {
        ++stats_.duplicates;
      }
    } catch (const Error& e) {
      if (dead_set_.emplace(key.first, key.second, rec.offset).second) {
        dead.push_back({{"topic", key.first},
                        {"partition", key.second},
                        {"offset", rec.offset},
                        {"raw", base64_encode(rec.value)},
                        {"error", e.what()}});
      }
    }
  }
  if (taken == 0) return advance(0);

  store_->flush();
  append_dead_letters(dead);
  ++stats_.batches;
  stats_.stored += fresh.size();
  stats_.dead_letters += dead.size();
  if (!stage("stored")) return;
  positions_[key] = next;
  persist_checkpoint();
  if (!stage("checkpointed")) return;
  if (stored_hook_) {
    for (const auto& [series, p] : fresh) stored_hook_(series, p);
  }
  round_progress_ = true;
  std::int64_t delay = 0;
  if (config_.rate_cap_per_s > 0) {
    delay = static_cast<std::int64_t>(std::ceil(static_cast<double>(taken) * 1000.0 / config_.rate_cap_per_s));
  }
  advance(delay);
}

void Sink::persist_checkpoint() {
  json positions = json::object();
  for (const auto& [k, v] : positions_) positions[k.first][std::to_string(k.second)] = v;
  json gaps = json::array();
  for (const auto& g : gaps_) gaps.push_back(g.to_json());
  json j = {{"v", 1}, {"positions", positions}, {"gaps", gaps}, {"lost", lost_}};
  atomic_write_file(checkpoint_path(), j.dump(), config_.sync);
}

void Sink::append_dead_letters(const std::vector<json>& lines) {
  if (lines.empty()) return;
  std::string out;
  for (const auto& l : lines) out += l.dump() + "\n";
  const int fd = ::open(dead_letter_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(Errc::Io, "cannot open " + dead_letter_path().string());
  std::size_t done = 0;
  while (done < out.size()) {
    const auto n = ::write(fd, out.data() + done, out.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw Error(Errc::Io, "dead-letter write failed");
    }
    done += static_cast<std::size_t>(n);
  }
  if (config_.sync) ::fsync(fd);
  ::close(fd);
}

}  // namespace cloudlet
