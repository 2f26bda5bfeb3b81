#include "cloudlet/gateway.hpp"

#include <openssl/evp.h>
#include <openssl/hmac.h>

#include <cmath>
#include <cstdlib>
#include <future>
#include <thread>

#include <httplib.h>

#include "cloudlet/error.hpp"
#include "cloudlet/fsutil.hpp"
#include "cloudlet/tcp.hpp"

namespace cloudlet {

using nlohmann::json;

// ---- sim carriage ----

Bytes encode_http(const HttpRequest& r) {
  Bytes out;
  ByteWriter w(out);
  w.str(r.method);
  w.str(r.path);
  w.u32(static_cast<std::uint32_t>(r.query.size()));
  for (const auto& [k, v] : r.query) {
    w.str(k);
    w.str(v);
  }
  w.blob(ByteView(reinterpret_cast<const std::uint8_t*>(r.body.data()), r.body.size()));
  return out;
}

HttpRequest decode_http_request(ByteView b) {
  ByteReader r(b);
  HttpRequest req;
  req.method = r.str();
  req.path = r.str();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto k = r.str();
    req.query[k] = r.str();
  }
  const auto body = r.blob();
  req.body.assign(body.begin(), body.end());
  return req;
}

Bytes encode_http(const HttpResponse& r) {
  Bytes out;
  ByteWriter w(out);
  w.u16(static_cast<std::uint16_t>(r.status));
  const auto text = r.body.dump();
  w.blob(ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return out;
}

HttpResponse decode_http_response(ByteView b) {
  ByteReader r(b);
  HttpResponse resp;
  resp.status = r.u16();
  const auto body = r.blob();
  resp.body = json::parse(body.begin(), body.end());
  return resp;
}

// ---- encoding helpers ----

std::string base64_encode(ByteView data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::optional<Bytes> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) return std::nullopt;
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool alpha = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' || c == '/';
    if (c == '=') {
      if (i + 2 < text.size()) return std::nullopt;  // padding only in the last two places
      ++pad;
    } else if (!alpha || pad > 0) {
      return std::nullopt;
    }
  }
  if (text.empty()) return Bytes{};
  Bytes out(text.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) return std::nullopt;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string device_pseudonym(const std::string& secret, const std::string& device_id) {
  unsigned char mac[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  HMAC(EVP_sha256(), secret.data(), static_cast<int>(secret.size()),
       reinterpret_cast<const unsigned char*>(device_id.data()), device_id.size(), mac, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (int i = 0; i < 8; ++i) {
    out.push_back(hex[mac[i] >> 4]);
    out.push_back(hex[mac[i] & 0xf]);
  }
  return out;
}

// ---- config ----

void GatewayConfig::validate() const {
  if (pseudonym_secret.size() < 16) throw Error(Errc::ConfigError, "pseudonym secret must be at least 16 bytes");
  if (brokers.empty()) throw Error(Errc::ConfigError, "gateway needs at least one broker address");
  if (max_body_bytes == 0) throw Error(Errc::ConfigError, "max_body_bytes must be positive");
  for (const auto& [series, topic] : routing) {
    if (series.empty() || topic.empty()) throw Error(Errc::ConfigError, "routing entries need a series and a topic");
  }
}

std::string GatewayConfig::load_secret(const std::optional<std::filesystem::path>& flag_path) {
  std::filesystem::path path;
  if (flag_path) {
    path = *flag_path;
  } else if (const char* env = std::getenv("CLOUDLET_GATEWAY_SECRET_FILE"); env && *env) {
    path = env;
  } else {
    throw Error(Errc::ConfigError, "no pseudonym secret: pass --secret-file or set CLOUDLET_GATEWAY_SECRET_FILE");
  }
  std::string s;
  try {
    s = read_file(path);
  } catch (const std::exception& e) {
    throw Error(Errc::ConfigError, "cannot read secret file " + path.string());
  }
  if (!s.empty() && s.back() == '\n') s.pop_back();
  if (s.size() < 16) throw Error(Errc::ConfigError, "pseudonym secret must be at least 16 bytes");
  return s;
}

std::map<std::string, std::string> GatewayConfig::load_routing(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const std::exception& e) {
    throw Error(Errc::ConfigError, "cannot read routing file " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(Errc::ConfigError, "routing file must be a JSON object of series to topic");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw Error(Errc::ConfigError, "routing target for " + k + " must be a topic name");
    out[k] = v.get<std::string>();
  }
  return out;
}

json GatewayCounters::to_json() const {
  return {{"requests", requests},         {"produce_requests", produce_requests},
          {"fetch_requests", fetch_requests}, {"measurements", measurements},
          {"records_in", records_in},     {"records_out", records_out},
          {"client_errors", client_errors}, {"server_errors", server_errors}};
}

// ---- errors ----

HttpResponse http_error(int status, const std::string& code, const std::string& detail) {
  HttpResponse r;
  r.status = status;
  r.body = {{"error", code}, {"detail", detail}};
  return r;
}

HttpResponse http_error(Errc code, const std::string& detail) {
  switch (code) {
    case Errc::UnknownTopic:
      return http_error(404, "unknown_topic", detail);
    case Errc::UnknownTopicOrPartition:
      return http_error(404, "unknown_partition", detail);
    case Errc::MessageTooLarge:
      return http_error(413, "message_too_large", detail);
    case Errc::OffsetOutOfRange:
      return http_error(416, "offset_out_of_range", detail);
    case Errc::InvalidConfig:
    case Errc::Malformed:
    case Errc::DecodeError:
      return http_error(400, "bad_request", detail);
    case Errc::NotLeader:
    case Errc::Unavailable:
    case Errc::RequestTimeout:
    case Errc::NoViableLeader:
    case Errc::FencedEpoch:
      return http_error(503, "broker_unavailable", detail);
    case Errc::StorageFull:
      return http_error(503, "storage_full", detail);
    default:
      return http_error(500, "internal", std::string(errc_name(code)) + ": " + detail);
  }
}

// ---- gateway ----

namespace {

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    while (i < path.size() && path[i] == '/') ++i;
    const auto j = path.find('/', i);
    const auto end = j == std::string::npos ? path.size() : j;
    if (end > i) parts.push_back(path.substr(i, end - i));
    i = end;
  }
  return parts;
}

std::optional<std::uint64_t> parse_u64(const std::string& s) {
  if (s.empty() || s.size() > 20) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    const std::uint64_t d = static_cast<std::uint64_t>(c - '0');
    if (v > (UINT64_MAX - d) / 10) return std::nullopt;
    v = v * 10 + d;
  }
  return v;
}

Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

}  // namespace

Gateway::Gateway(GatewayConfig config, Executor& exec, BrokerClient& client)
    : config_(std::move(config)), exec_(exec), client_(client) {}

void Gateway::handle(HttpRequest req, Done done) {
  ++counters_.requests;
  auto finish = [this, done = std::move(done)](HttpResponse r) {
    if (r.status >= 500) {
      ++counters_.server_errors;
    } else if (r.status >= 400) {
      ++counters_.client_errors;
    }
    done(std::move(r));
  };
  if (req.body.size() > config_.max_body_bytes) {
    return finish(http_error(413, "body_too_large",
                             "body exceeds " + std::to_string(config_.max_body_bytes) + " bytes"));
  }
  const auto parts = split_path(req.path);
  if (parts.size() >= 1 && parts[0] == "v1") {
    if (parts.size() == 4 && parts[1] == "topics" && parts[3] == "messages" && req.method == "POST") {
      return post_messages(parts[2], req, std::move(finish));
    }
    if (parts.size() == 6 && parts[1] == "topics" && parts[3] == "partitions" && parts[5] == "messages" &&
        req.method == "GET") {
      return get_messages(parts[2], parts[4], req, std::move(finish));
    }
    if (parts.size() == 2 && parts[1] == "measurements" && req.method == "POST") {
      return post_measurement(req, std::move(finish));
    }
    if (parts.size() == 2 && parts[1] == "stats" && req.method == "GET") {
      return get_stats(req, std::move(finish));
    }
  }
  finish(http_error(404, "not_found", "no route for " + req.method + " " + req.path));
}

void Gateway::post_messages(const std::string& topic, const HttpRequest& req, Done done) {
  ++counters_.produce_requests;
  json body = json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object() || !body.contains("records") || !body["records"].is_array()) {
    return done(http_error(400, "bad_json", "body must be a JSON object with a records array"));
  }
  std::vector<LogEntry> entries;
  const auto now = exec_.now_ms();
  for (const auto& rec : body["records"]) {
    if (!rec.is_object() || !rec.contains("value") || !rec["value"].is_string()) {
      return done(http_error(400, "bad_json", "each record needs a base64 string value"));
    }
    LogEntry e;
    auto value = base64_decode(rec["value"].get<std::string>());
    if (!value) return done(http_error(400, "bad_base64", "record value is not valid base64"));
    e.value = std::move(*value);
    if (rec.contains("key") && !rec["key"].is_null()) {
      if (!rec["key"].is_string()) return done(http_error(400, "bad_json", "record key must be a base64 string"));
      auto key = base64_decode(rec["key"].get<std::string>());
      if (!key) return done(http_error(400, "bad_base64", "record key is not valid base64"));
      e.key = std::move(*key);
    }
    e.timestamp_ms = now;
    if (rec.contains("timestamp_ms") && !rec["timestamp_ms"].is_null()) {
      if (!rec["timestamp_ms"].is_number_integer()) {
        return done(http_error(400, "bad_json", "timestamp_ms must be an integer"));
      }
      e.timestamp_ms = rec["timestamp_ms"].get<std::int64_t>();
    }
    entries.push_back(std::move(e));
  }
  const auto n = entries.size();
  client_.produce(topic, std::nullopt, std::move(entries), protocol::AckMode::AllIsr,
                  [this, n, done = std::move(done)](ProduceResult r) {
                    if (!r.ok()) return done(http_error(r.status, r.message));
                    counters_.records_in += n;
                    json offsets = json::array();
                    for (const auto& o : r.offsets) offsets.push_back({{"partition", o.partition}, {"offset", o.offset}});
                    HttpResponse resp;
                    resp.body = {{"offsets", offsets}};
                    done(std::move(resp));
                  });
}

void Gateway::get_messages(const std::string& topic, const std::string& partition, const HttpRequest& req,
                           Done done) {
  ++counters_.fetch_requests;
  const auto p = parse_u64(partition);
  if (!p || *p > UINT32_MAX) return done(http_error(400, "bad_parameter", "partition must be a non-negative integer"));
  auto it = req.query.find("offset");
  if (it == req.query.end()) return done(http_error(400, "missing_offset", "offset query parameter is required"));
  const auto offset = parse_u64(it->second);
  if (!offset) return done(http_error(400, "bad_parameter", "offset must be a non-negative integer"));
  std::uint64_t max_records = 500;
  if (auto m = req.query.find("max_records"); m != req.query.end()) {
    auto v = parse_u64(m->second);
    if (!v || *v == 0) return done(http_error(400, "bad_parameter", "max_records must be a positive integer"));
    max_records = std::min<std::uint64_t>(*v, 5000);
  }
  std::uint64_t wait_ms = 0;
  if (auto w = req.query.find("wait_ms"); w != req.query.end()) {
    auto v = parse_u64(w->second);
    if (!v || *v > 30'000) return done(http_error(400, "bad_parameter", "wait_ms must be an integer in [0, 30000]"));
    wait_ms = *v;
  }
  client_.fetch(topic, static_cast<std::uint32_t>(*p), *offset, 8u << 20, static_cast<std::uint32_t>(wait_ms),
                [this, max_records, done = std::move(done)](FetchResult r) {
                  if (r.status == Errc::OffsetOutOfRange) {
                    auto resp = http_error(416, "offset_out_of_range", r.message);
                    resp.body["earliest_offset"] = r.earliest_offset;
                    resp.body["next_offset"] = r.next_offset;
                    return done(std::move(resp));
                  }
                  if (!r.ok()) return done(http_error(r.status, r.message));
                  json records = json::array();
                  for (const auto& rec : r.records) {
                    if (records.size() >= max_records) break;
                    json j = {{"offset", rec.offset},
                              {"timestamp_ms", rec.timestamp_ms},
                              {"value", base64_encode(rec.value)}};
                    if (rec.key) j["key"] = base64_encode(*rec.key);
                    records.push_back(std::move(j));
                  }
                  counters_.records_out += records.size();
                  HttpResponse resp;
                  resp.body = {{"records", records},
                               {"high_watermark", r.high_watermark},
                               {"earliest_offset", r.earliest_offset}};
                  done(std::move(resp));
                });
}

void Gateway::post_measurement(const HttpRequest& req, Done done) {
  ++counters_.measurements;
  json in = json::parse(req.body, nullptr, false);
  if (in.is_discarded() || !in.is_object()) return done(http_error(400, "bad_json", "body must be a JSON object"));
  if (!in.contains("device_id") || !in["device_id"].is_string() || in["device_id"].get<std::string>().empty()) {
    return done(http_error(400, "bad_json", "device_id must be a non-empty string"));
  }
  if (!in.contains("series") || !in["series"].is_string()) {
    return done(http_error(400, "bad_json", "series must be a string"));
  }
  const auto series = in["series"].get<std::string>();
  auto route = config_.routing.find(series);
  if (route == config_.routing.end()) return done(http_error(400, "unknown_series", "no topic routes series " + series));
  if (!in.contains("value") || !in["value"].is_number() || !std::isfinite(in["value"].get<double>())) {
    return done(http_error(400, "bad_value", "value must be a finite number"));
  }
  json m;
  m["series"] = series;
  m["value"] = in["value"].get<double>();
  m["timestamp_ms"] = exec_.now_ms();
  if (in.contains("timestamp_ms") && !in["timestamp_ms"].is_null()) {
    if (!in["timestamp_ms"].is_number_integer()) return done(http_error(400, "bad_json", "timestamp_ms must be an integer"));
    m["timestamp_ms"] = in["timestamp_ms"].get<std::int64_t>();
  }
  const bool has_lat = in.contains("lat") && !in["lat"].is_null();
  const bool has_lon = in.contains("lon") && !in["lon"].is_null();
  if (has_lat != has_lon) return done(http_error(400, "bad_location", "lat and lon must be given together"));
  if (has_lat) {
    if (!in["lat"].is_number() || !in["lon"].is_number()) {
      return done(http_error(400, "bad_location", "lat and lon must be numbers"));
    }
    const double lat = in["lat"].get<double>();
    const double lon = in["lon"].get<double>();
    if (!(lat >= -90 && lat <= 90) || !(lon >= -180 && lon <= 180)) {
      return done(http_error(400, "bad_location", "lat must be in [-90, 90] and lon in [-180, 180]"));
    }
    m["lat"] = lat;
    m["lon"] = lon;
  }
  if (in.contains("attributes") && !in["attributes"].is_null()) {
    if (!in["attributes"].is_object()) return done(http_error(400, "bad_json", "attributes must be an object"));
    for (const auto& [k, v] : in["attributes"].items()) {
      if (!v.is_string()) return done(http_error(400, "bad_json", "attribute values must be strings"));
    }
    m["attributes"] = in["attributes"];
  }
  const auto pseudonym = device_pseudonym(config_.pseudonym_secret, in["device_id"].get<std::string>());
  m["device_pseudonym"] = pseudonym;

  LogEntry e;
  e.key = to_bytes(pseudonym);
  e.value = to_bytes(m.dump());  // object keys are sorted, no whitespace
  e.timestamp_ms = exec_.now_ms();
  const auto topic = route->second;
  client_.produce(topic, std::nullopt, {std::move(e)}, protocol::AckMode::AllIsr,
                  [this, topic, pseudonym, done = std::move(done)](ProduceResult r) {
                    if (!r.ok()) return done(http_error(r.status, r.message));
                    ++counters_.records_in;
                    HttpResponse resp;
                    resp.status = 202;
                    resp.body = {{"topic", topic},
                                 {"partition", r.offsets.at(0).partition},
                                 {"offset", r.offsets.at(0).offset},
                                 {"device_pseudonym", pseudonym}};
                    done(std::move(resp));
                  });
}

void Gateway::get_stats(const HttpRequest& req, Done done) {
  json query = json::object();
  if (auto t = req.query.find("topic"); t != req.query.end()) query["topic"] = t->second;
  if (auto s = req.query.find("since_ms"); s != req.query.end()) {
    auto v = parse_u64(s->second);
    if (!v) return done(http_error(400, "bad_parameter", "since_ms must be a non-negative integer"));
    query["since_ms"] = *v;
  }
  client_.refresh_metadata([this, query, done = std::move(done)](Errc) mutable {
    std::vector<std::pair<std::string, std::string>> targets;  // label, address
    for (const auto& [id, address] : client_.view().client_addresses) targets.emplace_back(std::to_string(id), address);
    if (targets.empty()) {
      for (const auto& a : config_.brokers) targets.emplace_back(a, a);
    }
    struct Gather {
      json brokers = json::object();
      std::size_t pending = 0;
      Done done;
    };
    auto g = std::make_shared<Gather>();
    g->pending = targets.size();
    g->done = std::move(done);
    auto complete = [this, g] {
      HttpResponse resp;
      resp.body = {{"gateway", counters_.to_json()}, {"brokers", g->brokers}};
      g->done(std::move(resp));
    };
    if (targets.empty()) return complete();
    for (const auto& [label, address] : targets) {
      client_.stats(address, query, [g, label = label, address = address, complete](JsonResult r) {
        if (r.ok()) {
          g->brokers[label] = r.body;
        } else {
          g->brokers[label] = {{"unreachable", true}, {"address", address}, {"detail", r.message}};
        }
        if (--g->pending == 0) complete();
      });
    }
  });
}

// ---- HTTP front end ----

struct HttpServer::Impl {
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(Gateway& gateway, Executor& exec) : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  srv.set_payload_max_length(gateway.config().max_body_bytes);
  auto handler = [&gateway, &exec](const httplib::Request& hreq, httplib::Response& hres) {
    HttpRequest req;
    req.method = hreq.method;
    req.path = hreq.path;
    for (const auto& [k, v] : hreq.params) req.query.emplace(k, v);
    req.body = hreq.body;
    HttpResponse resp;
    if (req.method == "POST" && hreq.has_header("Content-Type") &&
        hreq.get_header_value("Content-Type").find("application/json") == std::string::npos) {
      resp = http_error(415, "unsupported_media_type", "content type must be application/json");
    } else {
      auto promise = std::make_shared<std::promise<HttpResponse>>();
      auto future = promise->get_future();
      exec.post([&gateway, req = std::move(req), promise]() mutable {
        gateway.handle(std::move(req), [promise](HttpResponse r) { promise->set_value(std::move(r)); });
      });
      const auto limit = std::chrono::milliseconds(4 * gateway.config().request_timeout_ms + 30'000);
      if (future.wait_for(limit) == std::future_status::ready) {
        resp = future.get();
      } else {
        resp = http_error(504, "gateway_timeout", "no response from the broker cluster");
      }
    }
    hres.status = resp.status;
    hres.set_content(resp.body.dump(), "application/json");
  };
  srv.Get(".*", handler);
  srv.Post(".*", handler);
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto code = res.status == 413 ? "body_too_large" : res.status == 404 ? "not_found" : "http_error";
    res.set_content(json{{"error", code}, {"detail", httplib::status_message(res.status)}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::start(const std::string& address) {
  const auto hp = HostPort::parse(address);
  auto& srv = impl_->server;
  if (hp.port == 0) {
    const int p = srv.bind_to_any_port(hp.host);
    if (p <= 0) throw Error(Errc::BindFailed, "cannot listen on " + address);
    port_ = static_cast<std::uint16_t>(p);
  } else {
    if (!srv.bind_to_port(hp.host, hp.port)) throw Error(Errc::BindFailed, "cannot listen on " + address);
    port_ = hp.port;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace cloudlet
