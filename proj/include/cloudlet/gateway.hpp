#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudlet/client.hpp"
#include "cloudlet/runtime.hpp"

namespace cloudlet {

struct HttpRequest {
  std::string method;  // "GET", "POST"
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct HttpResponse {
  int status = 200;
  nlohmann::json body = nlohmann::json::object();
};

// Binary carriage of HTTP exchanges over the simulated network.
Bytes encode_http(const HttpRequest& r);
HttpRequest decode_http_request(ByteView b);
Bytes encode_http(const HttpResponse& r);
HttpResponse decode_http_response(ByteView b);

// Standard base64 with padding. decode returns nullopt on any malformed input.
std::string base64_encode(ByteView data);
std::optional<Bytes> base64_decode(std::string_view text);

// First 8 bytes of HMAC-SHA-256(secret, device_id), lowercase hex.
std::string device_pseudonym(const std::string& secret, const std::string& device_id);

struct GatewayConfig {
  std::string listen = "127.0.0.1:8080";
  std::vector<std::string> brokers;
  std::string pseudonym_secret;
  std::map<std::string, std::string> routing;  // series -> topic
  std::uint32_t max_body_bytes = 1u << 20;
  std::uint32_t request_timeout_ms = 10'000;

  void validate() const;
  // Secret file: raw bytes, one trailing newline stripped. Flag path wins over
  // CLOUDLET_GATEWAY_SECRET_FILE.
  static std::string load_secret(const std::optional<std::filesystem::path>& flag_path);
  // Routing file: JSON object {"series": "topic", ...}.
  static std::map<std::string, std::string> load_routing(const std::filesystem::path& path);
};

struct GatewayCounters {
  std::uint64_t requests = 0;
  std::uint64_t produce_requests = 0;
  std::uint64_t fetch_requests = 0;
  std::uint64_t measurements = 0;
  std::uint64_t records_in = 0;
  std::uint64_t records_out = 0;
  std::uint64_t client_errors = 0;
  std::uint64_t server_errors = 0;

  nlohmann::json to_json() const;
};

// REST ingress/egress. Holds no state besides counters and the client's cached
// cluster view. Runs on |exec|; handle() completes asynchronously.
class Gateway {
 public:
  Gateway(GatewayConfig config, Executor& exec, BrokerClient& client);

  void handle(HttpRequest request, std::function<void(HttpResponse)> done);

  const GatewayCounters& counters() const { return counters_; }
  const GatewayConfig& config() const { return config_; }

 private:
  using Done = std::function<void(HttpResponse)>;
  void post_messages(const std::string& topic, const HttpRequest& req, Done done);
  void get_messages(const std::string& topic, const std::string& partition, const HttpRequest& req, Done done);
  void post_measurement(const HttpRequest& req, Done done);
  void get_stats(const HttpRequest& req, Done done);

  GatewayConfig config_;
  Executor& exec_;
  BrokerClient& client_;
  GatewayCounters counters_;
};

// Builds the {"error", "detail"} body used by every failure response.
HttpResponse http_error(int status, const std::string& code, const std::string& detail);
// Maps a broker-side failure onto an HTTP status and error code.
HttpResponse http_error(Errc code, const std::string& detail);

// HTTP/1.1 front end for a Gateway, backed by cpp-httplib.
class HttpServer {
 public:
  HttpServer(Gateway& gateway, Executor& exec);
  ~HttpServer();

  // Binds and serves in a background thread. Throws BindFailed.
  void start(const std::string& address);
  std::uint16_t port() const { return port_; }
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
};

}  // namespace cloudlet
