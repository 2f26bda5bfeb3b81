#pragma once

#include <memory>
#include <string>

#include "cloudlet/broker.hpp"
#include "cloudlet/sim.hpp"

namespace cloudlet::sim {

// Simulated broker addresses: client port "<host>:9092", peer port "<host>:9093".
std::string client_address(const std::string& host);
std::string peer_address(const std::string& host);

// Builds configs for an n-broker cluster on hosts "<prefix><id>", data under |root|/broker-<id>.
std::vector<BrokerConfig> cluster_configs(int n, const std::filesystem::path& root, const std::string& prefix = "b");

// A broker "process" on a simulated host: its own executor, outbound transport
// and listeners. crash() models abrupt process death; files stay on disk.
class BrokerProcess {
 public:
  BrokerProcess(Network& net, std::string host, BrokerConfig config);
  ~BrokerProcess();

  void start();
  void stop();
  void crash();
  bool up() const { return node_ != nullptr; }

  BrokerNode& node() { return *node_; }
  const BrokerConfig& config() const { return config_; }
  const std::string& host() const { return host_; }

 private:
  void teardown();

  Network& net_;
  std::string host_;
  BrokerConfig config_;
  std::unique_ptr<SimExecutor> exec_;
  std::unique_ptr<Transport> transport_;
  std::unique_ptr<BrokerNode> node_;
};

}  // namespace cloudlet::sim
