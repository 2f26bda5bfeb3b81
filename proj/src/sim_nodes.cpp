#include "cloudlet/sim_nodes.hpp"

namespace cloudlet::sim {

std::string client_address(const std::string& host) { return host + ":9092"; }
std::string peer_address(const std::string& host) { return host + ":9093"; }

std::vector<BrokerConfig> cluster_configs(int n, const std::filesystem::path& root, const std::string& prefix) {
  std::vector<BrokerConfig> out;
  for (int i = 0; i < n; ++i) {
    BrokerConfig c;
    c.broker_id = i;
    c.data_dir = root / ("broker-" + std::to_string(i));
    c.client_listen = client_address(prefix + std::to_string(i));
    c.peer_listen = peer_address(prefix + std::to_string(i));
    c.log.fsync = false;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto host = prefix + std::to_string(j);
      c.peers.push_back(PeerConfig{j, peer_address(host), client_address(host)});
    }
    out.push_back(std::move(c));
  }
  return out;
}

BrokerProcess::BrokerProcess(Network& net, std::string host, BrokerConfig config)
    : net_(net), host_(std::move(host)), config_(std::move(config)) {}

BrokerProcess::~BrokerProcess() { crash(); }

void BrokerProcess::start() {
  if (node_) return;
  exec_ = std::make_unique<SimExecutor>(net_.scheduler());
  transport_ = net_.transport(host_, *exec_);
  auto node = std::make_unique<BrokerNode>(config_, *exec_, *transport_);
  node->start();
  node_ = std::move(node);
  auto* n = node_.get();
  net_.listen(
      config_.client_listen, host_, *exec_,
      [n](protocol::Frame f, ReplyFn reply) { n->handle(std::move(f), std::move(reply), Origin::Client); },
      [n](const std::string&) { n->client_connected(); });
  net_.listen(config_.peer_listen, host_, *exec_,
              [n](protocol::Frame f, ReplyFn reply) { n->handle(std::move(f), std::move(reply), Origin::Peer); });
}

void BrokerProcess::teardown() {
  net_.unlisten(config_.client_listen);
  net_.unlisten(config_.peer_listen);
  if (exec_) exec_->halt();
  node_.reset();
  transport_.reset();
  exec_.reset();
}

void BrokerProcess::stop() {
  if (!node_) return;
  net_.unlisten(config_.client_listen);
  net_.unlisten(config_.peer_listen);
  node_->stop();
  teardown();
}

void BrokerProcess::crash() {
  if (!node_) return;
  net_.unlisten(config_.client_listen);
  net_.unlisten(config_.peer_listen);
  node_->crash();
  teardown();
}

}  // namespace cloudlet::sim
