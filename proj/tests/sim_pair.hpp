#pragma once

// Two simulated hosts, each with its own transport system.

#include <functional>
#include <memory>
#include <vector>

#include "taps/netsim.hpp"
#include "taps/transport_system.hpp"

namespace taps::test {

inline const std::string client_addr = "10.0.0.1";
inline const std::string server_addr = "10.0.0.2";

struct SimPair {
  explicit SimPair(std::vector<ProtocolId> client_protocols = {ProtocolId::tcp, ProtocolId::udp, ProtocolId::msgmux},
                   std::vector<ProtocolId> server_protocols = {}, std::uint64_t seed = 1,
                   sim::LinkConfig link = {})
      : world(seed, link) {
    world.net.add_host(client_addr);
    world.net.add_host(server_addr);
    world.net.add_name("server", server_addr);
    client_cfg.protocols = std::move(client_protocols);
    server_cfg.protocols = server_protocols.empty() ? client_cfg.protocols : std::move(server_protocols);
  }

  ~SimPair() {
    client.reset();
    server.reset();
  }

  SimPair(const SimPair&) = delete;
  SimPair& operator=(const SimPair&) = delete;

  /// Creates both transport systems from the current configs.
  SimPair& build() {
    server = std::make_unique<TransportSystem>(world.net.host(server_addr), server_cfg);
    client = std::make_unique<TransportSystem>(world.net.host(client_addr), client_cfg);
    return *this;
  }

  Preconnection server_pre(std::uint16_t port = 5000, TransportProperties tp = {}) {
    if (!server) build();
    return server->new_preconnection(LocalEndpoint{}.with_port(port), std::nullopt, tp);
  }

  Preconnection client_pre(std::uint16_t port = 5000, TransportProperties tp = {}) {
    if (!client) build();
    return client->new_preconnection(std::nullopt, RemoteEndpoint{}.with_address(server_addr).with_port(port), tp);
  }

  /// Advances simulated time until `done` holds or `limit` passes.
  bool run_until(const std::function<bool()>& done, Duration limit = std::chrono::seconds(30)) {
    const TimePoint deadline = world.loop.now() + limit;
    while (!done()) {
      if (world.loop.now() >= deadline) return false;
      world.loop.run_for(std::chrono::milliseconds(1));
    }
    return true;
  }

  void run_for(Duration d) { world.loop.run_for(d); }
  double now_s() const { return to_seconds(world.loop.now()); }

  sim::SimWorld world;
  TransportConfig client_cfg;
  TransportConfig server_cfg;
  std::unique_ptr<TransportSystem> server;
  std::unique_ptr<TransportSystem> client;
};

inline std::string text(const Bytes& b) { return std::string(b.begin(), b.end()); }

}  // namespace taps::test
