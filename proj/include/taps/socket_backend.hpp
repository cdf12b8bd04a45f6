#pragma once

#include "taps/event_loop.hpp"
#include "taps/network.hpp"

namespace taps {

/// NetworkBackend over the host's TCP/UDP sockets.
class SocketBackend final : public NetworkBackend {
 public:
  explicit SocketBackend(RealLoop& loop) : loop_(loop) {}

  EventLoop& loop() override { return loop_; }
  std::vector<std::string> resolve(const std::string& host) override;
  std::shared_ptr<StreamCarrier> connect_stream(const Endpoint& remote) override;
  std::shared_ptr<StreamAcceptor> listen_stream(
      std::uint16_t port, std::function<void(std::shared_ptr<StreamCarrier>)> on_accept) override;
  std::shared_ptr<DatagramSocket> open_datagram(std::optional<std::uint16_t> port) override;

 private:
  RealLoop& loop_;
};

}  // namespace taps
