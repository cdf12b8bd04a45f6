#pragma once

#include <chrono>
#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "taps/event_loop.hpp"
#include "taps/network.hpp"
#include "taps/preconnection.hpp"
#include "taps/protocol.hpp"
#include "taps/racing.hpp"

namespace taps {

struct TransportConfig {
  /// Protocols the system may select from.
  std::vector<ProtocolId> protocols{ProtocolId::tcp, ProtocolId::udp, ProtocolId::msgmux};
  RaceConfig race;
  SystemPolicy policy;
  AdapterOptions adapter;
  std::size_t max_message_bytes = 16u * 1024u * 1024u;
  Duration cache_ttl = std::chrono::seconds(600);
};

class SystemCore;

/// One transport system instance: protocol selection, racing cache and the
/// connections it created, all driven by the backend's event loop.
class TransportSystem {
 public:
  explicit TransportSystem(NetworkBackend& backend, TransportConfig cfg = {});
  ~TransportSystem();
  TransportSystem(const TransportSystem&) = delete;
  TransportSystem& operator=(const TransportSystem&) = delete;

  Preconnection new_preconnection(std::optional<LocalEndpoint> local, std::optional<RemoteEndpoint> remote,
                                  TransportProperties tp = {}, SecurityParameters security = {});

  EventLoop& loop();
  NetworkBackend& backend();
  RaceCache& cache();
  const TransportConfig& config() const;

  /// Stops every listener and closes every open connection.
  void close_all();
  std::size_t open_connections() const;

  const std::shared_ptr<SystemCore>& core() const noexcept { return core_; }

 private:
  std::shared_ptr<SystemCore> core_;
};

}  // namespace taps
