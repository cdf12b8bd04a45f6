#include "taps/transport_system.hpp"

#include "core.hpp"

namespace taps {

void SystemCore::close_all() {
  auto ls = listeners;
  for (auto& l : ls) l->stop();
  auto cs = connections;
  for (auto& c : cs) c->close();
}

void SystemCore::shutdown() {
  auto ls = listeners;
  for (auto& l : ls) l->stop();
  auto cs = connections;
  for (auto& c : cs) c->abort();
  listeners.clear();
  connections.clear();
}

TransportSystem::TransportSystem(NetworkBackend& backend, TransportConfig cfg) {
  cfg.race.validate();
  if (cfg.protocols.empty()) throw Error(Errc::config_error, "no protocols configured");
  if (cfg.max_message_bytes == 0) throw Error(Errc::config_error, "max_message_bytes must be positive");
  core_ = std::make_shared<SystemCore>(backend, std::move(cfg));
}

TransportSystem::~TransportSystem() { core_->shutdown(); }

Preconnection TransportSystem::new_preconnection(std::optional<LocalEndpoint> local,
                                                 std::optional<RemoteEndpoint> remote, TransportProperties tp,
                                                 SecurityParameters security) {
  return Preconnection(*this, std::move(local), std::move(remote), std::move(tp), security);
}

EventLoop& TransportSystem::loop() { return core_->loop(); }
NetworkBackend& TransportSystem::backend() { return core_->backend; }
RaceCache& TransportSystem::cache() { return core_->cache; }
const TransportConfig& TransportSystem::config() const { return core_->config; }
void TransportSystem::close_all() { core_->close_all(); }
std::size_t TransportSystem::open_connections() const { return core_->connections.size(); }

}  // namespace taps
