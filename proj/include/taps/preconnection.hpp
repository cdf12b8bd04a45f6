#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "taps/connection.hpp"
#include "taps/framer.hpp"
#include "taps/properties.hpp"
#include "taps/protocol.hpp"

namespace taps {

struct LocalEndpoint {
  std::optional<std::string> host;
  std::optional<std::uint16_t> port;
  std::optional<std::string> interface;

  LocalEndpoint& with_address(std::string a) {
    host = std::move(a);
    return *this;
  }
  LocalEndpoint& with_port(std::uint16_t p) {
    port = p;
    return *this;
  }
  LocalEndpoint& with_interface(std::string i) {
    interface = std::move(i);
    return *this;
  }
};

struct RemoteEndpoint {
  std::optional<std::string> host;
  std::optional<std::uint16_t> port;

  RemoteEndpoint& with_address(std::string a) {
    host = std::move(a);
    return *this;
  }
  RemoteEndpoint& with_hostname(std::string h) { return with_address(std::move(h)); }
  RemoteEndpoint& with_port(std::uint16_t p) {
    port = p;
    return *this;
  }
};

class ListenerImpl;

/// Passive endpoint. Connections accepted before a handler is set are held
/// and delivered once it is.
class Listener {
 public:
  using ConnectionHandler = std::function<void(Connection)>;

  Listener() = default;
  explicit Listener(std::shared_ptr<ListenerImpl> impl) : impl_(std::move(impl)) {}

  void on_connection_received(ConnectionHandler h);
  /// Closes every acceptor; held connections are discarded. Idempotent.
  void stop();
  bool active() const;
  std::uint16_t port() const;
  const std::vector<ProtocolId>& protocols() const;

 private:
  std::shared_ptr<ListenerImpl> impl_;
};

class TransportSystem;
struct PreconnectionState;

/// Gathers endpoints, properties and framers before a connection exists.
/// Copies share state.
class Preconnection {
 public:
  /// Throws Error(missing_endpoint) when both endpoints are absent.
  Preconnection(TransportSystem& system, std::optional<LocalEndpoint> local, std::optional<RemoteEndpoint> remote,
                TransportProperties tp = {}, SecurityParameters security = {});

  /// Throws Error(already_started) after initiate() or listen().
  Preconnection& add_framer(FramerFactory factory);
  template <typename F, typename... Args>
  Preconnection& add_framer(Args... args) {
    return add_framer(make_framer_factory<F>(args...));
  }

  /// Throws Error(missing_endpoint) or Error(no_candidates).
  Connection initiate();
  /// As initiate(); `data` is sent as soon as the winner allows. Throws
  /// Error(invalid_message) for empty data.
  Connection initiate_with_send(Bytes data, const MessageProperties& props = {});
  /// Throws Error(missing_endpoint), Error(no_candidates) or Error(bind_failure).
  Listener listen();

  /// Runs the transport system's event loop until it is stopped.
  void start();

  bool started() const;
  std::size_t framer_count() const;
  const TransportProperties& transport_properties() const;
  const std::optional<LocalEndpoint>& local() const;
  const std::optional<RemoteEndpoint>& remote() const;

 private:
  std::shared_ptr<PreconnectionState> state_;
};

}  // namespace taps
