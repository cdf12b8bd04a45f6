#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "taps/bytes.hpp"
#include "taps/error.hpp"
#include "taps/event_loop.hpp"

namespace taps {

/// A resolved transport address.
struct Endpoint {
  std::string address;
  std::uint16_t port = 0;

  std::string to_string() const;
  friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

/// Connection-oriented byte stream (a TCP socket or its simulated
/// equivalent). Handlers fire on the owning loop.
class StreamCarrier {
 public:
  struct Handlers {
    std::function<void()> on_connected;
    std::function<void(ByteView)> on_data;
    /// nullptr for an orderly close by the peer.
    std::function<void(const Error*)> on_closed;
    std::function<void()> on_writable;
  };

  virtual ~StreamCarrier() = default;
  virtual void set_handlers(Handlers h) = 0;
  /// Queues bytes; never blocks.
  virtual void write(ByteView bytes) = 0;
  /// Bytes queued locally that the protocol stack has not yet taken.
  virtual std::size_t pending_bytes() const = 0;
  /// Orderly close once queued bytes are flushed.
  virtual void close() = 0;
  /// Immediate reset.
  virtual void abort() = 0;
  virtual void set_dscp(std::uint8_t dscp) = 0;
  virtual Endpoint remote() const = 0;
  virtual bool is_open() const = 0;
};

class StreamAcceptor {
 public:
  virtual ~StreamAcceptor() = default;
  virtual std::uint16_t port() const = 0;
  virtual void close() = 0;
};

class DatagramSocket {
 public:
  using ReceiveHandler = std::function<void(const Endpoint& from, ByteView data)>;

  virtual ~DatagramSocket() = default;
  virtual void set_receive_handler(ReceiveHandler h) = 0;
  virtual void send_to(const Endpoint& to, ByteView data, std::uint8_t dscp) = 0;
  virtual std::uint16_t local_port() const = 0;
  virtual void close() = 0;
};

/// Services a transport system needs from the network underneath it.
class NetworkBackend {
 public:
  virtual ~NetworkBackend() = default;
  virtual EventLoop& loop() = 0;
  /// Textual address or name to addresses; empty if unresolvable.
  virtual std::vector<std::string> resolve(const std::string& host) = 0;
  /// Starts an asynchronous connect; completion or failure is reported
  /// through the handlers installed on the returned carrier.
  virtual std::shared_ptr<StreamCarrier> connect_stream(const Endpoint& remote) = 0;
  /// Throws Error(bind_failure).
  virtual std::shared_ptr<StreamAcceptor> listen_stream(
      std::uint16_t port, std::function<void(std::shared_ptr<StreamCarrier>)> on_accept) = 0;
  /// Binds to `port` (ephemeral when empty). Throws Error(bind_failure).
  virtual std::shared_ptr<DatagramSocket> open_datagram(std::optional<std::uint16_t> port) = 0;
};

}  // namespace taps
