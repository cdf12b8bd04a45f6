#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string_view>

#include "taps/bytes.hpp"
#include "taps/error.hpp"
#include "taps/framer.hpp"
#include "taps/network.hpp"
#include "taps/properties.hpp"
#include "taps/protocol.hpp"

namespace taps {

enum class ConnectionState { establishing, established, closing, closed };

std::string_view to_string(ConnectionState s) noexcept;

/// Identifies one send() call in Sent / SendError / Expired events.
using MessageRef = std::uint64_t;

struct RaceTrace;
class ConnectionImpl;

/// Handle to a transport connection. Copies refer to the same connection.
///
/// Handlers are named slots. All events of one connection are delivered
/// serially from the event loop, never from inside the call that caused
/// them. Ready and EstablishmentError are held until a handler is set.
class Connection {
 public:
  using StateHandler = std::function<void(Connection&)>;
  using ErrorHandler = std::function<void(Connection&, const Error&)>;
  using MessageHandler = std::function<void(Connection&, MessageRef)>;
  using MessageErrorHandler = std::function<void(Connection&, MessageRef, const Error&)>;
  using ReceiveHandler = std::function<void(Connection&, const Bytes& data, const MessageContext& ctx, bool is_end)>;

  Connection() = default;
  explicit Connection(std::shared_ptr<ConnectionImpl> impl) : impl_(std::move(impl)) {}

  explicit operator bool() const noexcept { return impl_ != nullptr; }
  friend bool operator==(const Connection& a, const Connection& b) noexcept { return a.impl_ == b.impl_; }

  void on_ready(StateHandler h);
  void on_establishment_error(ErrorHandler h);
  void on_sent(MessageHandler h);
  void on_send_error(MessageErrorHandler h);
  void on_expired(MessageHandler h);
  void on_closed(StateHandler h);
  void on_connection_error(ErrorHandler h);

  /// Throws Error(not_established) unless Established, Error(invalid_message)
  /// for empty data that does not finish a partial message. With
  /// is_end=false the data is held and joined with later sends into one
  /// message.
  MessageRef send(Bytes data, const MessageProperties& props = {}, bool is_end = true);
  MessageRef send(std::string_view text, const MessageProperties& props = {}, bool is_end = true);

  /// Queues one reception slot: the next complete message is delivered to
  /// `handler` exactly once. Throws Error(not_established) once Closed with
  /// nothing left to deliver.
  void receive(ReceiveHandler handler);

  /// New member of this connection's group. Over a multistreaming protocol it
  /// is a new stream of the same association; otherwise a new connection of
  /// the same protocol to the same peer. Failures go to `on_error`.
  Connection clone(ErrorHandler on_error = {});

  /// Flushes queued messages, then closes.
  void close();
  /// Closes at once; queued messages fail with SendError.
  void abort();

  ConnectionState state() const;
  std::uint64_t group_id() const;
  std::size_t group_size() const;

  /// Group-wide. Throws Error(closed) on a Closed connection.
  void set_property(std::string_view key, PropertyValue value);
  std::optional<PropertyValue> property(std::string_view key) const;
  CapacityProfile capacity_profile() const;

  std::optional<ProtocolId> protocol() const;
  std::optional<Endpoint> remote() const;
  std::optional<std::uint32_t> stream_id() const;
  /// Racing record of an initiated connection; nullptr otherwise.
  const RaceTrace* race_trace() const;

  /// receive() calls not yet answered by a Received event.
  std::size_t pending_receives() const;
  /// Complete messages waiting for a receive() call.
  std::size_t buffered_messages() const;

  const std::shared_ptr<ConnectionImpl>& impl() const noexcept { return impl_; }

 private:
  ConnectionImpl& checked() const;
  std::shared_ptr<ConnectionImpl> impl_;
};

}  // namespace taps
