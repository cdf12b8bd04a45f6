#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "taps/bytes.hpp"
#include "taps/error.hpp"
#include "taps/framer.hpp"
#include "taps/network.hpp"
#include "taps/properties.hpp"

namespace taps {

enum class ProtocolId : std::uint8_t { tcp, udp, msgmux, sim_stream, sim_msg };

inline constexpr std::array<ProtocolId, 5> all_protocols = {
    ProtocolId::tcp, ProtocolId::udp, ProtocolId::msgmux, ProtocolId::sim_stream, ProtocolId::sim_msg,
};

std::string_view to_string(ProtocolId p);
/// Accepts "TCP", "tcp", "SIM_MSG", ... Throws Error(unknown_protocol).
ProtocolId protocol_from_string(std::string_view name);

/// Row of the feature matrix. Throws Error(unknown_protocol) for ids outside
/// the enumeration.
FeatureSet features(ProtocolId p);

/// Tie-break position: lower races first among equal scores.
int protocol_rank(ProtocolId p);

/// True for protocols that can drop a message instead of delivering it
/// late, which is what makes message lifetimes meaningful.
bool supports_expiry(ProtocolId p);

/// Largest UDP payload.
inline constexpr std::size_t max_udp_payload = 65507;

/// Bytes a stream carrier may hold before the adapter stops accepting.
inline constexpr std::size_t adapter_high_watermark = 64 * 1024;

/// One protocol-level connection backing exactly one TAPS connection.
class ProtocolConnection {
 public:
  struct Handlers {
    std::function<void()> on_ready;
    std::function<void(const Error&)> on_establishment_error;
    /// `end_of_message` is true when the protocol marks a boundary; stream
    /// protocols report every read as a boundary.
    std::function<void(ByteView data, const MessageContext& ctx, bool end_of_message)> on_data;
    std::function<void()> on_writable;
    /// nullptr for an orderly close by the peer.
    std::function<void(const Error*)> on_closed;
  };

  virtual ~ProtocolConnection() = default;

  virtual ProtocolId protocol() const = 0;
  virtual void set_handlers(Handlers h) = 0;
  /// Begins establishment; exactly one of on_ready / on_establishment_error
  /// follows, never from inside this call.
  virtual void start() = 0;
  virtual bool established() const = 0;

  /// Called when a racing winner is handed to its TAPS connection.
  virtual void activate() {}
  /// Tears down a racing loser.
  virtual void dismiss() { abort(); }

  virtual bool can_accept() const = 0;
  /// Hands one framed message to the protocol. Throws Error(message_too_large)
  /// or Error(carrier_closed).
  virtual void send(ByteView wire, const MessageProperties& props) = 0;
  virtual void close() = 0;
  virtual void abort() = 0;
  virtual void set_dscp(std::uint8_t dscp) = 0;
  virtual Endpoint remote() const = 0;

  /// Multistreaming protocols return a new, immediately usable connection on
  /// the same association. Others return nullptr.
  virtual std::shared_ptr<ProtocolConnection> open_sibling_stream() { return nullptr; }
  /// Stream id for multistreaming protocols.
  virtual std::optional<std::uint32_t> stream_id() const { return std::nullopt; }
};

struct AdapterOptions {
  /// Bytes a byte-stream carrier must show before a listener can tell
  /// MSGMUX from plain TCP; a silent peer is treated as plain TCP after this.
  std::chrono::milliseconds sniff_timeout{200};
};

/// Creates an initiating connection; call set_handlers() then start().
/// The SIM_* protocols require a simulated host as backend.
std::shared_ptr<ProtocolConnection> make_connector(ProtocolId p, NetworkBackend& backend, const Endpoint& remote);

/// Server-side binding for one local port over several protocols. Stream
/// carriers are shared by TCP, MSGMUX and SIM_STREAM: a MSGMUX peer is
/// recognised by its handshake magic.
class ProtocolListener {
 public:
  using AcceptHandler = std::function<void(std::shared_ptr<ProtocolConnection>)>;

  /// Throws Error(bind_failure).
  ProtocolListener(NetworkBackend& backend, std::uint16_t port, const std::vector<ProtocolId>& protocols,
                   AcceptHandler on_accept, AdapterOptions opts = {});
  ~ProtocolListener();
  ProtocolListener(const ProtocolListener&) = delete;
  ProtocolListener& operator=(const ProtocolListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  void stop();

  struct State;

 private:
  std::uint16_t port_ = 0;
  std::shared_ptr<State> state_;
};

}  // namespace taps
