#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace taps {

/// Error conditions surfaced by the library, either thrown from synchronous
/// calls or carried by asynchronous error events.
enum class Errc {
  missing_endpoint,
  already_started,
  no_candidates,
  invalid_message,
  bind_failure,
  not_established,
  closed,
  range_error,
  message_too_large,
  carrier_closed,
  handshake_mismatch,
  timeout,
  association_closed,
  stream_limit,
  malformed_frame,
  unknown_protocol,
  config_error,
  establishment_failed,
  connection_refused,
  connection_reset,
  framer_error,
  clone_failed,
  aborted,
  policy_error,
};

constexpr std::string_view to_string(Errc e) noexcept {
  switch (e) {
    case Errc::missing_endpoint: return "MissingEndpoint";
    case Errc::already_started: return "AlreadyStarted";
    case Errc::no_candidates: return "NoCandidates";
    case Errc::invalid_message: return "InvalidMessage";
    case Errc::bind_failure: return "BindFailure";
    case Errc::not_established: return "NotEstablished";
    case Errc::closed: return "Closed";
    case Errc::range_error: return "RangeError";
    case Errc::message_too_large: return "MessageTooLarge";
    case Errc::carrier_closed: return "CarrierClosed";
    case Errc::handshake_mismatch: return "HandshakeMismatch";
    case Errc::timeout: return "Timeout";
    case Errc::association_closed: return "AssociationClosed";
    case Errc::stream_limit: return "StreamLimit";
    case Errc::malformed_frame: return "MalformedFrame";
    case Errc::unknown_protocol: return "UnknownProtocol";
    case Errc::config_error: return "ConfigError";
    case Errc::establishment_failed: return "EstablishmentError";
    case Errc::connection_refused: return "ConnectionRefused";
    case Errc::connection_reset: return "ConnectionReset";
    case Errc::framer_error: return "FramerError";
    case Errc::clone_failed: return "CloneError";
    case Errc::aborted: return "Aborted";
    case Errc::policy_error: return "PolicyError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
        code_(code) {}
  explicit Error(Errc code) : Error(code, {}) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace taps
