#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "taps/bytes.hpp"

namespace taps::msgmux {

// Wire layout, all integers big-endian:
//   type:1 | stream_id:4 | flags:1 | length:4 | payload:length
enum class FrameType : std::uint8_t {
  data = 0x01,
  open_stream = 0x02,
  close_stream = 0x03,
  reset_stream = 0x04,
  goaway = 0x05,
};

inline constexpr std::uint8_t flag_end_of_message = 0x01;
inline constexpr std::size_t header_size = 10;
inline constexpr std::size_t max_payload = 64 * 1024;
/// Stream 0 carries association-level control (GOAWAY).
inline constexpr std::uint32_t control_stream = 0;
inline constexpr std::uint32_t max_stream_id = 0x7fffffffu;

/// Sent by the initiator on a fresh carrier.
inline constexpr std::string_view handshake_magic = "TAPSMUX1";
/// Acceptor's reply. Distinct from the magic so that a peer that merely
/// echoes bytes back is not mistaken for a MSGMUX endpoint.
inline constexpr std::string_view handshake_ack = "TAPSMUXA";

struct Frame {
  FrameType type = FrameType::data;
  std::uint32_t stream_id = 0;
  std::uint8_t flags = 0;
  Bytes payload;

  bool end_of_message() const noexcept { return (flags & flag_end_of_message) != 0; }
  friend bool operator==(const Frame&, const Frame&) = default;
};

bool is_valid_type(std::uint8_t t) noexcept;

void encode(const Frame& f, Bytes& out);
Bytes encode(const Frame& f);

/// Splits a message into DATA frames of at most max_payload bytes; only the
/// last carries END_OF_MESSAGE. An empty message yields one empty frame.
void encode_message(std::uint32_t stream_id, ByteView message, bool end_of_message, Bytes& out);

struct DecodeResult {
  std::vector<Frame> frames;
  Bytes remainder;
};

/// Greedily decodes complete frames. Throws Error(malformed_frame) on an
/// unknown type byte or an oversized length.
DecodeResult decode_frames(ByteView buffer);

/// Incremental decoder over a byte stream.
class FrameDecoder {
 public:
  /// Appends bytes and returns every frame completed by them.
  std::vector<Frame> feed(ByteView bytes);
  std::size_t buffered() const noexcept { return buf_.size(); }

 private:
  Bytes buf_;
};

/// Odd ids (1, 3, ...) for the initiator, even ids (2, 4, ...) for the acceptor.
class StreamIdAllocator {
 public:
  explicit StreamIdAllocator(bool initiator) : next_(initiator ? 1u : 2u) {}
  /// Throws Error(stream_limit) when the id space is exhausted.
  std::uint32_t next();
  static bool initiator_owned(std::uint32_t id) noexcept { return (id & 1u) != 0; }

 private:
  std::uint64_t next_;
};

}  // namespace taps::msgmux
