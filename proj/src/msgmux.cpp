#include "taps/msgmux.hpp"

#include <algorithm>
#include <string>

#include "taps/error.hpp"

namespace taps::msgmux {

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

void put_header(Bytes& out, FrameType type, std::uint32_t stream_id, std::uint8_t flags, std::size_t len) {
  out.push_back(static_cast<std::uint8_t>(type));
  put_u32(out, stream_id);
  out.push_back(flags);
  put_u32(out, static_cast<std::uint32_t>(len));
}

}  // namespace

bool is_valid_type(std::uint8_t t) noexcept { return t >= 0x01 && t <= 0x05; }

void encode(const Frame& f, Bytes& out) {
  if (f.payload.size() > max_payload) {
    throw Error(Errc::message_too_large, "frame payload " + std::to_string(f.payload.size()));
  }
  put_header(out, f.type, f.stream_id, f.flags, f.payload.size());
  append(out, f.payload);
}

Bytes encode(const Frame& f) {
  Bytes out;
  out.reserve(header_size + f.payload.size());
  encode(f, out);
  return out;
}

void encode_message(std::uint32_t stream_id, ByteView message, bool end_of_message, Bytes& out) {
  std::size_t off = 0;
  do {
    const std::size_t n = std::min(max_payload, message.size() - off);
    const bool last = off + n == message.size();
    put_header(out, FrameType::data, stream_id, (last && end_of_message) ? flag_end_of_message : 0, n);
    append(out, message.subspan(off, n));
    off += n;
  } while (off < message.size());
}

DecodeResult decode_frames(ByteView buffer) {
  DecodeResult r;
  std::size_t off = 0;
  while (buffer.size() - off >= header_size) {
    const std::uint8_t* p = buffer.data() + off;
    if (!is_valid_type(p[0])) {
      throw Error(Errc::malformed_frame, "unknown frame type " + std::to_string(p[0]));
    }
    const std::uint32_t len = get_u32(p + 6);
    if (len > max_payload) throw Error(Errc::malformed_frame, "frame length " + std::to_string(len));
    if (buffer.size() - off - header_size < len) break;
    Frame f;
    f.type = static_cast<FrameType>(p[0]);
    f.stream_id = get_u32(p + 1);
    f.flags = p[5];
    f.payload.assign(p + header_size, p + header_size + len);
    r.frames.push_back(std::move(f));
    off += header_size + len;
  }
  // A partial header can already be rejected on its type byte.
  if (off < buffer.size() && !is_valid_type(buffer[off])) {
    throw Error(Errc::malformed_frame, "unknown frame type " + std::to_string(buffer[off]));
  }
  r.remainder.assign(buffer.begin() + static_cast<std::ptrdiff_t>(off), buffer.end());
  return r;
}

std::vector<Frame> FrameDecoder::feed(ByteView bytes) {
  append(buf_, bytes);
  auto r = decode_frames(buf_);
  buf_ = std::move(r.remainder);
  return std::move(r.frames);
}

std::uint32_t StreamIdAllocator::next() {
  if (next_ > max_stream_id) throw Error(Errc::stream_limit, "stream id space exhausted");
  const auto id = static_cast<std::uint32_t>(next_);
  next_ += 2;
  return id;
}

}  // namespace taps::msgmux
