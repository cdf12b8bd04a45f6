#include <gtest/gtest.h>

#include <random>

#include "taps/error.hpp"
#include "taps/msgmux.hpp"
#include "taps/protocol.hpp"

using namespace taps;
using namespace taps::msgmux;

namespace {

const Bytes five_frame{0x01, 0x00, 0x00, 0x00, 0x01, 0x01, 0x00, 0x00, 0x00, 0x05, 0x46, 0x49, 0x56, 0x45, 0x21};

Frame five() {
  Frame f;
  f.type = FrameType::data;
  f.stream_id = 1;
  f.flags = flag_end_of_message;
  f.payload = to_bytes("FIVE!");
  return f;
}

}  // namespace

TEST(Features, MatrixRows) {
  EXPECT_FALSE(features(ProtocolId::tcp).preserves_msg_boundaries);
  EXPECT_FALSE(features(ProtocolId::udp).reliable);
  EXPECT_TRUE(features(ProtocolId::msgmux).multistreaming);
  EXPECT_EQ(features(ProtocolId::sim_stream), features(ProtocolId::tcp));
  EXPECT_TRUE(features(ProtocolId::sim_msg).per_msg_reliability);
  EXPECT_FALSE(features(ProtocolId::sim_msg).preserves_order);
}

TEST(Encode, FiveGoldenVector) {
  EXPECT_EQ(encode(five()), five_frame);
  Bytes out;
  encode_message(1, to_bytes("FIVE!"), true, out);
  EXPECT_EQ(out, five_frame);
}

TEST(Decode, FiveGoldenVector) {
  auto r = decode_frames(five_frame);
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_TRUE(r.remainder.empty());
  EXPECT_EQ(r.frames[0], five());
  EXPECT_TRUE(r.frames[0].end_of_message());
}

TEST(Decode, SplitAtOffsetSeven) {
  auto first = decode_frames(ByteView(five_frame).first(7));
  EXPECT_TRUE(first.frames.empty());
  EXPECT_EQ(first.remainder.size(), 7u);
  Bytes rest = first.remainder;
  append(rest, ByteView(five_frame).subspan(7));
  auto second = decode_frames(rest);
  ASSERT_EQ(second.frames.size(), 1u);
  EXPECT_EQ(second.frames[0], five());

  FrameDecoder dec;
  EXPECT_TRUE(dec.feed(ByteView(five_frame).first(7)).empty());
  EXPECT_EQ(dec.buffered(), 7u);
  auto frames = dec.feed(ByteView(five_frame).subspan(7));
  ASSERT_EQ(frames.size(), 1u);
  EXPECT_EQ(dec.buffered(), 0u);
}

TEST(Decode, UnknownTypeIsMalformed) {
  Bytes bad = five_frame;
  bad[0] = 0xFF;
  try {
    decode_frames(bad);
    FAIL() << "expected MalformedFrame";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::malformed_frame);
  }
}

TEST(Decode, OversizedLengthIsMalformed) {
  Bytes bad = five_frame;
  bad[6] = 0x7f;
  EXPECT_THROW(decode_frames(bad), Error);
}

TEST(Encode, LargeMessageSplitsAtLimit) {
  Bytes msg(max_payload * 2 + 10, 0xAB);
  Bytes out;
  encode_message(5, msg, true, out);
  auto r = decode_frames(out);
  ASSERT_EQ(r.frames.size(), 3u);
  EXPECT_EQ(r.frames[0].payload.size(), max_payload);
  EXPECT_EQ(r.frames[2].payload.size(), 10u);
  EXPECT_FALSE(r.frames[0].end_of_message());
  EXPECT_FALSE(r.frames[1].end_of_message());
  EXPECT_TRUE(r.frames[2].end_of_message());
}

TEST(Encode, EmptyMessageIsOneFrame) {
  Bytes out;
  encode_message(3, {}, true, out);
  auto r = decode_frames(out);
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_TRUE(r.frames[0].payload.empty());
  EXPECT_TRUE(r.frames[0].end_of_message());
}

TEST(StreamIds, InitiatorOddAcceptorEven) {
  StreamIdAllocator init(true);
  EXPECT_EQ(init.next(), 1u);
  EXPECT_EQ(init.next(), 3u);
  StreamIdAllocator acc(false);
  EXPECT_EQ(acc.next(), 2u);
  EXPECT_EQ(acc.next(), 4u);
  EXPECT_TRUE(StreamIdAllocator::initiator_owned(3));
  EXPECT_FALSE(StreamIdAllocator::initiator_owned(4));
}

TEST(Handshake, AckDiffersFromMagic) {
  EXPECT_EQ(handshake_magic.size(), 8u);
  EXPECT_EQ(handshake_ack.size(), 8u);
  EXPECT_NE(handshake_magic, handshake_ack);
}

TEST(RoundTrip, RandomFramesRandomFragmentation) {
  std::mt19937_64 rng(11);
  const FrameType types[] = {FrameType::data, FrameType::open_stream, FrameType::close_stream,
                             FrameType::reset_stream, FrameType::goaway};
  std::vector<Frame> sent;
  Bytes wire;
  for (int i = 0; i < 300; ++i) {
    Frame f;
    f.type = types[rng() % 5];
    f.stream_id = static_cast<std::uint32_t>(rng() % (max_stream_id + 1ull));
    f.flags = static_cast<std::uint8_t>(rng() % 2);
    f.payload.resize(rng() % 3000);
    for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng());
    encode(f, wire);
    sent.push_back(std::move(f));
  }
  FrameDecoder dec;
  std::vector<Frame> got;
  std::size_t pos = 0;
  while (pos < wire.size()) {
    const std::size_t n = std::min<std::size_t>(wire.size() - pos, rng() % 5000);
    for (auto& f : dec.feed(ByteView(wire).subspan(pos, n))) got.push_back(std::move(f));
    pos += n;
  }
  EXPECT_EQ(got, sent);
}

TEST(Features, UnknownProtocol) {
  EXPECT_THROW(features(static_cast<ProtocolId>(42)), Error);
  EXPECT_THROW(protocol_from_string("SCTP"), Error);
  EXPECT_EQ(protocol_from_string("msgmux"), ProtocolId::msgmux);
  EXPECT_EQ(protocol_from_string("SIM_MSG"), ProtocolId::sim_msg);
}
