#include <gtest/gtest.h>

#include <random>
#include <string>

#include "taps/error.hpp"
#include "taps/framer.hpp"

using namespace taps;

namespace {

constexpr std::size_t cap = 1 << 20;

struct Collected {
  std::vector<std::string> messages;
  FramerChain::MessageSink sink() {
    return [this](Bytes b, const MessageContext&) { messages.emplace_back(b.begin(), b.end()); };
  }
};

/// Receive side given as a lambda; outbound passes through.
class FnFramer : public Framer {
 public:
  using Fn = std::function<void(FramerContext&)>;
  explicit FnFramer(Fn fn) : fn_(std::move(fn)) {}
  void handle_received_data(FramerContext& ctx) override { fn_(ctx); }

 private:
  Fn fn_;
};

FramerFactory fn_factory(FnFramer::Fn fn) {
  return [fn] { return std::make_unique<FnFramer>(fn); };
}

void feed(FramerChain& chain, std::string_view s, const FramerChain::MessageSink& sink) {
  chain.on_inbound(to_bytes(s), MessageContext{}, false, sink);
}

std::string outbound(FramerChain& chain, std::string_view s) {
  return to_string(chain.frame_outbound(to_bytes(s), MessageContext{}, true));
}

}  // namespace

TEST(FrameOutbound, HeaderFive) {
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  auto out = outbound(chain, "FIVE!");
  EXPECT_EQ(out, "HEADERFIVE!");
  EXPECT_EQ(out.size(), 11u);
}

TEST(FrameOutbound, HeaderHelloWorld) {
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  auto out = outbound(chain, "HelloWorld");
  EXPECT_EQ(out, "HEADERHelloWorld");
  EXPECT_EQ(out.size(), 16u);
}

TEST(FrameOutbound, EmptyChainIsIdentity) {
  FramerChain chain({}, cap);
  EXPECT_EQ(outbound(chain, "x"), "x");
}

TEST(Parse, ReturnsHeaderWithoutConsuming) {
  std::string seen;
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      seen = to_string(ctx.parse(6, 6).data);
                    })},
                    cap);
  Collected c;
  feed(chain, "HEADERFIVE!", c.sink());
  EXPECT_EQ(seen, "HEADER");
  EXPECT_EQ(chain.outer_cursor().buffered(), 11u);
}

TEST(Parse, SuspendsUntilMinLength) {
  int runs = 0;
  std::string seen;
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      ++runs;
                      seen = to_string(ctx.parse(6, 6).data);
                      ctx.advance_receive_cursor(6);
                    })},
                    cap);
  Collected c;
  feed(chain, "HEA", c.sink());
  EXPECT_EQ(runs, 1);
  EXPECT_TRUE(seen.empty());
  feed(chain, "DERFIVE!", c.sink());
  EXPECT_EQ(seen, "HEADER");
}

TEST(Parse, MaxLengthCaps) {
  std::string seen;
  FramerChain chain({fn_factory([&](FramerContext& ctx) { seen = to_string(ctx.parse(1, 4).data); })}, cap);
  Collected c;
  feed(chain, "HEADERFIVE!", c.sink());
  EXPECT_EQ(seen, "HEAD");
}

TEST(Advance, SkipsHeader) {
  std::string rest;
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      ctx.parse(6, 6);
                      ctx.advance_receive_cursor(6);
                      rest = to_string(ctx.parse(0, 100).data);
                    })},
                    cap);
  Collected c;
  feed(chain, "HEADERFIVE!", c.sink());
  EXPECT_EQ(rest, "FIVE!");
  EXPECT_EQ(chain.outer_cursor().discarded(), 6u);
}

TEST(Advance, ZeroIsNoChange) {
  FramerChain chain({fn_factory([&](FramerContext& ctx) { ctx.advance_receive_cursor(0); })}, cap);
  Collected c;
  feed(chain, "abc", c.sink());
  EXPECT_EQ(chain.outer_cursor().buffered(), 3u);
  EXPECT_EQ(chain.outer_cursor().discarded(), 0u);
}

TEST(Advance, BeyondBufferIsRangeError) {
  FramerChain chain({fn_factory([&](FramerContext& ctx) { ctx.advance_receive_cursor(4); })}, cap);
  Collected c;
  try {
    feed(chain, "abc", c.sink());
    FAIL() << "expected RangeError";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::range_error);
  }
  EXPECT_EQ(chain.outer_cursor().buffered(), 3u);
}

TEST(Deliver, HeaderFramerDeliversFive) {
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  Collected c;
  feed(chain, "HEADERFIVE!", c.sink());
  ASSERT_EQ(c.messages.size(), 1u);
  EXPECT_EQ(c.messages[0], "FIVE!");
}

TEST(Deliver, TrailingWorldStaysBuffered) {
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  Collected c;
  feed(chain, "HEADERHelloWorld", c.sink());
  ASSERT_EQ(c.messages.size(), 1u);
  EXPECT_EQ(c.messages[0], "Hello");
  EXPECT_EQ(chain.outer_cursor().buffered(), 5u);
  EXPECT_EQ(to_string(chain.outer_cursor().peek(0, 5)), "World");
}

TEST(Deliver, ZeroLengthMessage) {
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      ctx.advance_receive_cursor(1);
                      ctx.deliver_and_advance_receive_cursor(MessageContext{}, 0, true);
                    })},
                    cap);
  Collected c;
  feed(chain, "x", c.sink());
  ASSERT_EQ(c.messages.size(), 1u);
  EXPECT_TRUE(c.messages[0].empty());
}

TEST(Deliver, BeyondBufferIsRangeError) {
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      ctx.deliver_and_advance_receive_cursor(MessageContext{}, 9, true);
                    })},
                    cap);
  Collected c;
  EXPECT_THROW(feed(chain, "abc", c.sink()), Error);
}

TEST(Deliver, PartialDeliveriesJoinUntilEnd) {
  FramerChain chain({fn_factory([&](FramerContext& ctx) {
                      ctx.parse(2, 2);
                      ctx.deliver_and_advance_receive_cursor(MessageContext{}, 1, false);
                      ctx.deliver_and_advance_receive_cursor(MessageContext{}, 1, true);
                    })},
                    cap);
  Collected c;
  feed(chain, "abcd", c.sink());
  EXPECT_EQ(c.messages, (std::vector<std::string>{"ab", "cd"}));
}

TEST(Deliver, MessageSizeCap) {
  FramerChain chain({make_framer_factory<LengthPrefixFramer>()}, 8);
  Collected c;
  Bytes big{0, 0, 0, 9};
  big.resize(13, 'z');
  EXPECT_THROW(chain.on_inbound(big, MessageContext{}, false, c.sink()), Error);
}

TEST(Suspension, RoundIsNotCommitted) {
  // The header advance of a suspended round must not stick.
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  Collected c;
  feed(chain, "HEADERFI", c.sink());
  EXPECT_TRUE(c.messages.empty());
  EXPECT_EQ(chain.outer_cursor().discarded(), 0u);
  EXPECT_EQ(chain.outer_cursor().buffered(), 8u);
  feed(chain, "VE!", c.sink());
  ASSERT_EQ(c.messages.size(), 1u);
  EXPECT_EQ(c.messages[0], "FIVE!");
}

TEST(Conservation, HoldsAfterEachFeed) {
  FramerChain chain({make_framer_factory<HeaderFramer>()}, cap);
  Collected c;
  for (std::string_view piece : {"HEAD", "ERFIVE!HEA", "DERHelloWorld", "!"}) {
    feed(chain, piece, c.sink());
    const auto& cur = chain.outer_cursor();
    EXPECT_EQ(cur.received(), cur.delivered() + cur.discarded() + cur.buffered());
  }
}

TEST(RoundTrip, HeaderFramerOverRandomFragmentation) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> byte('!', '~');
  for (int trial = 0; trial < 200; ++trial) {
    FramerChain tx({make_framer_factory<HeaderFramer>()}, cap);
    FramerChain rx({make_framer_factory<HeaderFramer>()}, cap);
    std::vector<std::string> sent;
    Bytes wire;
    const int count = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < count; ++i) {
      std::string p(5, ' ');
      for (auto& ch : p) ch = static_cast<char>(byte(rng));
      sent.push_back(p);
      append(wire, tx.frame_outbound(to_bytes(p), MessageContext{}, true));
    }
    Collected c;
    std::size_t pos = 0;
    while (pos < wire.size()) {
      const std::size_t n = std::min<std::size_t>(wire.size() - pos, 1 + rng() % 13);
      rx.on_inbound(ByteView(wire).subspan(pos, n), MessageContext{}, false, c.sink());
      pos += n;
    }
    EXPECT_EQ(c.messages, sent);
  }
}

TEST(Lifecycle, StartAndStopRunOnce) {
  struct Counting : Framer {
    int* starts;
    int* stops;
    Counting(int* a, int* b) : starts(a), stops(b) {}
    void start(FramerContext&) override { ++*starts; }
    void stop(FramerContext&) override { ++*stops; }
    void handle_received_data(FramerContext&) override {}
  };
  int starts = 0;
  int stops = 0;
  FramerChain chain({[&] { return std::make_unique<Counting>(&starts, &stops); }}, cap);
  chain.stop();
  EXPECT_EQ(stops, 0);
  chain.start();
  chain.start();
  chain.stop();
  chain.stop();
  EXPECT_EQ(starts, 1);
  EXPECT_EQ(stops, 1);
}

TEST(Composition, OutboundInInsertionOrder) {
  struct Tag : Framer {
    char tag;
    explicit Tag(char t) : tag(t) {}
    void new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& m, bool end) override {
      Bytes out{static_cast<std::uint8_t>(tag)};
      append(out, data);
      ctx.send(out, m, end);
    }
    void handle_received_data(FramerContext& ctx) override {
      auto all = ctx.parse(1, SIZE_MAX);
      ctx.advance_receive_cursor(1);
      ctx.deliver_and_advance_receive_cursor(all.context, all.data.size() - 1, true);
    }
  };
  FramerChain chain({[] { return std::make_unique<Tag>('A'); }, [] { return std::make_unique<Tag>('B'); }}, cap);
  EXPECT_EQ(outbound(chain, "x"), "BAx");
  Collected c;
  chain.on_inbound(to_bytes("BAx"), MessageContext{}, true, c.sink());
  ASSERT_EQ(c.messages.size(), 1u);
  EXPECT_EQ(c.messages[0], "x");
}

TEST(LengthPrefix, RoundTrip) {
  FramerChain chain({make_framer_factory<LengthPrefixFramer>()}, cap);
  Bytes wire = chain.frame_outbound(to_bytes("abc"), MessageContext{}, false);
  EXPECT_TRUE(wire.empty());
  wire = chain.frame_outbound(to_bytes("de"), MessageContext{}, true);
  EXPECT_EQ(wire, (Bytes{0, 0, 0, 5, 'a', 'b', 'c', 'd', 'e'}));
  Collected c;
  chain.on_inbound(wire, MessageContext{}, false, c.sink());
  EXPECT_EQ(c.messages, std::vector<std::string>{"abcde"});
}
