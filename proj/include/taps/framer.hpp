#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "taps/bytes.hpp"
#include "taps/properties.hpp"

namespace taps {

/// Metadata travelling with a message through framers and adapters.
struct MessageContext {
  MessageProperties properties;
  std::uint64_t message_id = 0;
  std::optional<std::uint32_t> stream_id;
};

struct ParseResult {
  ByteView data;
  MessageContext context;
  bool is_end = false;
};

/// Inbound byte buffer with a consumption offset and conservation counters:
/// received() == delivered() + discarded() + buffered() at all times.
class ReceiveCursor {
 public:
  void append(ByteView bytes);
  std::size_t buffered() const noexcept { return buf_.size() - offset_; }
  /// Unconsumed bytes starting `skip` past the offset, at most `max_len` long.
  ByteView peek(std::size_t skip, std::size_t max_len) const;
  void discard(std::size_t n);
  Bytes take(std::size_t n);

  std::uint64_t received() const noexcept { return received_; }
  std::uint64_t delivered() const noexcept { return delivered_; }
  std::uint64_t discarded() const noexcept { return discarded_; }

 private:
  void consume(std::size_t n);

  Bytes buf_;
  std::size_t offset_ = 0;
  std::uint64_t received_ = 0;
  std::uint64_t delivered_ = 0;
  std::uint64_t discarded_ = 0;
};

class FramerChain;

/// Primitives available to a framer while it runs. One context exists per
/// framer stage of a connection.
class FramerContext {
 public:
  /// Forwards outbound bytes to the next framer or, for the last one, to the
  /// protocol adapter.
  void send(ByteView data, const MessageContext& ctx, bool is_end);

  /// Returns between min_len and max_len unconsumed bytes without consuming.
  /// If fewer than min_len bytes are buffered, the current receive round is
  /// abandoned (nothing it did is committed) and handle_received_data runs
  /// again from the top once more bytes arrive.
  ParseResult parse(std::size_t min_len, std::size_t max_len);

  /// Throws Error(range_error) if n exceeds the unconsumed length.
  void advance_receive_cursor(std::size_t n);
  void deliver_and_advance_receive_cursor(const MessageContext& ctx, std::size_t n, bool is_end);

 private:
  friend class FramerChain;
  FramerContext(FramerChain& chain, std::size_t stage) : chain_(&chain), stage_(stage) {}
  FramerChain* chain_;
  std::size_t stage_;
};

/// Application-defined translation between messages and carrier bytes.
/// handle_received_data must not catch exceptions thrown by parse(); it is
/// re-run from the top whenever parse() suspends.
class Framer {
 public:
  virtual ~Framer() = default;
  virtual void start(FramerContext&) {}
  virtual void stop(FramerContext&) {}
  virtual void new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& mctx, bool is_end) {
    ctx.send(data, mctx, is_end);
  }
  virtual void handle_received_data(FramerContext& ctx) = 0;
};

using FramerFactory = std::function<std::unique_ptr<Framer>()>;

template <typename F, typename... Args>
FramerFactory make_framer_factory(Args... args) {
  return [=] { return std::make_unique<F>(args...); };
}

/// The framer stack of one connection. Insertion order runs innermost to
/// outermost: outbound data passes framers in insertion order, inbound data
/// in reverse.
class FramerChain {
 public:
  using MessageSink = std::function<void(Bytes data, const MessageContext& ctx)>;

  FramerChain(const std::vector<FramerFactory>& factories, std::size_t max_message_bytes);

  bool empty() const noexcept { return stages_.empty(); }
  std::size_t size() const noexcept { return stages_.size(); }

  void start();
  void stop();
  bool started() const noexcept { return started_; }
  bool stopped() const noexcept { return stopped_; }

  /// Runs new_sent_message through every stage; returns the adapter payload.
  /// Framer exceptions propagate to the caller.
  Bytes frame_outbound(ByteView data, const MessageContext& ctx, bool is_end);

  /// Feeds carrier bytes. `end_of_message` marks a carrier-level boundary and
  /// only matters when the chain is empty. Complete messages go to `sink`.
  /// Throws Error(range_error) when a message exceeds the size cap.
  void on_inbound(ByteView data, const MessageContext& ctx, bool end_of_message, const MessageSink& sink);

  /// Cursor of the outermost stage (first to see carrier bytes).
  const ReceiveCursor& outer_cursor() const;
  std::uint64_t bytes_in() const noexcept { return bytes_in_; }

 private:
  friend class FramerContext;
  struct Delivery {
    Bytes data;
    MessageContext ctx;
    bool is_end;
  };
  struct Op {
    bool deliver;
    std::size_t n;
    MessageContext ctx;
    bool is_end;
  };
  struct Stage {
    std::unique_ptr<Framer> framer;
    ReceiveCursor cursor;
    MessageContext inbound_ctx;
    std::optional<std::size_t> waiting_for;
    // Tentative operations of the running round, committed on normal return.
    std::size_t staged_consumed = 0;
    std::vector<Op> ops;
  };
  struct Suspend {
    std::size_t min_len;
  };

  void run_stage(std::size_t s, const MessageSink& sink);
  void emit(std::size_t s, Delivery d, const MessageSink& sink);
  void emit_final(Bytes data, const MessageContext& ctx, bool is_end, const MessageSink& sink);
  void send_from(std::size_t s, ByteView data, const MessageContext& ctx, bool is_end);

  std::vector<Stage> stages_;
  std::size_t max_message_bytes_;
  Bytes partial_;
  std::optional<MessageContext> partial_ctx_;
  Bytes* outbound_ = nullptr;
  std::uint64_t bytes_in_ = 0;
  bool started_ = false;
  bool stopped_ = false;
};

/// Listing-style demo framer: prefixes every outbound message with the
/// literal "HEADER"; inbound it strips a 6-byte header and delivers 5-byte
/// bodies. The header content is not validated.
class HeaderFramer final : public Framer {
 public:
  static constexpr std::size_t header_size = 6;
  static constexpr std::size_t body_size = 5;

  void new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& mctx, bool is_end) override;
  void handle_received_data(FramerContext& ctx) override;
};

/// 4-byte big-endian length prefix per message.
class LengthPrefixFramer final : public Framer {
 public:
  static constexpr std::size_t prefix_size = 4;

  void new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& mctx, bool is_end) override;
  void handle_received_data(FramerContext& ctx) override;

 private:
  Bytes pending_;
};

}  // namespace taps
