#include "taps/framer.hpp"

#include <algorithm>
#include <string>

#include "taps/error.hpp"

namespace taps {

void ReceiveCursor::append(ByteView bytes) {
  if (offset_ > 0 && offset_ >= buf_.size() / 2) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(offset_));
    offset_ = 0;
  }
  buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  received_ += bytes.size();
}

ByteView ReceiveCursor::peek(std::size_t skip, std::size_t max_len) const {
  if (skip > buffered()) throw Error(Errc::range_error, "peek past buffered data");
  const std::size_t n = std::min(max_len, buffered() - skip);
  return ByteView(buf_).subspan(offset_ + skip, n);
}

void ReceiveCursor::consume(std::size_t n) {
  if (n > buffered()) {
    throw Error(Errc::range_error,
                "cursor advance of " + std::to_string(n) + " with " + std::to_string(buffered()) + " buffered");
  }
  offset_ += n;
}

void ReceiveCursor::discard(std::size_t n) {
  consume(n);
  discarded_ += n;
}

Bytes ReceiveCursor::take(std::size_t n) {
  if (n > buffered()) throw Error(Errc::range_error, "deliver past buffered data");
  Bytes out(buf_.begin() + static_cast<std::ptrdiff_t>(offset_),
            buf_.begin() + static_cast<std::ptrdiff_t>(offset_ + n));
  offset_ += n;
  delivered_ += n;
  return out;
}

void FramerContext::send(ByteView data, const MessageContext& ctx, bool is_end) {
  chain_->send_from(stage_ + 1, data, ctx, is_end);
}

ParseResult FramerContext::parse(std::size_t min_len, std::size_t max_len) {
  auto& st = chain_->stages_[stage_];
  const std::size_t available = st.cursor.buffered() - st.staged_consumed;
  if (available < min_len) throw FramerChain::Suspend{st.staged_consumed + min_len};
  const std::size_t n = std::min(max_len, available);
  return ParseResult{st.cursor.peek(st.staged_consumed, n), st.inbound_ctx, false};
}

void FramerContext::advance_receive_cursor(std::size_t n) {
  auto& st = chain_->stages_[stage_];
  if (n > st.cursor.buffered() - st.staged_consumed) {
    throw Error(Errc::range_error, "advance_receive_cursor(" + std::to_string(n) + ") beyond buffered data");
  }
  st.staged_consumed += n;
  st.ops.push_back({false, n, {}, false});
}

void FramerContext::deliver_and_advance_receive_cursor(const MessageContext& ctx, std::size_t n, bool is_end) {
  auto& st = chain_->stages_[stage_];
  if (n > st.cursor.buffered() - st.staged_consumed) {
    throw Error(Errc::range_error,
                "deliver_and_advance_receive_cursor(" + std::to_string(n) + ") beyond buffered data");
  }
  st.staged_consumed += n;
  st.ops.push_back({true, n, ctx, is_end});
}

FramerChain::FramerChain(const std::vector<FramerFactory>& factories, std::size_t max_message_bytes)
    : max_message_bytes_(max_message_bytes) {
  stages_.reserve(factories.size());
  for (const auto& f : factories) {
    Stage st;
    st.framer = f();
    stages_.push_back(std::move(st));
  }
}

void FramerChain::start() {
  if (started_) return;
  started_ = true;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    FramerContext ctx(*this, s);
    stages_[s].framer->start(ctx);
  }
}

void FramerChain::stop() {
  if (!started_ || stopped_) return;
  stopped_ = true;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    FramerContext ctx(*this, s);
    stages_[s].framer->stop(ctx);
  }
}

Bytes FramerChain::frame_outbound(ByteView data, const MessageContext& ctx, bool is_end) {
  Bytes out;
  outbound_ = &out;
  try {
    send_from(0, data, ctx, is_end);
  } catch (...) {
    outbound_ = nullptr;
    throw;
  }
  outbound_ = nullptr;
  return out;
}

void FramerChain::send_from(std::size_t s, ByteView data, const MessageContext& ctx, bool is_end) {
  if (s >= stages_.size()) {
    if (outbound_ == nullptr) throw Error(Errc::framer_error, "send() called outside new_sent_message");
    append(*outbound_, data);
    return;
  }
  FramerContext fctx(*this, s);
  stages_[s].framer->new_sent_message(fctx, data, ctx, is_end);
}

void FramerChain::on_inbound(ByteView data, const MessageContext& ctx, bool end_of_message,
                             const MessageSink& sink) {
  bytes_in_ += data.size();
  if (stages_.empty()) {
    emit_final(Bytes(data.begin(), data.end()), ctx, end_of_message, sink);
    return;
  }
  auto& outer = stages_.back();
  outer.cursor.append(data);
  outer.inbound_ctx = ctx;
  run_stage(stages_.size() - 1, sink);
}

const ReceiveCursor& FramerChain::outer_cursor() const {
  if (stages_.empty()) throw Error(Errc::range_error, "empty framer chain has no cursor");
  return stages_.back().cursor;
}

void FramerChain::run_stage(std::size_t s, const MessageSink& sink) {
  for (;;) {
    auto& st = stages_[s];
    if (st.cursor.buffered() == 0) return;
    if (st.waiting_for && st.cursor.buffered() < *st.waiting_for) return;
    st.waiting_for.reset();
    st.staged_consumed = 0;
    st.ops.clear();
    FramerContext ctx(*this, s);
    try {
      st.framer->handle_received_data(ctx);
    } catch (const Suspend& sp) {
      st.waiting_for = sp.min_len;
      st.ops.clear();
      return;
    } catch (...) {
      st.ops.clear();
      throw;
    }
    // Commit the round in program order.
    const std::size_t consumed = st.staged_consumed;
    auto ops = std::move(st.ops);
    st.ops.clear();
    std::vector<Delivery> out;
    for (auto& op : ops) {
      if (op.deliver) {
        out.push_back(Delivery{st.cursor.take(op.n), std::move(op.ctx), op.is_end});
      } else {
        st.cursor.discard(op.n);
      }
    }
    for (auto& d : out) emit(s, std::move(d), sink);
    if (consumed == 0) return;  // no progress; wait for more data
  }
}

void FramerChain::emit(std::size_t s, Delivery d, const MessageSink& sink) {
  if (s == 0) {
    emit_final(std::move(d.data), d.ctx, d.is_end, sink);
    return;
  }
  auto& inner = stages_[s - 1];
  inner.cursor.append(d.data);
  inner.inbound_ctx = d.ctx;
  run_stage(s - 1, sink);
}

void FramerChain::emit_final(Bytes data, const MessageContext& ctx, bool is_end, const MessageSink& sink) {
  if (partial_.size() + data.size() > max_message_bytes_) {
    partial_.clear();
    partial_ctx_.reset();
    throw Error(Errc::range_error, "inbound message exceeds " + std::to_string(max_message_bytes_) + " bytes");
  }
  if (!partial_ctx_) partial_ctx_ = ctx;
  if (partial_.empty()) {
    partial_ = std::move(data);
  } else {
    append(partial_, data);
  }
  if (!is_end) return;
  Bytes msg = std::move(partial_);
  MessageContext mctx = *partial_ctx_;
  partial_.clear();
  partial_ctx_.reset();
  sink(std::move(msg), mctx);
}

void HeaderFramer::new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& mctx,
                                    bool is_end) {
  Bytes framed = to_bytes("HEADER");
  append(framed, data);
  ctx.send(framed, mctx, is_end);
}

void HeaderFramer::handle_received_data(FramerContext& ctx) {
  auto header = ctx.parse(header_size, header_size);
  ctx.advance_receive_cursor(header_size);
  // Make sure the body is buffered before consuming; a short body suspends
  // the whole round, header included.
  ctx.parse(body_size, body_size);
  ctx.deliver_and_advance_receive_cursor(header.context, body_size, true);
}

void LengthPrefixFramer::new_sent_message(FramerContext& ctx, ByteView data, const MessageContext& mctx,
                                          bool is_end) {
  append(pending_, data);
  if (!is_end) return;
  Bytes framed(prefix_size);
  const auto n = static_cast<std::uint32_t>(pending_.size());
  framed[0] = static_cast<std::uint8_t>(n >> 24);
  framed[1] = static_cast<std::uint8_t>(n >> 16);
  framed[2] = static_cast<std::uint8_t>(n >> 8);
  framed[3] = static_cast<std::uint8_t>(n);
  append(framed, pending_);
  pending_.clear();
  ctx.send(framed, mctx, true);
}

void LengthPrefixFramer::handle_received_data(FramerContext& ctx) {
  auto prefix = ctx.parse(prefix_size, prefix_size);
  const std::size_t n = (std::size_t{prefix.data[0]} << 24) | (std::size_t{prefix.data[1]} << 16) |
                        (std::size_t{prefix.data[2]} << 8) | std::size_t{prefix.data[3]};
  auto ctx_copy = prefix.context;
  ctx.parse(prefix_size + n, prefix_size + n);
  ctx.advance_receive_cursor(prefix_size);
  ctx.deliver_and_advance_receive_cursor(ctx_copy, n, true);
}

}  // namespace taps
