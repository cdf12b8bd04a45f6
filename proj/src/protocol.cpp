#include "taps/protocol.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "taps/msgmux.hpp"
#include "taps/netsim.hpp"

namespace taps {

std::string_view to_string(ProtocolId p) {
  switch (p) {
    case ProtocolId::tcp: return "TCP";
    case ProtocolId::udp: return "UDP";
    case ProtocolId::msgmux: return "MSGMUX";
    case ProtocolId::sim_stream: return "SIM_STREAM";
    case ProtocolId::sim_msg: return "SIM_MSG";
  }
  return "?";
}

ProtocolId protocol_from_string(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto p : all_protocols) {
    if (to_string(p) == upper) return p;
  }
  throw Error(Errc::unknown_protocol, "unknown protocol '" + std::string(name) + "'");
}

FeatureSet features(ProtocolId p) {
  FeatureSet f;
  switch (p) {
    case ProtocolId::tcp:
    case ProtocolId::sim_stream:
      f.reliable = true;
      f.preserves_order = true;
      return f;
    case ProtocolId::udp:
      f.preserves_msg_boundaries = true;
      f.zero_rtt = true;
      return f;
    case ProtocolId::msgmux:
      f.reliable = true;
      f.preserves_msg_boundaries = true;
      f.preserves_order = true;
      f.multistreaming = true;
      return f;
    case ProtocolId::sim_msg:
      // Ordering is chosen per message, so it is not advertised.
      f.reliable = true;
      f.preserves_msg_boundaries = true;
      f.multistreaming = true;
      f.per_msg_reliability = true;
      return f;
  }
  throw Error(Errc::unknown_protocol, "unknown protocol id " + std::to_string(static_cast<int>(p)));
}

int protocol_rank(ProtocolId p) {
  switch (p) {
    case ProtocolId::msgmux: return 0;
    case ProtocolId::sim_msg: return 1;
    case ProtocolId::tcp: return 2;
    case ProtocolId::sim_stream: return 3;
    case ProtocolId::udp: return 4;
  }
  throw Error(Errc::unknown_protocol, "unknown protocol id " + std::to_string(static_cast<int>(p)));
}

bool supports_expiry(ProtocolId p) {
  const FeatureSet f = features(p);
  return f.per_msg_reliability || !f.reliable;
}

namespace {

/// Handler storage shared by the adapters. Inbound data that arrives before
/// the owner installs handlers is held and replayed afterwards.
class PcBase : public ProtocolConnection {
 public:
  explicit PcBase(EventLoop& loop) : loop_(loop) {}

  void set_handlers(Handlers h) override {
    h_ = std::move(h);
    if (!early_.empty() || early_close_) {
      std::weak_ptr<PcBase> weak = self();
      loop_.post([weak] {
        if (auto s = weak.lock()) s->flush_early();
      });
    }
  }

 protected:
  virtual std::shared_ptr<PcBase> self() = 0;

  void deliver(ByteView data, const MessageContext& ctx, bool eom) {
    if (!h_.on_data || !early_.empty()) {
      early_.push_back(Early{Bytes(data.begin(), data.end()), ctx, eom});
      return;
    }
    auto cb = h_.on_data;
    cb(data, ctx, eom);
  }

  void flush_early() {
    while (!early_.empty() && h_.on_data) {
      Early e = std::move(early_.front());
      early_.erase(early_.begin());
      auto cb = h_.on_data;
      cb(e.data, e.ctx, e.eom);
    }
    if (early_.empty() && early_close_ && h_.on_closed) {
      auto err = std::move(*early_close_);
      early_close_.reset();
      auto cb = h_.on_closed;
      cb(err ? &*err : nullptr);
    }
  }

  void post_ready() {
    std::weak_ptr<PcBase> weak = self();
    loop_.post([weak] {
      if (auto s = weak.lock(); s && s->h_.on_ready) s->h_.on_ready();
    });
  }

  void post_establishment_error(Error e) {
    std::weak_ptr<PcBase> weak = self();
    loop_.post([weak, e] {
      if (auto s = weak.lock(); s && s->h_.on_establishment_error) s->h_.on_establishment_error(e);
    });
  }

  void notify_closed(const Error* err) {
    if (!h_.on_closed || !early_.empty()) {
      // Replayed after any held data once handlers exist.
      early_close_ = err ? std::optional<Error>(*err) : std::nullopt;
      return;
    }
    {
      auto cb = h_.on_closed;
      cb(err);
    }
  }

  void notify_writable() {
    if (h_.on_writable) {
      auto cb = h_.on_writable;
      cb();
    }
  }

  struct Early {
    Bytes data;
    MessageContext ctx;
    bool eom;
  };

  EventLoop& loop_;
  Handlers h_;
  std::vector<Early> early_;
  std::optional<std::optional<Error>> early_close_;
};

// ---------------------------------------------------------------------------
// TCP and SIM_STREAM: one message per write, boundaries not preserved.

class StreamPc final : public PcBase, public std::enable_shared_from_this<StreamPc> {
 public:
  StreamPc(ProtocolId id, NetworkBackend& backend, Endpoint remote)
      : PcBase(backend.loop()), id_(id), backend_(&backend), remote_(std::move(remote)) {}

  StreamPc(ProtocolId id, EventLoop& loop, std::shared_ptr<StreamCarrier> carrier, Bytes initial)
      : PcBase(loop), id_(id), carrier_(std::move(carrier)), established_(true) {
    remote_ = carrier_->remote();
    if (!initial.empty()) early_.push_back(Early{std::move(initial), {}, true});
  }

  void bind_carrier() {
    std::weak_ptr<StreamPc> weak = shared_from_this();
    StreamCarrier::Handlers ch;
    ch.on_connected = [weak] {
      if (auto s = weak.lock()) s->on_connected();
    };
    ch.on_data = [weak](ByteView d) {
      if (auto s = weak.lock()) s->deliver(d, {}, true);
    };
    ch.on_closed = [weak](const Error* e) {
      if (auto s = weak.lock()) s->on_carrier_closed(e);
    };
    ch.on_writable = [weak] {
      if (auto s = weak.lock()) s->notify_writable();
    };
    carrier_->set_handlers(std::move(ch));
  }

  /// The carrier ended before the adapter was bound to it.
  void closed_before_bind(std::optional<Error> e) {
    std::weak_ptr<StreamPc> weak = shared_from_this();
    loop_.post([weak, e] {
      if (auto s = weak.lock()) s->on_carrier_closed(e ? &*e : nullptr);
    });
  }

  ProtocolId protocol() const override { return id_; }

  void start() override {
    try {
      carrier_ = backend_->connect_stream(remote_);
    } catch (const Error& e) {
      post_establishment_error(e);
      return;
    }
    bind_carrier();
  }

  bool established() const override { return established_ && carrier_ && carrier_->is_open(); }
  void dismiss() override {
    if (!carrier_) return;
    if (established_) {
      carrier_->close();
    } else {
      carrier_->abort();
    }
  }

  bool can_accept() const override {
    return established() && carrier_->pending_bytes() < adapter_high_watermark;
  }
  void send(ByteView wire, const MessageProperties&) override {
    if (!established()) throw Error(Errc::carrier_closed, "connection closed");
    carrier_->write(wire);
  }
  void close() override {
    if (carrier_) carrier_->close();
  }
  void abort() override {
    if (carrier_) carrier_->abort();
  }
  void set_dscp(std::uint8_t dscp) override {
    dscp_ = dscp;
    if (carrier_) carrier_->set_dscp(dscp);
  }
  Endpoint remote() const override { return remote_; }

 protected:
  std::shared_ptr<PcBase> self() override { return shared_from_this(); }

 private:
  void on_connected() {
    established_ = true;
    if (dscp_ != 0) carrier_->set_dscp(dscp_);
    if (h_.on_ready) h_.on_ready();
  }

  void on_carrier_closed(const Error* e) {
    if (!established_) {
      const Error fallback(Errc::establishment_failed, "connection to " + remote_.to_string() + " failed");
      if (h_.on_establishment_error) h_.on_establishment_error(e ? *e : fallback);
      return;
    }
    notify_closed(e);
  }

  ProtocolId id_;
  NetworkBackend* backend_ = nullptr;
  Endpoint remote_;
  std::shared_ptr<StreamCarrier> carrier_;
  bool established_ = false;
  std::uint8_t dscp_ = 0;
};

// ---------------------------------------------------------------------------
// UDP

class UdpPc final : public PcBase, public std::enable_shared_from_this<UdpPc> {
 public:
  /// Client side: owns its socket.
  UdpPc(NetworkBackend& backend, Endpoint remote) : PcBase(backend.loop()), backend_(&backend), remote_(std::move(remote)) {}
  /// Server side: shares the listening socket.
  UdpPc(EventLoop& loop, std::shared_ptr<DatagramSocket> socket, Endpoint remote, std::function<void()> on_close)
      : PcBase(loop), socket_(std::move(socket)), remote_(std::move(remote)), shared_(true),
        on_close_(std::move(on_close)) {}

  ProtocolId protocol() const override { return ProtocolId::udp; }

  void start() override {
    try {
      socket_ = backend_->open_datagram(std::nullopt);
    } catch (const Error& e) {
      post_establishment_error(e);
      return;
    }
    std::weak_ptr<UdpPc> weak = shared_from_this();
    socket_->set_receive_handler([weak](const Endpoint& from, ByteView d) {
      auto s = weak.lock();
      if (s && !s->closed_ && from == s->remote_) s->deliver(d, {}, true);
    });
    post_ready();
  }

  void datagram(ByteView d) {
    if (!closed_) deliver(d, {}, true);
  }

  bool established() const override { return socket_ && !closed_; }
  bool can_accept() const override { return established(); }
  void send(ByteView wire, const MessageProperties&) override {
    if (!established()) throw Error(Errc::carrier_closed, "socket closed");
    if (wire.size() > max_udp_payload) {
      throw Error(Errc::message_too_large,
                  std::to_string(wire.size()) + " bytes exceed the datagram limit of " + std::to_string(max_udp_payload));
    }
    socket_->send_to(remote_, wire, dscp_);
  }
  void close() override {
    if (closed_) return;
    closed_ = true;
    if (shared_) {
      if (on_close_) on_close_();
    } else if (socket_) {
      socket_->close();
    }
  }
  void abort() override { close(); }
  void set_dscp(std::uint8_t dscp) override { dscp_ = dscp; }
  Endpoint remote() const override { return remote_; }

 protected:
  std::shared_ptr<PcBase> self() override { return shared_from_this(); }

 private:
  NetworkBackend* backend_ = nullptr;
  std::shared_ptr<DatagramSocket> socket_;
  Endpoint remote_;
  bool shared_ = false;
  std::function<void()> on_close_;
  bool closed_ = false;
  std::uint8_t dscp_ = 0;
};

// ---------------------------------------------------------------------------
// MSGMUX

class MuxStreamPc;

class MuxAssociation : public std::enable_shared_from_this<MuxAssociation> {
 public:
  enum class Phase { connecting, handshaking, open, closed };

  MuxAssociation(std::shared_ptr<StreamCarrier> carrier, bool initiator)
      : carrier_(std::move(carrier)), initiator_(initiator), ids_(initiator),
        phase_(initiator ? Phase::connecting : Phase::open) {}

  std::function<void()> on_handshake_done;
  std::function<void(const Error&)> on_handshake_failed;
  std::function<void(std::uint32_t)> on_new_stream;

  void bind_carrier() {
    std::weak_ptr<MuxAssociation> weak = shared_from_this();
    StreamCarrier::Handlers ch;
    ch.on_connected = [weak] {
      if (auto s = weak.lock()) s->on_connected();
    };
    ch.on_data = [weak](ByteView d) {
      if (auto s = weak.lock()) s->on_bytes(d);
    };
    ch.on_closed = [weak](const Error* e) {
      if (auto s = weak.lock()) s->on_carrier_closed(e);
    };
    ch.on_writable = [weak] {
      if (auto s = weak.lock()) s->on_writable();
    };
    carrier_->set_handlers(std::move(ch));
  }

  /// Acceptor side, after the magic was recognised.
  void accept(ByteView rest) {
    carrier_->write(to_bytes(msgmux::handshake_ack));
    if (!rest.empty()) on_bytes(rest);
  }

  Phase phase() const noexcept { return phase_; }
  bool usable() const noexcept { return phase_ == Phase::open && !goaway_sent_ && !goaway_received_; }
  StreamCarrier& carrier() { return *carrier_; }

  std::uint32_t open_stream() {
    if (!usable()) throw Error(Errc::association_closed, "MSGMUX association is closing");
    const std::uint32_t id = ids_.next();
    write_frame(msgmux::Frame{msgmux::FrameType::open_stream, id, 0, {}});
    return id;
  }

  void register_stream(std::uint32_t id, std::weak_ptr<MuxStreamPc> pc) {
    streams_[id] = std::move(pc);
    had_streams_ = true;
  }

  void send_message(std::uint32_t id, ByteView data) {
    if (phase_ != Phase::open || !streams_.count(id)) throw Error(Errc::carrier_closed, "MSGMUX stream closed");
    Bytes out;
    msgmux::encode_message(id, data, true, out);
    carrier_->write(out);
  }

  void close_stream(std::uint32_t id) {
    if (streams_.erase(id) == 0) return;
    if (phase_ == Phase::open) write_frame(msgmux::Frame{msgmux::FrameType::close_stream, id, 0, {}});
    maybe_finish();
  }

  void reset_stream(std::uint32_t id) {
    if (streams_.erase(id) == 0) return;
    if (phase_ == Phase::open) write_frame(msgmux::Frame{msgmux::FrameType::reset_stream, id, 0, {}});
    maybe_finish();
  }

  /// Announces that no new streams will be opened and closes the carrier.
  void goaway() {
    if (phase_ == Phase::closed) return;
    if (phase_ == Phase::open && !goaway_sent_) {
      goaway_sent_ = true;
      write_frame(msgmux::Frame{msgmux::FrameType::goaway, msgmux::control_stream, 0, {}});
      carrier_->close();
    } else {
      carrier_->abort();
    }
    phase_ = Phase::closed;
  }

  void abort() {
    if (phase_ == Phase::closed) return;
    phase_ = Phase::closed;
    carrier_->abort();
  }

  void set_dscp(std::uint8_t dscp) { carrier_->set_dscp(dscp); }

 private:
  void write_frame(const msgmux::Frame& f) {
    Bytes out;
    msgmux::encode(f, out);
    carrier_->write(out);
  }

  void maybe_finish() {
    // The initiator owns the association lifetime: once its last stream is
    // gone it says goodbye.
    if (initiator_ && streams_.empty() && had_streams_ && phase_ == Phase::open) goaway();
  }

  void on_connected() {
    phase_ = Phase::handshaking;
    carrier_->write(to_bytes(msgmux::handshake_magic));
  }

  void on_bytes(ByteView d);
  void on_frame(msgmux::Frame& f);
  void on_carrier_closed(const Error* e);
  void on_writable();
  void fail_handshake(const Error& e) {
    phase_ = Phase::closed;
    carrier_->abort();
    if (on_handshake_failed) on_handshake_failed(e);
  }

  std::shared_ptr<StreamCarrier> carrier_;
  bool initiator_;
  msgmux::StreamIdAllocator ids_;
  Phase phase_;
  Bytes hs_buf_;
  msgmux::FrameDecoder decoder_;
  std::map<std::uint32_t, std::weak_ptr<MuxStreamPc>> streams_;
  bool had_streams_ = false;
  bool goaway_sent_ = false;
  bool goaway_received_ = false;
};

class MuxStreamPc final : public PcBase, public std::enable_shared_from_this<MuxStreamPc> {
 public:
  /// Initiator before establishment.
  MuxStreamPc(NetworkBackend& backend, Endpoint remote)
      : PcBase(backend.loop()), backend_(&backend), remote_(std::move(remote)) {}
  /// A stream of an open association.
  MuxStreamPc(EventLoop& loop, std::shared_ptr<MuxAssociation> assoc, std::uint32_t id)
      : PcBase(loop), assoc_(std::move(assoc)), id_(id), established_(true) {
    remote_ = assoc_->carrier().remote();
  }

  static std::shared_ptr<MuxStreamPc> on_stream(EventLoop& loop, std::shared_ptr<MuxAssociation> assoc,
                                               std::uint32_t id) {
    auto pc = std::make_shared<MuxStreamPc>(loop, assoc, id);
    assoc->register_stream(id, pc);
    return pc;
  }

  ProtocolId protocol() const override { return ProtocolId::msgmux; }

  void start() override {
    std::shared_ptr<StreamCarrier> carrier;
    try {
      carrier = backend_->connect_stream(remote_);
    } catch (const Error& e) {
      post_establishment_error(e);
      return;
    }
    assoc_ = std::make_shared<MuxAssociation>(carrier, true);
    std::weak_ptr<MuxStreamPc> weak = shared_from_this();
    assoc_->on_handshake_done = [weak] {
      if (auto s = weak.lock()) {
        s->established_ = true;
        if (s->h_.on_ready) s->h_.on_ready();
      }
    };
    assoc_->on_handshake_failed = [weak](const Error& e) {
      if (auto s = weak.lock(); s && s->h_.on_establishment_error) s->h_.on_establishment_error(e);
    };
    assoc_->bind_carrier();
  }

  void activate() override {
    if (id_ != 0 || !assoc_) return;
    id_ = assoc_->open_stream();
    assoc_->register_stream(id_, weak_from_this());
  }

  void dismiss() override {
    if (assoc_) assoc_->goaway();
  }

  bool established() const override { return established_ && !closed_ && assoc_ && assoc_->phase() == MuxAssociation::Phase::open; }
  bool can_accept() const override {
    return established() && assoc_->carrier().pending_bytes() < adapter_high_watermark;
  }
  void send(ByteView wire, const MessageProperties&) override {
    if (!established() || id_ == 0) throw Error(Errc::carrier_closed, "MSGMUX stream closed");
    assoc_->send_message(id_, wire);
  }
  void close() override {
    if (closed_ || !assoc_) return;
    closed_ = true;
    if (id_ != 0) {
      assoc_->close_stream(id_);
    } else {
      assoc_->goaway();
    }
  }
  void abort() override {
    if (closed_ || !assoc_) return;
    closed_ = true;
    if (id_ != 0 && assoc_->phase() == MuxAssociation::Phase::open) {
      assoc_->reset_stream(id_);
    } else {
      assoc_->abort();
    }
  }
  void set_dscp(std::uint8_t dscp) override {
    if (assoc_) assoc_->set_dscp(dscp);
  }
  Endpoint remote() const override { return remote_; }

  std::shared_ptr<ProtocolConnection> open_sibling_stream() override {
    if (!established()) throw Error(Errc::association_closed, "MSGMUX association not open");
    const std::uint32_t id = assoc_->open_stream();
    return on_stream(loop_, assoc_, id);
  }
  std::optional<std::uint32_t> stream_id() const override {
    if (id_ == 0) return std::nullopt;
    return id_;
  }

  // Called by the association.
  void frame_data(ByteView payload, bool eom) {
    MessageContext ctx;
    ctx.stream_id = id_;
    deliver(payload, ctx, eom);
  }
  void peer_closed(const Error* e) {
    if (closed_) return;
    closed_ = true;
    notify_closed(e);
  }
  void writable() { notify_writable(); }

 protected:
  std::shared_ptr<PcBase> self() override { return shared_from_this(); }

 private:
  NetworkBackend* backend_ = nullptr;
  Endpoint remote_;
  std::shared_ptr<MuxAssociation> assoc_;
  std::uint32_t id_ = 0;
  bool established_ = false;
  bool closed_ = false;
};

void MuxAssociation::on_bytes(ByteView d) {
  auto keep = shared_from_this();
  if (phase_ == Phase::handshaking) {
    const std::size_t need = msgmux::handshake_ack.size() - hs_buf_.size();
    const std::size_t take = std::min(need, d.size());
    append(hs_buf_, d.first(take));
    d = d.subspan(take);
    const auto expected = to_bytes(msgmux::handshake_ack);
    if (!std::equal(hs_buf_.begin(), hs_buf_.end(), expected.begin())) {
      fail_handshake(Error(Errc::handshake_mismatch, "peer did not answer the MSGMUX handshake"));
      return;
    }
    if (hs_buf_.size() < expected.size()) return;
    phase_ = Phase::open;
    if (on_handshake_done) on_handshake_done();
    if (phase_ != Phase::open || d.empty()) return;
  }
  if (phase_ != Phase::open) return;
  std::vector<msgmux::Frame> frames;
  try {
    frames = decoder_.feed(d);
  } catch (const Error& e) {
    abort();
    auto streams = std::move(streams_);
    streams_.clear();
    for (auto& [id, w] : streams) {
      if (auto pc = w.lock()) pc->peer_closed(&e);
    }
    return;
  }
  for (auto& f : frames) {
    on_frame(f);
    if (phase_ == Phase::closed) return;
  }
}

void MuxAssociation::on_frame(msgmux::Frame& f) {
  using msgmux::FrameType;
  switch (f.type) {
    case FrameType::data: {
      auto it = streams_.find(f.stream_id);
      if (it == streams_.end()) return;
      if (auto pc = it->second.lock()) pc->frame_data(f.payload, f.end_of_message());
      return;
    }
    case FrameType::open_stream:
      if (msgmux::StreamIdAllocator::initiator_owned(f.stream_id) == initiator_ || streams_.count(f.stream_id)) return;
      if (on_new_stream) {
        on_new_stream(f.stream_id);
      } else {
        write_frame(msgmux::Frame{FrameType::reset_stream, f.stream_id, 0, {}});
      }
      return;
    case FrameType::close_stream:
    case FrameType::reset_stream: {
      auto it = streams_.find(f.stream_id);
      if (it == streams_.end()) return;
      auto pc = it->second.lock();
      streams_.erase(it);
      if (pc) {
        if (f.type == FrameType::close_stream) {
          pc->peer_closed(nullptr);
        } else {
          const Error e(Errc::connection_reset, "stream " + std::to_string(f.stream_id) + " reset by peer");
          pc->peer_closed(&e);
        }
      }
      maybe_finish();
      return;
    }
    case FrameType::goaway:
      goaway_received_ = true;
      if (streams_.empty()) {
        phase_ = Phase::closed;
        carrier_->close();
      }
      return;
  }
}

void MuxAssociation::on_carrier_closed(const Error* e) {
  auto keep = shared_from_this();
  const Phase was = phase_;
  phase_ = Phase::closed;
  if (was == Phase::connecting || was == Phase::handshaking) {
    const Error fallback(Errc::handshake_mismatch, "carrier closed during MSGMUX handshake");
    if (on_handshake_failed) on_handshake_failed(e ? *e : fallback);
    return;
  }
  auto streams = std::move(streams_);
  streams_.clear();
  for (auto& [id, w] : streams) {
    if (auto pc = w.lock()) pc->peer_closed(e);
  }
}

void MuxAssociation::on_writable() {
  auto keep = shared_from_this();
  std::vector<std::shared_ptr<MuxStreamPc>> pcs;
  for (auto& [id, w] : streams_) {
    if (auto pc = w.lock()) pcs.push_back(pc);
  }
  for (auto& pc : pcs) pc->writable();
}

// ---------------------------------------------------------------------------
// SIM_MSG: streams of a simulated message-mode association.

class SimMsgPc;

struct SimMsgSession {
  std::shared_ptr<sim::Association> assoc;
  std::map<std::uint32_t, std::weak_ptr<SimMsgPc>> streams;
  std::function<void(std::uint32_t)> on_new_stream;
};

class SimMsgPc final : public PcBase, public std::enable_shared_from_this<SimMsgPc> {
 public:
  SimMsgPc(NetworkBackend& backend, Endpoint remote)
      : PcBase(backend.loop()), backend_(&backend), remote_(std::move(remote)) {}
  SimMsgPc(EventLoop& loop, std::shared_ptr<SimMsgSession> session, std::uint32_t id)
      : PcBase(loop), session_(std::move(session)), id_(id), established_(true) {
    remote_ = session_->assoc->remote();
  }

  static void bind_session(const std::shared_ptr<SimMsgSession>& session, std::function<void()> on_established,
                           std::function<void(const Error*)> on_failed) {
    std::weak_ptr<SimMsgSession> weak = session;
    sim::Association::Handlers h;
    h.on_established = std::move(on_established);
    h.on_closed = std::move(on_failed);
    h.on_writable = [weak] {
      auto s = weak.lock();
      if (!s) return;
      std::vector<std::shared_ptr<SimMsgPc>> pcs;
      for (auto& [id, w] : s->streams) {
        if (auto pc = w.lock()) pcs.push_back(pc);
      }
      for (auto& pc : pcs) pc->notify_writable();
    };
    h.on_new_stream = [weak](std::uint32_t id) {
      auto s = weak.lock();
      if (s && s->on_new_stream) s->on_new_stream(id);
    };
    session->assoc->set_handlers(std::move(h));
  }

  static std::shared_ptr<SimMsgPc> on_stream(EventLoop& loop, const std::shared_ptr<SimMsgSession>& session,
                                            std::uint32_t id) {
    auto pc = std::make_shared<SimMsgPc>(loop, session, id);
    pc->attach_stream();
    return pc;
  }

  ProtocolId protocol() const override { return ProtocolId::sim_msg; }

  void start() override {
    auto* host = dynamic_cast<sim::Host*>(backend_);
    if (!host) {
      post_establishment_error(Error(Errc::unknown_protocol, "SIM_MSG needs a simulated host"));
      return;
    }
    session_ = std::make_shared<SimMsgSession>();
    session_->assoc = host->connect_association(remote_);
    std::weak_ptr<SimMsgPc> weak = shared_from_this();
    bind_session(
        session_,
        [weak] {
          if (auto s = weak.lock()) {
            s->established_ = true;
            if (s->h_.on_ready) s->h_.on_ready();
          }
        },
        [weak](const Error* e) {
          auto s = weak.lock();
          if (!s || s->established_) return;
          const Error fallback(Errc::establishment_failed, "association closed");
          if (s->h_.on_establishment_error) s->h_.on_establishment_error(e ? *e : fallback);
        });
  }

  void activate() override {
    if (id_ != 0 || !session_) return;
    id_ = session_->assoc->open_stream();
    attach_stream();
  }

  void dismiss() override {
    if (session_) session_->assoc->close();
  }

  bool established() const override {
    return established_ && !closed_ && session_ && session_->assoc->state() == sim::Association::State::established;
  }
  bool can_accept() const override {
    return established() && session_->assoc->stream_backlog(id_) < adapter_high_watermark;
  }
  void send(ByteView wire, const MessageProperties& props) override {
    if (!established() || id_ == 0) throw Error(Errc::carrier_closed, "SIM_MSG stream closed");
    session_->assoc->send_message(id_, Bytes(wire.begin(), wire.end()), props);
  }
  void close() override {
    if (closed_ || !session_) return;
    closed_ = true;
    session_->streams.erase(id_);
    auto& a = *session_->assoc;
    if (a.initiator() && session_->streams.empty()) {
      a.close();
    } else if (id_ != 0) {
      a.close_stream(id_);
    }
  }
  void abort() override {
    if (closed_ || !session_) return;
    closed_ = true;
    session_->streams.erase(id_);
    auto& a = *session_->assoc;
    if (id_ != 0) a.reset_stream(id_);
    if (a.initiator() && session_->streams.empty()) a.close();
  }
  void set_dscp(std::uint8_t dscp) override {
    if (session_) session_->assoc->set_dscp(dscp);
  }
  Endpoint remote() const override { return remote_; }

  std::shared_ptr<ProtocolConnection> open_sibling_stream() override {
    if (!established()) throw Error(Errc::association_closed, "association not open");
    const std::uint32_t id = session_->assoc->open_stream();
    return on_stream(loop_, session_, id);
  }
  std::optional<std::uint32_t> stream_id() const override {
    if (id_ == 0) return std::nullopt;
    return id_;
  }

 protected:
  std::shared_ptr<PcBase> self() override { return shared_from_this(); }

 private:
  void attach_stream() {
    session_->streams[id_] = weak_from_this();
    std::weak_ptr<SimMsgPc> weak = shared_from_this();
    sim::Association::StreamHandlers sh;
    sh.on_message = [weak](ByteView m, const MessageProperties& props) {
      if (auto s = weak.lock()) {
        MessageContext ctx;
        ctx.stream_id = s->id_;
        ctx.properties = props;
        s->deliver(m, ctx, true);
      }
    };
    sh.on_closed = [weak](const Error* e) {
      auto s = weak.lock();
      if (!s || s->closed_) return;
      s->closed_ = true;
      if (s->session_) s->session_->streams.erase(s->id_);
      s->notify_closed(e);
    };
    session_->assoc->set_stream_handlers(id_, std::move(sh));
  }

  NetworkBackend* backend_ = nullptr;
  Endpoint remote_;
  std::shared_ptr<SimMsgSession> session_;
  std::uint32_t id_ = 0;
  bool established_ = false;
  bool closed_ = false;
};

bool contains(const std::vector<ProtocolId>& v, ProtocolId p) { return std::find(v.begin(), v.end(), p) != v.end(); }

}  // namespace

std::shared_ptr<ProtocolConnection> make_connector(ProtocolId p, NetworkBackend& backend, const Endpoint& remote) {
  switch (p) {
    case ProtocolId::tcp:
    case ProtocolId::sim_stream:
      if (p == ProtocolId::sim_stream && !dynamic_cast<sim::Host*>(&backend)) {
        throw Error(Errc::unknown_protocol, "SIM_STREAM needs a simulated host");
      }
      return std::make_shared<StreamPc>(p, backend, remote);
    case ProtocolId::udp: return std::make_shared<UdpPc>(backend, remote);
    case ProtocolId::msgmux: return std::make_shared<MuxStreamPc>(backend, remote);
    case ProtocolId::sim_msg:
      if (!dynamic_cast<sim::Host*>(&backend)) throw Error(Errc::unknown_protocol, "SIM_MSG needs a simulated host");
      return std::make_shared<SimMsgPc>(backend, remote);
  }
  throw Error(Errc::unknown_protocol, "unknown protocol id " + std::to_string(static_cast<int>(p)));
}

// ---------------------------------------------------------------------------
// Listener

struct ProtocolListener::State : std::enable_shared_from_this<ProtocolListener::State> {
  NetworkBackend& backend;
  AcceptHandler on_accept;
  AdapterOptions opts;
  bool want_mux = false;
  std::optional<ProtocolId> stream_label;
  bool stopped = false;

  std::shared_ptr<StreamAcceptor> stream_acceptor;
  std::shared_ptr<StreamAcceptor> assoc_acceptor;
  std::shared_ptr<DatagramSocket> udp;
  std::map<Endpoint, std::weak_ptr<UdpPc>> udp_peers;

  struct Sniff {
    std::shared_ptr<StreamCarrier> carrier;
    Bytes buf;
    TimerId timer = 0;
  };
  std::map<std::uint64_t, Sniff> sniffing;
  std::uint64_t next_sniff = 0;
  // Accepted associations waiting for their first stream.
  std::vector<std::shared_ptr<MuxAssociation>> mux_pending;
  std::vector<std::shared_ptr<SimMsgSession>> msg_pending;

  State(NetworkBackend& b, AcceptHandler h, AdapterOptions o) : backend(b), on_accept(std::move(h)), opts(o) {}

  void deliver(std::shared_ptr<ProtocolConnection> pc) {
    if (stopped) {
      pc->abort();
      return;
    }
    on_accept(std::move(pc));
  }

  void accept_stream(std::shared_ptr<StreamCarrier> carrier) {
    if (stopped) {
      carrier->abort();
      return;
    }
    if (!want_mux) {
      make_stream_pc(std::move(carrier), {});
      return;
    }
    const std::uint64_t key = next_sniff++;
    std::weak_ptr<State> weak = shared_from_this();
    StreamCarrier::Handlers ch;
    ch.on_data = [weak, key](ByteView d) {
      if (auto s = weak.lock()) s->sniff_data(key, d);
    };
    ch.on_closed = [weak, key](const Error* e) {
      if (auto s = weak.lock()) s->sniff_closed(key, e);
    };
    carrier->set_handlers(std::move(ch));
    Sniff sn;
    sn.carrier = std::move(carrier);
    sn.timer = backend.loop().call_after(opts.sniff_timeout, [weak, key] {
      if (auto s = weak.lock()) s->sniff_timeout(key);
    });
    sniffing.emplace(key, std::move(sn));
  }

  std::shared_ptr<StreamPc> make_stream_pc(std::shared_ptr<StreamCarrier> carrier, Bytes initial) {
    auto pc = std::make_shared<StreamPc>(*stream_label, backend.loop(), std::move(carrier), std::move(initial));
    pc->bind_carrier();
    deliver(pc);
    return pc;
  }

  void sniff_data(std::uint64_t key, ByteView d) {
    auto it = sniffing.find(key);
    if (it == sniffing.end()) return;
    append(it->second.buf, d);
    const Bytes& buf = it->second.buf;
    const auto magic = to_bytes(msgmux::handshake_magic);
    const std::size_t n = std::min(buf.size(), magic.size());
    const bool prefix = std::equal(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n), magic.begin());
    if (prefix && buf.size() < magic.size()) return;
    Sniff sn = std::move(it->second);
    sniffing.erase(it);
    backend.loop().cancel(sn.timer);
    if (prefix) {
      start_mux(std::move(sn.carrier), ByteView(sn.buf).subspan(magic.size()));
    } else if (stream_label) {
      make_stream_pc(std::move(sn.carrier), std::move(sn.buf));
    } else {
      sn.carrier->abort();
    }
  }

  void sniff_timeout(std::uint64_t key) {
    auto it = sniffing.find(key);
    if (it == sniffing.end()) return;
    Sniff sn = std::move(it->second);
    sniffing.erase(it);
    if (stream_label && !stopped) {
      make_stream_pc(std::move(sn.carrier), std::move(sn.buf));
    } else {
      sn.carrier->abort();
    }
  }

  // A peer that closes before saying anything is a plain stream peer.
  void sniff_closed(std::uint64_t key, const Error* e) {
    auto it = sniffing.find(key);
    if (it == sniffing.end()) return;
    Sniff sn = std::move(it->second);
    sniffing.erase(it);
    backend.loop().cancel(sn.timer);
    if (!stream_label || stopped) return;
    auto pc = make_stream_pc(std::move(sn.carrier), std::move(sn.buf));
    pc->closed_before_bind(e ? std::optional<Error>(*e) : std::nullopt);
  }

  void start_mux(std::shared_ptr<StreamCarrier> carrier, ByteView rest) {
    auto assoc = std::make_shared<MuxAssociation>(std::move(carrier), false);
    std::weak_ptr<State> weak = shared_from_this();
    std::weak_ptr<MuxAssociation> wa = assoc;
    assoc->on_new_stream = [weak, wa](std::uint32_t id) {
      auto s = weak.lock();
      auto a = wa.lock();
      if (!s || !a) return;
      std::erase(s->mux_pending, a);
      s->deliver(MuxStreamPc::on_stream(s->backend.loop(), a, id));
    };
    mux_pending.push_back(assoc);
    assoc->bind_carrier();
    assoc->accept(rest);
  }

  void accept_association(std::shared_ptr<sim::Association> a) {
    if (stopped) {
      a->abort();
      return;
    }
    auto session = std::make_shared<SimMsgSession>();
    session->assoc = std::move(a);
    std::weak_ptr<State> weak = shared_from_this();
    std::weak_ptr<SimMsgSession> ws = session;
    session->on_new_stream = [weak, ws](std::uint32_t id) {
      auto s = weak.lock();
      auto sess = ws.lock();
      if (!s || !sess) return;
      std::erase(s->msg_pending, sess);
      s->deliver(SimMsgPc::on_stream(s->backend.loop(), sess, id));
    };
    SimMsgPc::bind_session(session, nullptr, [weak, ws](const Error*) {
      auto s = weak.lock();
      auto sess = ws.lock();
      if (s && sess) std::erase(s->msg_pending, sess);
    });
    msg_pending.push_back(std::move(session));
  }

  void on_datagram(const Endpoint& from, ByteView d) {
    if (auto it = udp_peers.find(from); it != udp_peers.end()) {
      if (auto pc = it->second.lock()) {
        pc->datagram(d);
        return;
      }
      udp_peers.erase(it);
    }
    if (stopped) return;
    std::weak_ptr<State> weak = shared_from_this();
    auto pc = std::make_shared<UdpPc>(backend.loop(), udp, from, [weak, from] {
      if (auto s = weak.lock()) s->udp_peers.erase(from);
    });
    udp_peers[from] = pc;
    pc->datagram(d);
    deliver(pc);
  }

  void stop() {
    if (stopped) return;
    stopped = true;
    if (stream_acceptor) stream_acceptor->close();
    if (assoc_acceptor) assoc_acceptor->close();
    for (auto& [key, sn] : sniffing) {
      backend.loop().cancel(sn.timer);
      sn.carrier->abort();
    }
    sniffing.clear();
    for (auto& a : mux_pending) a->goaway();
    mux_pending.clear();
    for (auto& sess : msg_pending) sess->assoc->close();
    msg_pending.clear();
    // The UDP socket stays open while connections accepted on it live.
    if (udp && udp_peers.empty()) udp->close();
  }
};

ProtocolListener::ProtocolListener(NetworkBackend& backend, std::uint16_t port, const std::vector<ProtocolId>& protocols,
                                   AcceptHandler on_accept, AdapterOptions opts)
    : port_(port), state_(std::make_shared<State>(backend, std::move(on_accept), opts)) {
  auto& s = *state_;
  s.want_mux = contains(protocols, ProtocolId::msgmux);
  if (contains(protocols, ProtocolId::tcp)) {
    s.stream_label = ProtocolId::tcp;
  } else if (contains(protocols, ProtocolId::sim_stream)) {
    s.stream_label = ProtocolId::sim_stream;
  }
  const bool sim = dynamic_cast<sim::Host*>(&backend) != nullptr;
  if ((contains(protocols, ProtocolId::sim_stream) || contains(protocols, ProtocolId::sim_msg)) && !sim) {
    throw Error(Errc::unknown_protocol, "simulated protocols need a simulated host");
  }
  std::weak_ptr<State> weak = state_;
  if (s.want_mux || s.stream_label) {
    s.stream_acceptor = backend.listen_stream(port, [weak](std::shared_ptr<StreamCarrier> c) {
      if (auto st = weak.lock()) st->accept_stream(std::move(c));
    });
    port_ = s.stream_acceptor->port();
  }
  if (contains(protocols, ProtocolId::sim_msg)) {
    auto& host = dynamic_cast<sim::Host&>(backend);
    s.assoc_acceptor = host.listen_association(port_, [weak](std::shared_ptr<sim::Association> a) {
      if (auto st = weak.lock()) st->accept_association(std::move(a));
    });
    port_ = s.assoc_acceptor->port();
  }
  if (contains(protocols, ProtocolId::udp)) {
    s.udp = backend.open_datagram(port_ != 0 ? std::optional<std::uint16_t>(port_) : std::nullopt);
    s.udp->set_receive_handler([weak](const Endpoint& from, ByteView d) {
      if (auto st = weak.lock()) st->on_datagram(from, d);
    });
    if (port_ == 0) port_ = s.udp->local_port();
  }
}

ProtocolListener::~ProtocolListener() { stop(); }

void ProtocolListener::stop() {
  if (state_) state_->stop();
}

}  // namespace taps
