#include "taps/netsim.hpp"

#include <algorithm>
#include <cmath>

namespace taps::sim {

std::size_t bdp_packets(double rate_bps, double prop_delay_ms, std::size_t packet_bytes) {
  const double bdp_bytes = rate_bps * (2.0 * prop_delay_ms / 1000.0) / 8.0;
  return static_cast<std::size_t>(std::ceil(bdp_bytes / static_cast<double>(packet_bytes)));
}

SimLink::SimLink(LinkConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

double SimLink::uniform() {
  // 53 random bits; independent of the standard library's distributions.
  return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
}

std::size_t SimLink::queued(TimePoint now) {
  while (!service_start_.empty() && service_start_.front() <= now) service_start_.pop_front();
  return service_start_.size();
}

std::optional<TimePoint> SimLink::transmit(std::size_t packet_size_bytes, TimePoint now, bool lossless) {
  const std::size_t waiting = queued(now);
  if (!lossless) {
    if (cfg_.queue_capacity_packets != 0 && waiting >= cfg_.queue_capacity_packets) {
      ++drops_;
      return std::nullopt;
    }
    if (cfg_.loss_rate > 0.0 && uniform() < cfg_.loss_rate) {
      ++drops_;
      return std::nullopt;
    }
  }
  const auto serialization = Duration(static_cast<std::int64_t>(
      std::llround(static_cast<double>(packet_size_bytes) * 8.0 * 1e9 / cfg_.rate_bps)));
  const auto propagation = Duration(static_cast<std::int64_t>(std::llround(cfg_.prop_delay_ms * 1e6)));
  const TimePoint start = std::max(now, busy_until_);
  if (start > now) service_start_.push_back(start);
  busy_until_ = start + serialization;
  ++sent_;
  return busy_until_ + propagation;
}

void CongestionController::on_ack(double acked_segments) {
  if (state == State::slow_start) {
    cwnd += acked_segments;
    if (cwnd >= ssthresh) state = State::avoidance;
  } else {
    cwnd += acked_segments / cwnd;
  }
}

void CongestionController::on_loss() {
  ssthresh = std::max(cwnd / 2.0, min_window);
  cwnd = ssthresh;
  state = State::avoidance;
}

CongestionController cc_on_ack(CongestionController cc, double acked_segments) {
  cc.on_ack(acked_segments);
  return cc;
}

CongestionController cc_on_loss(CongestionController cc) {
  cc.on_loss();
  return cc;
}

std::size_t Packet::wire_size() const {
  switch (kind) {
    case PacketKind::data: return payload.size() + data_header_bytes;
    case PacketKind::datagram: return payload.size() + 28;
    default: return control_packet_bytes;
  }
}

// ---------------------------------------------------------------------------
// Association

Association::Association(Network& net, Host& host, Transport mode, Endpoint local, Endpoint remote,
                         bool initiator)
    : net_(net),
      host_(host),
      mode_(mode),
      local_(std::move(local)),
      remote_(std::move(remote)),
      initiator_(initiator),
      state_(initiator ? State::syn_sent : State::established),
      next_stream_id_(initiator ? 1u : 2u) {}

Association::~Association() {
  if (rto_timer_) net_.loop().cancel(*rto_timer_);
  if (state_ != State::closed) host_.unregister(mode_, local_.port, remote_);
}

void Association::send_control(PacketKind kind, std::uint32_t stream, std::uint64_t seq, bool ordered) {
  Packet p;
  p.transport = mode_;
  p.kind = kind;
  p.src = local_;
  p.dst = remote_;
  p.stream = stream;
  p.msg_seq = seq;
  p.ordered = ordered;
  p.dscp = dscp_;
  net_.send(std::move(p));
}

void Association::start_connect() { send_control(PacketKind::syn); }

void Association::accept_syn() { send_control(PacketKind::syn_ack); }

Association::StreamState& Association::stream_state(std::uint32_t id) { return streams_[id]; }

std::uint32_t Association::open_stream() {
  if (closing_ || state_ == State::closed) throw Error(Errc::association_closed, "association is closing");
  if (next_stream_id_ > 0x7fffffffu) throw Error(Errc::stream_limit, "stream id space exhausted");
  const std::uint32_t id = next_stream_id_;
  next_stream_id_ += 2;
  streams_[id];
  send_control(PacketKind::stream_open, id);
  return id;
}

void Association::set_stream_handlers(std::uint32_t stream, StreamHandlers h) {
  streams_[stream].handlers = std::move(h);
}

void Association::write(ByteView bytes) {
  if (state_ == State::closed || closing_) throw Error(Errc::carrier_closed, "association closed");
  if (stream_out_pos_ > (1u << 20) && stream_out_pos_ * 2 > stream_out_.size()) {
    stream_out_.erase(stream_out_.begin(), stream_out_.begin() + static_cast<std::ptrdiff_t>(stream_out_pos_));
    stream_out_pos_ = 0;
  }
  append(stream_out_, bytes);
  try_send();
}

void Association::send_message(std::uint32_t stream, Bytes data, const MessageProperties& props) {
  auto it = streams_.find(stream);
  if (state_ == State::closed || closing_ || it == streams_.end() || it->second.out.closing) {
    throw Error(Errc::carrier_closed, "stream " + std::to_string(stream) + " not open");
  }
  auto& out = it->second.out;
  const std::uint64_t seq = props.ordered ? out.next_ssn++ : out.next_useq++;
  out.queue.push_back(OutMessage{props.ordered, props.reliable, seq, std::move(data)});
  try_send();
}

std::size_t Association::stream_backlog(std::uint32_t stream) const {
  auto it = streams_.find(stream);
  if (it == streams_.end()) return 0;
  std::size_t n = 0;
  for (const auto& m : it->second.out.queue) n += m.data.size() - m.next_offset;
  return n;
}

void Association::close_stream(std::uint32_t stream) {
  auto it = streams_.find(stream);
  if (it == streams_.end()) return;
  it->second.out.closing = true;
  closing_streams_.insert(stream);
  check_close_progress();
}

void Association::reset_stream(std::uint32_t stream) {
  if (streams_.erase(stream) == 0) return;
  closing_streams_.erase(stream);
  dead_streams_.insert(stream);
  if (state_ != State::closed) send_control(PacketKind::stream_reset, stream);
}

void Association::close() {
  if (state_ == State::closed) return;
  if (state_ == State::syn_sent) {
    abort();
    return;
  }
  closing_ = true;
  if (mode_ == Transport::message) {
    for (auto& [id, s] : streams_) {
      s.out.closing = true;
      closing_streams_.insert(id);
    }
  }
  check_close_progress();
}

void Association::abort() {
  if (state_ == State::closed) return;
  auto keep = shared_from_this();
  send_control(PacketKind::rst);
  finish(nullptr, false);
}

void Association::finish(const Error* err, bool notify) {
  if (state_ == State::closed) return;
  state_ = State::closed;
  if (rto_timer_) {
    net_.loop().cancel(*rto_timer_);
    rto_timer_.reset();
  }
  in_flight_.clear();
  retransmit_.clear();
  host_.unregister(mode_, local_.port, remote_);
  auto streams = std::move(streams_);
  streams_.clear();
  if (!notify) return;
  for (auto& [id, s] : streams) {
    if (s.handlers.on_closed) s.handlers.on_closed(err);
  }
  if (h_.on_closed) {
    auto cb = h_.on_closed;
    cb(err);
  }
}

void Association::on_packet(const Packet& p) {
  auto keep = shared_from_this();
  if (state_ == State::closed) return;
  switch (p.kind) {
    case PacketKind::syn_ack:
      if (state_ == State::syn_sent) {
        state_ = State::established;
        if (h_.on_established) h_.on_established();
        try_send();
      }
      break;
    case PacketKind::data:
      if (state_ == State::syn_sent) break;
      on_data(p);
      break;
    case PacketKind::ack:
      on_ack(p);
      break;
    case PacketKind::fin:
      finish(nullptr, true);
      break;
    case PacketKind::rst: {
      Error e(state_ == State::syn_sent ? Errc::connection_refused : Errc::connection_reset,
              "reset by " + remote_.to_string());
      finish(&e, true);
      break;
    }
    case PacketKind::stream_open:
      if (!streams_.count(p.stream) && !dead_streams_.count(p.stream)) {
        streams_[p.stream];
        if (h_.on_new_stream) h_.on_new_stream(p.stream);
      }
      break;
    case PacketKind::stream_close: {
      auto it = streams_.find(p.stream);
      if (it == streams_.end()) break;
      auto cb = it->second.handlers.on_closed;
      streams_.erase(it);
      closing_streams_.erase(p.stream);
      dead_streams_.insert(p.stream);
      if (cb) cb(nullptr);
      break;
    }
    case PacketKind::stream_reset: {
      auto it = streams_.find(p.stream);
      if (it == streams_.end()) break;
      auto cb = it->second.handlers.on_closed;
      streams_.erase(it);
      closing_streams_.erase(p.stream);
      dead_streams_.insert(p.stream);
      Error e(Errc::connection_reset, "stream " + std::to_string(p.stream) + " reset by peer");
      if (cb) cb(&e);
      break;
    }
    case PacketKind::abandon: {
      auto it = streams_.find(p.stream);
      if (it == streams_.end()) break;
      auto& in = it->second.in;
      if (p.ordered) {
        in.ordered.erase(p.msg_seq);
        if (p.msg_seq >= in.next_ssn) in.skipped.insert(p.msg_seq);
        drain_ordered(p.stream);
      } else {
        in.unordered.erase(p.msg_seq);
        in.unordered_done.insert(p.msg_seq);
      }
      break;
    }
    case PacketKind::syn:
    case PacketKind::datagram:
      break;
  }
}

void Association::on_data(const Packet& p) {
  {
    Packet ack;
    ack.transport = mode_;
    ack.kind = PacketKind::ack;
    ack.src = local_;
    ack.dst = remote_;
    ack.pn = p.pn;
    ack.dscp = dscp_;
    net_.send(std::move(ack));
  }
  if (mode_ == Transport::stream) {
    const std::uint64_t end = p.offset + p.payload.size();
    if (end <= stream_deliver_offset_) return;
    stream_ooo_.try_emplace(p.offset, p.payload);
    while (!stream_ooo_.empty() && stream_ooo_.begin()->first <= stream_deliver_offset_) {
      auto node = stream_ooo_.extract(stream_ooo_.begin());
      const std::uint64_t off = node.key();
      const Bytes& data = node.mapped();
      if (off + data.size() <= stream_deliver_offset_) continue;
      const std::size_t skip = static_cast<std::size_t>(stream_deliver_offset_ - off);
      stream_deliver_offset_ = off + data.size();
      if (h_.on_bytes) h_.on_bytes(ByteView(data).subspan(skip));
      if (state_ == State::closed) return;
    }
    return;
  }

  if (dead_streams_.count(p.stream)) return;
  auto sit = streams_.find(p.stream);
  if (sit == streams_.end()) {
    sit = streams_.try_emplace(p.stream).first;
    if (h_.on_new_stream) {
      h_.on_new_stream(p.stream);
      if (state_ == State::closed) return;
      sit = streams_.find(p.stream);
      if (sit == streams_.end()) return;
    }
  }
  auto& in = sit->second.in;
  Reassembly* r = nullptr;
  if (p.ordered) {
    if (p.msg_seq < in.next_ssn || in.ready.count(p.msg_seq) || in.skipped.count(p.msg_seq)) return;
    r = &in.ordered[p.msg_seq];
  } else {
    if (in.unordered_done.count(p.msg_seq)) return;
    r = &in.unordered[p.msg_seq];
  }
  r->total = p.msg_len;
  r->reliable = p.reliable;
  if (r->parts.try_emplace(p.offset, p.payload).second) r->have += p.payload.size();
  if (r->have < r->total) return;
  Reassembly done = std::move(*r);
  if (p.ordered) {
    in.ordered.erase(p.msg_seq);
  } else {
    in.unordered.erase(p.msg_seq);
  }
  on_stream_message_complete(p.stream, p.ordered, p.msg_seq, std::move(done));
}

void Association::on_stream_message_complete(std::uint32_t stream, bool ordered, std::uint64_t seq,
                                             Reassembly r) {
  Bytes data;
  data.reserve(static_cast<std::size_t>(r.total));
  for (auto& [off, part] : r.parts) append(data, part);
  auto& in = streams_[stream].in;
  if (!ordered) {
    in.unordered_done.insert(seq);
    deliver_message(stream, std::move(data), false);
    return;
  }
  in.ready.emplace(seq, std::move(data));
  drain_ordered(stream);
}

void Association::drain_ordered(std::uint32_t stream) {
  for (;;) {
    auto it = streams_.find(stream);
    if (it == streams_.end() || state_ == State::closed) return;
    auto& in = it->second.in;
    if (auto r = in.ready.find(in.next_ssn); r != in.ready.end()) {
      Bytes data = std::move(r->second);
      in.ready.erase(r);
      ++in.next_ssn;
      deliver_message(stream, std::move(data), true);
    } else if (in.skipped.erase(in.next_ssn) != 0) {
      ++in.next_ssn;
    } else {
      return;
    }
  }
}

void Association::deliver_message(std::uint32_t stream, Bytes data, bool ordered) {
  auto it = streams_.find(stream);
  if (it == streams_.end() || !it->second.handlers.on_message) return;
  auto cb = it->second.handlers.on_message;
  MessageProperties props;
  props.ordered = ordered;
  cb(data, props);
}

void Association::on_ack(const Packet& p) {
  auto it = in_flight_.find(p.pn);
  if (it == in_flight_.end()) return;
  const TimePoint now = net_.loop().now();
  const Duration sample = now - it->second.sent_at;
  srtt_ = srtt_ ? (*srtt_ * 7 + sample) / 8 : sample;
  backoff_ = 1;
  if (it->second.sent_at > recovery_start_) cc_.on_ack(1.0);
  in_flight_.erase(it);
  if (!any_acked_ || p.pn > largest_acked_) {
    largest_acked_ = p.pn;
    any_acked_ = true;
  }
  while (!in_flight_.empty() && in_flight_.begin()->first + 3 <= largest_acked_) {
    declare_lost(in_flight_.begin());
  }
  if (rto_timer_) {
    net_.loop().cancel(*rto_timer_);
    rto_timer_.reset();
  }
  try_send();
  arm_rto();
  check_close_progress();
}

void Association::congestion_event(TimePoint sent_at) {
  if (sent_at <= recovery_start_) return;
  cc_.on_loss();
  recovery_start_ = net_.loop().now();
}

void Association::declare_lost(std::map<std::uint64_t, InFlight>::iterator it) {
  Segment seg = std::move(it->second.seg);
  const TimePoint sent_at = it->second.sent_at;
  in_flight_.erase(it);
  congestion_event(sent_at);
  if (mode_ == Transport::stream) {
    retransmit_.push_back(std::move(seg));
    return;
  }
  auto sit = streams_.find(seg.stream);
  if (sit == streams_.end()) return;
  if (seg.reliable) {
    retransmit_.push_back(std::move(seg));
    return;
  }
  auto& out = sit->second.out;
  if (!out.abandoned.insert({seg.ordered, seg.msg_seq}).second) return;
  // Drop the unsent remainder and any queued retransmissions of the message.
  if (!out.queue.empty() && out.queue.front().ordered == seg.ordered && out.queue.front().seq == seg.msg_seq &&
      out.queue.front().next_offset > 0) {
    out.queue.pop_front();
  }
  std::erase_if(retransmit_, [&](const Segment& s) {
    return s.stream == seg.stream && s.ordered == seg.ordered && s.msg_seq == seg.msg_seq;
  });
  send_control(PacketKind::abandon, seg.stream, seg.msg_seq, seg.ordered);
}

Duration Association::rto() const {
  const Duration base = srtt_ ? *srtt_ * 2 : Duration(std::chrono::seconds(1));
  return std::max(base, Duration(std::chrono::milliseconds(1))) * backoff_;
}

void Association::arm_rto() {
  if (rto_timer_ || in_flight_.empty() || state_ == State::closed) return;
  TimePoint earliest = TimePoint::max();
  for (const auto& [pn, f] : in_flight_) earliest = std::min(earliest, f.sent_at);
  const TimePoint now = net_.loop().now();
  const TimePoint deadline = earliest + rto();
  std::weak_ptr<Association> weak = weak_from_this();
  rto_timer_ = net_.loop().call_after(deadline > now ? deadline - now : Duration(0), [weak] {
    if (auto self = weak.lock()) {
      self->rto_timer_.reset();
      self->on_rto();
    }
  });
}

void Association::on_rto() {
  if (state_ == State::closed || in_flight_.empty()) return;
  auto keep = shared_from_this();
  while (!in_flight_.empty()) declare_lost(in_flight_.begin());
  backoff_ = std::min(backoff_ * 2, 64);
  try_send();
  arm_rto();
}

std::optional<Association::Segment> Association::next_new_segment() {
  const std::size_t mss = net_.max_segment_payload;
  if (mode_ == Transport::stream) {
    const std::size_t pending = pending_bytes();
    if (pending == 0) return std::nullopt;
    const std::size_t n = std::min(mss, pending);
    Segment seg;
    seg.offset = stream_next_offset_;
    seg.data.assign(stream_out_.begin() + static_cast<std::ptrdiff_t>(stream_out_pos_),
                    stream_out_.begin() + static_cast<std::ptrdiff_t>(stream_out_pos_ + n));
    seg.segment_index = next_segment_index_++;
    stream_out_pos_ += n;
    stream_next_offset_ += n;
    if (stream_out_pos_ == stream_out_.size()) {
      stream_out_.clear();
      stream_out_pos_ = 0;
    }
    return seg;
  }

  if (streams_.empty()) return std::nullopt;
  auto pick = streams_.upper_bound(rr_last_);
  for (std::size_t i = 0; i < streams_.size(); ++i, ++pick) {
    if (pick == streams_.end()) pick = streams_.begin();
    auto& out = pick->second.out;
    if (out.queue.empty()) continue;
    auto& m = out.queue.front();
    const std::size_t n = std::min(mss, m.data.size() - m.next_offset);
    Segment seg;
    seg.stream = pick->first;
    seg.ordered = m.ordered;
    seg.reliable = m.reliable;
    seg.msg_seq = m.seq;
    seg.msg_len = m.data.size();
    seg.offset = m.next_offset;
    seg.end = m.next_offset + n == m.data.size();
    seg.data.assign(m.data.begin() + static_cast<std::ptrdiff_t>(m.next_offset),
                    m.data.begin() + static_cast<std::ptrdiff_t>(m.next_offset + n));
    seg.segment_index = next_segment_index_++;
    m.next_offset += n;
    if (seg.end) out.queue.pop_front();
    rr_last_ = pick->first;
    return seg;
  }
  return std::nullopt;
}

void Association::transmit(Segment seg) {
  ++seg.transmissions;
  Packet p;
  p.transport = mode_;
  p.kind = PacketKind::data;
  p.src = local_;
  p.dst = remote_;
  p.pn = next_pn_++;
  p.stream = seg.stream;
  p.ordered = seg.ordered;
  p.reliable = seg.reliable;
  p.msg_seq = seg.msg_seq;
  p.msg_len = seg.msg_len;
  p.offset = seg.offset;
  p.end = seg.end;
  p.segment_index = seg.segment_index;
  p.transmission = seg.transmissions;
  p.dscp = dscp_;
  p.payload = seg.data;
  const std::uint64_t pn = p.pn;
  in_flight_.emplace(pn, InFlight{std::move(seg), net_.loop().now()});
  ++data_packets_sent_;
  net_.send(std::move(p));
}

void Association::try_send() {
  if (state_ != State::established) return;
  bool sent_new = false;
  while (static_cast<double>(in_flight_.size()) + 1.0 <= cc_.cwnd) {
    if (!retransmit_.empty()) {
      Segment seg = std::move(retransmit_.front());
      retransmit_.pop_front();
      if (mode_ == Transport::message && !streams_.count(seg.stream)) continue;
      ++retransmissions_;
      transmit(std::move(seg));
      continue;
    }
    auto seg = next_new_segment();
    if (!seg) break;
    transmit(std::move(*seg));
    sent_new = true;
  }
  arm_rto();
  if (sent_new) notify_writable();
}

void Association::notify_writable() {
  if (h_.on_writable && state_ == State::established) {
    auto cb = h_.on_writable;
    cb();
  }
}

bool Association::stream_all_acked(std::uint32_t stream) const {
  auto it = streams_.find(stream);
  if (it != streams_.end() && !it->second.out.queue.empty()) return false;
  for (const auto& [pn, f] : in_flight_) {
    if (f.seg.stream == stream) return false;
  }
  for (const auto& s : retransmit_) {
    if (s.stream == stream) return false;
  }
  return true;
}

bool Association::all_acked() const {
  if (!in_flight_.empty() || !retransmit_.empty()) return false;
  if (mode_ == Transport::stream) return pending_bytes() == 0;
  for (const auto& [id, s] : streams_) {
    if (!s.out.queue.empty()) return false;
  }
  return true;
}

void Association::check_close_progress() {
  if (state_ != State::established) return;
  if (mode_ == Transport::message) {
    for (auto it = closing_streams_.begin(); it != closing_streams_.end();) {
      const std::uint32_t id = *it;
      if (!stream_all_acked(id)) {
        ++it;
        continue;
      }
      it = closing_streams_.erase(it);
      streams_.erase(id);
      dead_streams_.insert(id);
      send_control(PacketKind::stream_close, id);
    }
  }
  if (closing_ && !fin_sent_ && all_acked()) {
    fin_sent_ = true;
    auto keep = shared_from_this();
    send_control(PacketKind::fin);
    finish(nullptr, false);
  }
}

// ---------------------------------------------------------------------------
// Carriers over associations

namespace {

class SimStreamCarrier final : public StreamCarrier {
 public:
  explicit SimStreamCarrier(std::shared_ptr<Association> a) : a_(std::move(a)) {}
  ~SimStreamCarrier() override {
    if (a_->state() != Association::State::closed) a_->abort();
  }

  void set_handlers(Handlers h) override {
    Association::Handlers ah;
    ah.on_established = h.on_connected;
    ah.on_bytes = h.on_data;
    ah.on_closed = h.on_closed;
    ah.on_writable = h.on_writable;
    a_->set_handlers(std::move(ah));
  }
  void write(ByteView data) override { a_->write(data); }
  std::size_t pending_bytes() const override { return a_->pending_bytes(); }
  void close() override { a_->close(); }
  void abort() override { a_->abort(); }
  void set_dscp(std::uint8_t dscp) override { a_->set_dscp(dscp); }
  Endpoint remote() const override { return a_->remote(); }
  bool is_open() const override { return a_->state() != Association::State::closed; }

 private:
  std::shared_ptr<Association> a_;
};

class SimBinding final : public StreamAcceptor {
 public:
  SimBinding(Host& host, Transport t, std::uint16_t port) : host_(host), t_(t), port_(port) {}
  ~SimBinding() override { close(); }
  std::uint16_t port() const override { return port_; }
  void close() override {
    if (open_) host_.unbind(t_, port_);
    open_ = false;
  }

 private:
  Host& host_;
  Transport t_;
  std::uint16_t port_;
  bool open_ = true;
};

class SimDatagramSocket final : public DatagramSocket, public std::enable_shared_from_this<SimDatagramSocket> {
 public:
  SimDatagramSocket(Host& host, std::uint16_t port) : host_(host), port_(port) {}
  ~SimDatagramSocket() override { close(); }

  void bind() {
    std::weak_ptr<SimDatagramSocket> weak = weak_from_this();
    host_.bind_datagram(port_, [weak](const Packet& p) {
      auto self = weak.lock();
      if (self && self->handler_) {
        auto cb = self->handler_;
        cb(p.src, p.payload);
      }
    });
  }
  void set_receive_handler(ReceiveHandler h) override { handler_ = std::move(h); }
  void send_to(const Endpoint& to, ByteView data, std::uint8_t dscp) override {
    if (closed_) throw Error(Errc::carrier_closed, "socket closed");
    if (data.size() > 65507) throw Error(Errc::message_too_large, "datagram too large");
    Packet p;
    p.transport = Transport::datagram;
    p.kind = PacketKind::datagram;
    p.src = Endpoint{host_.address(), port_};
    p.dst = to;
    p.dscp = dscp;
    p.payload.assign(data.begin(), data.end());
    host_.network().send(std::move(p));
  }
  std::uint16_t local_port() const override { return port_; }
  void close() override {
    if (!closed_) host_.unbind(Transport::datagram, port_);
    closed_ = true;
  }

 private:
  Host& host_;
  std::uint16_t port_;
  ReceiveHandler handler_;
  bool closed_ = false;
};

}  // namespace

// ---------------------------------------------------------------------------
// Host

Host::Host(Network& net, std::string address) : net_(net), address_(std::move(address)) {}

EventLoop& Host::loop() { return net_.loop(); }

std::vector<std::string> Host::resolve(const std::string& host) { return net_.resolve(host); }

std::uint16_t Host::ephemeral_port() {
  for (int i = 0; i < 16384; ++i) {
    const std::uint16_t port = next_ephemeral_;
    next_ephemeral_ = next_ephemeral_ == 65535 ? 49152 : static_cast<std::uint16_t>(next_ephemeral_ + 1);
    if (!bound_.count({Transport::stream, port}) && !bound_.count({Transport::message, port}) &&
        !bound_.count({Transport::datagram, port})) {
      return port;
    }
  }
  throw Error(Errc::bind_failure, "no ephemeral ports left");
}

std::shared_ptr<Association> Host::new_association(Transport t, const Endpoint& remote, bool initiator,
                                                   std::uint16_t local_port) {
  auto a = std::make_shared<Association>(net_, *this, t, Endpoint{address_, local_port}, remote, initiator);
  associations_[{t, local_port, remote}] = a;
  return a;
}

std::shared_ptr<StreamCarrier> Host::connect_stream(const Endpoint& remote) {
  auto a = new_association(Transport::stream, remote, true, ephemeral_port());
  auto carrier = std::make_shared<SimStreamCarrier>(a);
  a->start_connect();
  return carrier;
}

std::shared_ptr<Association> Host::connect_association(const Endpoint& remote) {
  auto a = new_association(Transport::message, remote, true, ephemeral_port());
  a->start_connect();
  return a;
}

void Host::bind(Transport t, std::uint16_t port, std::function<void(const Packet&)> fn) {
  if (!bound_.try_emplace({t, port}, std::move(fn)).second) {
    throw Error(Errc::bind_failure, "port " + std::to_string(port) + " already bound on " + address_);
  }
}

void Host::bind_datagram(std::uint16_t port, std::function<void(const Packet&)> fn) {
  bind(Transport::datagram, port, std::move(fn));
}

std::shared_ptr<StreamAcceptor> Host::listen_stream(
    std::uint16_t port, std::function<void(std::shared_ptr<StreamCarrier>)> on_accept) {
  if (port == 0) port = ephemeral_port();
  bind(Transport::stream, port, [this, port, on_accept](const Packet& syn) {
    auto a = new_association(Transport::stream, syn.src, false, port);
    a->accept_syn();
    on_accept(std::make_shared<SimStreamCarrier>(a));
  });
  return std::make_shared<SimBinding>(*this, Transport::stream, port);
}

std::shared_ptr<StreamAcceptor> Host::listen_association(
    std::uint16_t port, std::function<void(std::shared_ptr<Association>)> on_accept) {
  if (port == 0) port = ephemeral_port();
  bind(Transport::message, port, [this, port, on_accept](const Packet& syn) {
    auto a = new_association(Transport::message, syn.src, false, port);
    a->accept_syn();
    on_accept(a);
  });
  return std::make_shared<SimBinding>(*this, Transport::message, port);
}

std::shared_ptr<DatagramSocket> Host::open_datagram(std::optional<std::uint16_t> port) {
  auto s = std::make_shared<SimDatagramSocket>(*this, port ? *port : ephemeral_port());
  s->bind();
  return s;
}

void Host::unregister(Transport t, std::uint16_t local_port, const Endpoint& remote) {
  associations_.erase({t, local_port, remote});
}

void Host::unbind(Transport t, std::uint16_t port) { bound_.erase({t, port}); }

void Host::on_packet(const Packet& p) {
  if (p.transport == Transport::datagram) {
    if (auto it = bound_.find({Transport::datagram, p.dst.port}); it != bound_.end()) {
      auto fn = it->second;
      fn(p);
    }
    return;
  }
  if (auto it = associations_.find({p.transport, p.dst.port, p.src}); it != associations_.end()) {
    if (auto a = it->second.lock()) {
      a->on_packet(p);
      return;
    }
    associations_.erase(it);
  }
  if (p.kind != PacketKind::syn) return;
  if (auto it = bound_.find({p.transport, p.dst.port}); it != bound_.end()) {
    auto fn = it->second;
    fn(p);
    return;
  }
  Packet rst;
  rst.transport = p.transport;
  rst.kind = PacketKind::rst;
  rst.src = p.dst;
  rst.dst = p.src;
  net_.send(std::move(rst));
}

// ---------------------------------------------------------------------------
// Network

Network::Network(SimLoop& loop, std::uint64_t seed, LinkConfig default_link)
    : loop_(loop), seed_(seed), default_link_(default_link) {}

Host& Network::add_host(const std::string& address) {
  auto& slot = hosts_[address];
  if (!slot) slot = std::make_unique<Host>(*this, address);
  return *slot;
}

Host& Network::host(const std::string& address) {
  auto it = hosts_.find(address);
  if (it == hosts_.end()) throw Error(Errc::config_error, "unknown host " + address);
  return *it->second;
}

std::vector<std::string> Network::resolve(const std::string& name) const {
  if (hosts_.count(name)) return {name};
  if (auto it = names_.find(name); it != names_.end()) return {it->second};
  return {};
}

void Network::set_link(const std::string& from, const std::string& to, LinkConfig cfg) {
  const std::uint64_t link_seed = seed_ ^ (std::hash<std::string>{}(from + ">" + to) * 0x9e3779b97f4a7c15ull);
  links_[{from, to}] = std::make_unique<SimLink>(cfg, link_seed);
}

void Network::set_path(const std::string& a, const std::string& b, LinkConfig cfg) {
  set_link(a, b, cfg);
  set_link(b, a, cfg);
}

SimLink& Network::link(const std::string& from, const std::string& to) {
  auto it = links_.find({from, to});
  if (it == links_.end()) {
    set_link(from, to, default_link_);
    it = links_.find({from, to});
  }
  return *it->second;
}

void Network::set_blackhole(const std::string& address, bool on) {
  if (on) {
    blackholes_.insert(address);
  } else {
    blackholes_.erase(address);
  }
}

void Network::send(Packet p) {
  const TimePoint now = loop_.now();
  if (on_send_) on_send_(p, now);
  if (drop_filter_ && drop_filter_(p)) return;
  if (blackholes_.count(p.dst.address) || blackholes_.count(p.src.address)) return;
  if (!hosts_.count(p.dst.address)) return;
  const bool lossless = p.kind != PacketKind::data && p.kind != PacketKind::datagram;
  const auto arrival = link(p.src.address, p.dst.address).transmit(p.wire_size(), now, lossless);
  if (!arrival) return;
  auto pkt = std::make_shared<Packet>(std::move(p));
  loop_.call_after(*arrival - now, [this, pkt] {
    auto it = hosts_.find(pkt->dst.address);
    if (it == hosts_.end()) return;
    if (on_arrival_) on_arrival_(*pkt, loop_.now());
    it->second->on_packet(*pkt);
  });
}

}  // namespace taps::sim
