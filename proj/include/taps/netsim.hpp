#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "taps/bytes.hpp"
#include "taps/event_loop.hpp"
#include "taps/network.hpp"
#include "taps/properties.hpp"

/// Deterministic in-process network: links with rate, propagation delay,
/// random loss and a drop-tail queue, plus a packet-level reliable transport
/// used for the simulated stream and message protocols.
namespace taps::sim {

struct LinkConfig {
  double rate_bps = 5'000'000.0;
  double prop_delay_ms = 30.0;
  double loss_rate = 0.0;
  /// Packets that may wait behind the one being serialized; 0 = unbounded.
  std::size_t queue_capacity_packets = 0;
};

/// Queue capacity of one bandwidth-delay product (RTT = 2 x prop delay),
/// rounded up to whole packets of `packet_bytes`.
std::size_t bdp_packets(double rate_bps, double prop_delay_ms, std::size_t packet_bytes = 1500);

/// One direction of a path. FIFO, drop-tail.
class SimLink {
 public:
  SimLink(LinkConfig cfg, std::uint64_t seed);

  /// Arrival time, or nullopt if dropped. `lossless` packets skip random loss
  /// and the queue limit but still take their place in the FIFO.
  std::optional<TimePoint> transmit(std::size_t packet_size_bytes, TimePoint now, bool lossless = false);
  std::size_t queued(TimePoint now);

  const LinkConfig& config() const noexcept { return cfg_; }
  std::uint64_t drops() const noexcept { return drops_; }
  std::uint64_t sent() const noexcept { return sent_; }

 private:
  double uniform();

  LinkConfig cfg_;
  std::mt19937_64 rng_;
  TimePoint busy_until_{0};
  std::deque<TimePoint> service_start_;  // of packets not yet in service
  std::uint64_t drops_ = 0;
  std::uint64_t sent_ = 0;
};

/// Slow start + AIMD window in segments.
struct CongestionController {
  enum class State { slow_start, avoidance };
  static constexpr std::uint32_t mss_bytes = 1448;
  static constexpr double initial_window = 10.0;
  static constexpr double min_window = 2.0;

  double cwnd = initial_window;
  double ssthresh = 1e9;
  State state = State::slow_start;

  void on_ack(double acked_segments);
  void on_loss();
};

CongestionController cc_on_ack(CongestionController cc, double acked_segments);
CongestionController cc_on_loss(CongestionController cc);

enum class Transport : std::uint8_t { stream, message, datagram };

enum class PacketKind : std::uint8_t {
  syn,
  syn_ack,
  data,
  ack,
  fin,
  rst,
  stream_open,
  stream_close,
  stream_reset,
  abandon,
  datagram,
};

inline constexpr std::size_t data_header_bytes = 52;
inline constexpr std::size_t control_packet_bytes = 40;

struct Packet {
  Transport transport = Transport::stream;
  PacketKind kind = PacketKind::data;
  Endpoint src;
  Endpoint dst;
  std::uint64_t pn = 0;  // data: packet number; ack: acknowledged packet number
  std::uint32_t stream = 0;
  bool ordered = true;
  bool reliable = true;
  std::uint64_t msg_seq = 0;
  std::uint64_t msg_len = 0;
  std::uint64_t offset = 0;
  bool end = false;
  /// Index of the data segment among all segments this sender created;
  /// retransmissions keep it.
  std::uint64_t segment_index = 0;
  int transmission = 1;
  std::uint8_t dscp = 0;
  Bytes payload;

  std::size_t wire_size() const;
};

class Network;
class Host;

/// One endpoint of a simulated reliable transport connection. In stream
/// mode it carries one byte stream with in-order delivery; in message mode it
/// carries many streams of messages sharing one congestion controller.
class Association : public std::enable_shared_from_this<Association> {
 public:
  enum class State { syn_sent, established, closed };

  struct Handlers {
    std::function<void()> on_established;
    /// Stream mode: in-order bytes.
    std::function<void(ByteView)> on_bytes;
    /// nullptr for an orderly close by the peer.
    std::function<void(const Error*)> on_closed;
    std::function<void()> on_writable;
    /// Message mode: peer opened a stream.
    std::function<void(std::uint32_t stream)> on_new_stream;
  };
  struct StreamHandlers {
    std::function<void(ByteView message, const MessageProperties& props)> on_message;
    std::function<void(const Error*)> on_closed;
  };

  Association(Network& net, Host& host, Transport mode, Endpoint local, Endpoint remote, bool initiator);
  ~Association();

  Transport mode() const noexcept { return mode_; }
  State state() const noexcept { return state_; }
  bool initiator() const noexcept { return initiator_; }
  const Endpoint& local() const noexcept { return local_; }
  const Endpoint& remote() const noexcept { return remote_; }
  void set_handlers(Handlers h) { h_ = std::move(h); }

  // Stream mode.
  void write(ByteView bytes);
  std::size_t pending_bytes() const noexcept { return stream_out_.size() - stream_out_pos_; }

  // Message mode.
  /// Throws Error(association_closed) once closing.
  std::uint32_t open_stream();
  void set_stream_handlers(std::uint32_t stream, StreamHandlers h);
  void send_message(std::uint32_t stream, Bytes data, const MessageProperties& props);
  std::size_t stream_backlog(std::uint32_t stream) const;
  void close_stream(std::uint32_t stream);
  void reset_stream(std::uint32_t stream);
  std::size_t open_stream_count() const noexcept { return streams_.size(); }

  /// Orderly close once all data is acknowledged.
  void close();
  void abort();
  void set_dscp(std::uint8_t dscp) noexcept { dscp_ = dscp; }

  const CongestionController& cc() const noexcept { return cc_; }
  std::uint64_t data_packets_sent() const noexcept { return data_packets_sent_; }
  std::uint64_t retransmissions() const noexcept { return retransmissions_; }

  // Internal: called by Host routing / Network.
  void start_connect();
  void accept_syn();
  void on_packet(const Packet& p);

 private:
  struct Segment {
    std::uint32_t stream = 0;
    bool ordered = true;
    bool reliable = true;
    std::uint64_t msg_seq = 0;
    std::uint64_t msg_len = 0;
    std::uint64_t offset = 0;
    bool end = false;
    std::uint64_t segment_index = 0;
    int transmissions = 0;
    Bytes data;
  };
  struct InFlight {
    Segment seg;
    TimePoint sent_at;
  };
  struct OutMessage {
    bool ordered;
    bool reliable;
    std::uint64_t seq;
    Bytes data;
    std::size_t next_offset = 0;
  };
  struct OutStream {
    std::deque<OutMessage> queue;
    std::uint64_t next_ssn = 0;
    std::uint64_t next_useq = 0;
    bool closing = false;
    bool reset = false;
    std::set<std::pair<bool, std::uint64_t>> abandoned;
  };
  struct Reassembly {
    std::map<std::uint64_t, Bytes> parts;
    std::uint64_t total = 0;
    std::uint64_t have = 0;
    bool reliable = true;
  };
  struct InStream {
    std::uint64_t next_ssn = 0;
    std::map<std::uint64_t, Reassembly> ordered;
    std::map<std::uint64_t, Bytes> ready;
    std::set<std::uint64_t> skipped;
    std::map<std::uint64_t, Reassembly> unordered;
    std::set<std::uint64_t> unordered_done;
  };
  struct StreamState {
    OutStream out;
    InStream in;
    StreamHandlers handlers;
    bool peer_closed = false;
  };

  void send_control(PacketKind kind, std::uint32_t stream = 0, std::uint64_t seq = 0, bool ordered = true);
  void try_send();
  std::optional<Segment> next_new_segment();
  void transmit(Segment seg);
  void on_ack(const Packet& p);
  void on_data(const Packet& p);
  void declare_lost(std::map<std::uint64_t, InFlight>::iterator it);
  void congestion_event(TimePoint sent_at);
  void arm_rto();
  void on_rto();
  Duration rto() const;
  void deliver_message(std::uint32_t stream, Bytes data, bool ordered);
  void on_stream_message_complete(std::uint32_t stream, bool ordered, std::uint64_t seq, Reassembly r);
  void drain_ordered(std::uint32_t stream);
  bool all_acked() const;
  bool stream_all_acked(std::uint32_t stream) const;
  void check_close_progress();
  void finish(const Error* err, bool notify);
  void notify_writable();
  StreamState& stream_state(std::uint32_t id);

  Network& net_;
  Host& host_;
  Transport mode_;
  Endpoint local_;
  Endpoint remote_;
  bool initiator_;
  State state_;
  Handlers h_;
  std::uint8_t dscp_ = 0;

  CongestionController cc_;
  std::optional<Duration> srtt_;
  int backoff_ = 1;
  std::optional<TimerId> rto_timer_;
  TimePoint recovery_start_ = TimePoint::min();
  std::uint64_t next_pn_ = 0;
  std::uint64_t largest_acked_ = 0;
  bool any_acked_ = false;
  std::map<std::uint64_t, InFlight> in_flight_;
  std::deque<Segment> retransmit_;
  std::uint64_t next_segment_index_ = 0;
  std::uint64_t data_packets_sent_ = 0;
  std::uint64_t retransmissions_ = 0;

  // stream mode
  Bytes stream_out_;
  std::size_t stream_out_pos_ = 0;
  std::uint64_t stream_next_offset_ = 0;
  std::map<std::uint64_t, Bytes> stream_ooo_;
  std::uint64_t stream_deliver_offset_ = 0;

  // message mode
  std::map<std::uint32_t, StreamState> streams_;
  std::uint32_t next_stream_id_;
  std::uint32_t rr_last_ = 0;
  std::set<std::uint32_t> closing_streams_;
  std::set<std::uint32_t> dead_streams_;  // closed or reset; late data is ignored

  bool closing_ = false;
  bool fin_sent_ = false;
};

/// A simulated host; implements NetworkBackend for the transport system
/// running on it.
class Host final : public NetworkBackend {
 public:
  Host(Network& net, std::string address);

  const std::string& address() const noexcept { return address_; }

  EventLoop& loop() override;
  std::vector<std::string> resolve(const std::string& host) override;
  std::shared_ptr<StreamCarrier> connect_stream(const Endpoint& remote) override;
  std::shared_ptr<StreamAcceptor> listen_stream(
      std::uint16_t port, std::function<void(std::shared_ptr<StreamCarrier>)> on_accept) override;
  std::shared_ptr<DatagramSocket> open_datagram(std::optional<std::uint16_t> port) override;

  /// Message-mode associations (the SIM_MSG protocol).
  std::shared_ptr<Association> connect_association(const Endpoint& remote);
  /// Returns a handle; dropping or closing it unbinds. Throws Error(bind_failure).
  std::shared_ptr<StreamAcceptor> listen_association(
      std::uint16_t port, std::function<void(std::shared_ptr<Association>)> on_accept);

  // Internal routing.
  void on_packet(const Packet& p);
  void unregister(Transport t, std::uint16_t local_port, const Endpoint& remote);
  void unbind(Transport t, std::uint16_t port);
  void bind(Transport t, std::uint16_t port, std::function<void(const Packet&)> fn);
  void bind_datagram(std::uint16_t port, std::function<void(const Packet&)> fn);
  Network& network() noexcept { return net_; }

 private:
  friend class Association;
  std::uint16_t ephemeral_port();
  std::shared_ptr<Association> new_association(Transport t, const Endpoint& remote, bool initiator,
                                               std::uint16_t local_port);

  Network& net_;
  std::string address_;
  std::uint16_t next_ephemeral_ = 49152;
  std::map<std::tuple<Transport, std::uint16_t, Endpoint>, std::weak_ptr<Association>> associations_;
  std::map<std::pair<Transport, std::uint16_t>, std::function<void(const Packet&)>> bound_;
};

class Network {
 public:
  using PacketFilter = std::function<bool(const Packet&)>;
  using PacketObserver = std::function<void(const Packet&, TimePoint)>;

  Network(SimLoop& loop, std::uint64_t seed, LinkConfig default_link = {});
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  SimLoop& loop() noexcept { return loop_; }
  Host& add_host(const std::string& address);
  Host& host(const std::string& address);
  bool has_host(const std::string& address) const { return hosts_.count(address) != 0; }
  void add_name(const std::string& name, const std::string& address) { names_[name] = address; }
  std::vector<std::string> resolve(const std::string& name) const;

  /// Configures one direction; set_path configures both.
  void set_link(const std::string& from, const std::string& to, LinkConfig cfg);
  void set_path(const std::string& a, const std::string& b, LinkConfig cfg);
  SimLink& link(const std::string& from, const std::string& to);

  void set_blackhole(const std::string& address, bool on);
  /// Returning true drops the packet before it reaches the link.
  void set_drop_filter(PacketFilter f) { drop_filter_ = std::move(f); }
  void set_arrival_observer(PacketObserver f) { on_arrival_ = std::move(f); }
  void set_send_observer(PacketObserver f) { on_send_ = std::move(f); }

  std::size_t max_segment_payload = CongestionController::mss_bytes;

  void send(Packet p);

 private:
  SimLoop& loop_;
  std::uint64_t seed_;
  LinkConfig default_link_;
  std::map<std::string, std::unique_ptr<Host>> hosts_;
  std::map<std::string, std::string> names_;
  std::map<std::pair<std::string, std::string>, std::unique_ptr<SimLink>> links_;
  std::set<std::string> blackholes_;
  PacketFilter drop_filter_;
  PacketObserver on_arrival_;
  PacketObserver on_send_;
};

/// Loop plus network, torn down in an order that lets pending tasks release
/// simulator objects while the network still exists. Transport systems using
/// its hosts must be destroyed first.
struct SimWorld {
  explicit SimWorld(std::uint64_t seed, LinkConfig default_link = {}) : net(loop, seed, default_link) {}
  ~SimWorld() { loop.clear(); }
  SimWorld(const SimWorld&) = delete;
  SimWorld& operator=(const SimWorld&) = delete;

  SimLoop loop;
  Network net;
};

}  // namespace taps::sim
