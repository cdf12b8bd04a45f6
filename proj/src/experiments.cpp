#include "taps/experiments.hpp"

#include <cmath>
#include <iomanip>
#include <memory>
#include <sstream>

#include "taps/netsim.hpp"
#include "taps/transport_system.hpp"

namespace taps::sim {

namespace {

constexpr std::uint16_t server_port = 5000;
const std::string client_addr = "10.0.0.1";
const std::string server_addr = "10.0.0.2";

std::string seconds(double s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << s;
  return os.str();
}

bool to_server(const Packet& p) { return p.kind == PacketKind::data && p.dst.address == server_addr; }

}  // namespace

// ---------------------------------------------------------------------------
// Head-of-line blocking

std::vector<int> HolTrace::order() const {
  std::vector<int> out;
  for (const auto& d : deliveries) out.push_back(d.chunk);
  return out;
}

std::optional<double> HolTrace::delivered_at(int chunk) const {
  for (const auto& d : deliveries) {
    if (d.chunk == chunk) return d.t;
  }
  return std::nullopt;
}

std::string HolTrace::to_text() const {
  std::string out;
  for (const auto& d : deliveries) out += "deliver chunk=" + std::to_string(d.chunk) + " t=" + seconds(d.t) + "\n";
  return out;
}

HolTrace run_hol_experiment(const HolConfig& cfg) {
  SimWorld world(cfg.seed);
  world.net.add_host(client_addr);
  world.net.add_host(server_addr);

  // A chunk is identified by its fill byte, right after the length prefix.
  auto chunk_of = [](const Packet& p) -> int {
    if (p.payload.size() <= LengthPrefixFramer::prefix_size) return 0;
    return p.payload[LengthPrefixFramer::prefix_size];
  };
  HolTrace trace;
  if (cfg.drop_chunk) {
    const int victim = *cfg.drop_chunk;
    world.net.set_drop_filter([=](const Packet& p) {
      return to_server(p) && p.transmission == 1 && chunk_of(p) == victim;
    });
    world.net.set_arrival_observer([&, victim](const Packet& p, TimePoint at) {
      if (to_server(p) && p.transmission > 1 && chunk_of(p) == victim && !trace.retransmit_arrival_s) {
        trace.retransmit_arrival_s = to_seconds(at);
      }
    });
  }

  TransportConfig tc;
  tc.protocols = {cfg.ordered ? ProtocolId::sim_stream : ProtocolId::sim_msg};
  TransportProperties tp;
  if (!cfg.ordered) tp.ignore(SelectionProperty::preserve_order);

  {
    TransportSystem server(world.net.host(server_addr), tc);
    TransportSystem client(world.net.host(client_addr), tc);

    auto spre = server.new_preconnection(LocalEndpoint{}.with_port(server_port), std::nullopt, tp);
    spre.add_framer<LengthPrefixFramer>();
    Listener listener = spre.listen();
    std::function<void(Connection&)> arm = [&](Connection& c) {
      c.receive([&](Connection& conn, const Bytes& data, const MessageContext&, bool) {
        trace.deliveries.push_back(HolDelivery{data.empty() ? 0 : data[0], to_seconds(world.loop.now())});
        if (static_cast<int>(trace.deliveries.size()) == hol_chunks) {
          world.loop.stop();
          return;
        }
        arm(conn);
      });
    };
    listener.on_connection_received([&](Connection c) { arm(c); });

    auto cpre = client.new_preconnection(std::nullopt, RemoteEndpoint{}.with_address(server_addr).with_port(server_port), tp);
    cpre.add_framer<LengthPrefixFramer>();
    Connection conn = cpre.initiate();
    conn.on_ready([&](Connection& c) {
      MessageProperties mp;
      mp.ordered = cfg.ordered;
      for (int k = 1; k <= hol_chunks; ++k) c.send(Bytes(hol_chunk_bytes, static_cast<std::uint8_t>(k)), mp);
    });

    world.loop.run_until(TimePoint(std::chrono::seconds(60)));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Flow completion time

std::string_view to_string(FctMode m) noexcept { return m == FctMode::clone ? "clone" : "separate"; }

FctMode fct_mode_from_string(std::string_view s) {
  if (s == "clone") return FctMode::clone;
  if (s == "separate") return FctMode::separate;
  throw Error(Errc::config_error, "unknown mode '" + std::string(s) + "'");
}

FctConfig FctConfig::desk_scale() { return FctConfig{}; }

FctConfig FctConfig::paper_scale() {
  FctConfig c;
  c.long_bytes = 15'000'000;
  c.short_bytes = 1'000'000;
  c.join_after_s = 10.0;
  return c;
}

void FctConfig::validate() const {
  if (long_bytes == 0) throw Error(Errc::config_error, "long flow size must be positive");
  if (short_bytes == 0) throw Error(Errc::config_error, "short flow size must be positive");
  if (!(rate_bps > 0.0) || !std::isfinite(rate_bps)) throw Error(Errc::config_error, "rate must be positive");
  if (!(delay_ms >= 0.0) || !std::isfinite(delay_ms)) throw Error(Errc::config_error, "delay must not be negative");
  if (!(join_after_s >= 0.0) || !std::isfinite(join_after_s)) {
    throw Error(Errc::config_error, "join time must not be negative");
  }
}

const FctFlow& FctReport::flow(std::string_view name) const {
  for (const auto& f : flows) {
    if (f.name == name) return f;
  }
  throw Error(Errc::range_error, "no flow named " + std::string(name));
}

std::string FctReport::flow_lines() const {
  std::string out;
  for (const auto& f : flows) {
    out += "flow=" + f.name + " mode=" + std::string(to_string(f.mode)) + " bytes=" + std::to_string(f.bytes) +
           " start=" + seconds(f.start_s) + " fct=" + seconds(f.fct_s) + "\n";
  }
  return out;
}

std::string FctReport::to_text() const { return "seed=" + std::to_string(seed) + "\n" + flow_lines(); }

double short_flow_reduction_pct(const FctReport& separate, const FctReport& clone) {
  const double sep = separate.flow("short").fct_s;
  return (sep - clone.flow("short").fct_s) / sep * 100.0;
}

FctReport run_fct_experiment(const FctConfig& cfg) {
  cfg.validate();
  LinkConfig link;
  link.rate_bps = cfg.rate_bps;
  link.prop_delay_ms = cfg.delay_ms;
  link.queue_capacity_packets = cfg.queue_packets != 0 ? cfg.queue_packets : bdp_packets(cfg.rate_bps, cfg.delay_ms);
  link.queue_capacity_packets = std::max<std::size_t>(link.queue_capacity_packets, 2);

  SimWorld world(cfg.seed, link);
  world.net.add_host(client_addr);
  world.net.add_host(server_addr);

  const bool clone_mode = cfg.mode == FctMode::clone;
  TransportConfig tc;
  tc.protocols = {clone_mode ? ProtocolId::sim_msg : ProtocolId::sim_stream};
  tc.max_message_bytes = std::max<std::size_t>(tc.max_message_bytes, std::max(cfg.long_bytes, cfg.short_bytes));
  TransportProperties tp;
  if (clone_mode) tp.ignore(SelectionProperty::preserve_order);

  FctReport report;
  report.seed = cfg.seed;
  report.mode = cfg.mode;
  FctFlow long_flow{"long", cfg.mode, cfg.long_bytes, 0.0, 0.0, 0.0};
  FctFlow short_flow{"short", cfg.mode, cfg.short_bytes, cfg.join_after_s, 0.0, 0.0};
  std::uint64_t long_rx = 0;
  std::uint64_t short_rx = 0;
  bool long_done = false;
  bool short_done = false;
  std::optional<Error> failure;

  {
    TransportSystem server(world.net.host(server_addr), tc);
    TransportSystem client(world.net.host(client_addr), tc);

    auto spre = server.new_preconnection(LocalEndpoint{}.with_port(server_port), std::nullopt, tp);
    Listener listener = spre.listen();
    // Flows are told apart by their fill byte.
    std::function<void(Connection&)> arm = [&](Connection& c) {
      c.receive([&](Connection& conn, const Bytes& data, const MessageContext&, bool) {
        if (data.empty()) return arm(conn);
        const double now = to_seconds(world.loop.now());
        if (data[0] == 'L') {
          long_rx += data.size();
          if (long_rx >= cfg.long_bytes && !long_done) {
            long_done = true;
            long_flow.completion_s = now;
          }
        } else {
          short_rx += data.size();
          if (short_rx >= cfg.short_bytes && !short_done) {
            short_done = true;
            short_flow.completion_s = now;
          }
        }
        if (long_done && short_done) {
          world.loop.stop();
          return;
        }
        arm(conn);
      });
    };
    listener.on_connection_received([&](Connection c) { arm(c); });

    auto remote = RemoteEndpoint{}.with_address(server_addr).with_port(server_port);
    auto record_failure = [&](Connection&, const Error& e) {
      failure = e;
      world.loop.stop();
    };
    auto cpre = client.new_preconnection(std::nullopt, remote, tp);
    Connection long_conn = cpre.initiate_with_send(Bytes(cfg.long_bytes, 'L'));
    long_conn.on_establishment_error(record_failure);

    Connection short_conn;
    world.loop.call_after(from_seconds(cfg.join_after_s), [&] {
      short_flow.start_s = to_seconds(world.loop.now());
      if (clone_mode) {
        short_conn = long_conn.clone(record_failure);
        short_conn.on_ready([&](Connection& c) { c.send(Bytes(cfg.short_bytes, 'S')); });
      } else {
        auto pre = client.new_preconnection(std::nullopt, remote, tp);
        short_conn = pre.initiate_with_send(Bytes(cfg.short_bytes, 'S'));
        short_conn.on_establishment_error(record_failure);
      }
    });

    world.loop.run_until(TimePoint(std::chrono::hours(24)));
  }
  if (failure) throw *failure;
  if (!long_done || !short_done) throw Error(Errc::timeout, "flows did not complete");

  long_flow.fct_s = long_flow.completion_s - long_flow.start_s;
  short_flow.fct_s = short_flow.completion_s - short_flow.start_s;
  report.flows = {long_flow, short_flow};
  return report;
}

}  // namespace taps::sim
