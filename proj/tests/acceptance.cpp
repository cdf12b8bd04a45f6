// Acceptance checks: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cli_run.hpp"
#include "sim_pair.hpp"
#include "taps/experiments.hpp"
#include "taps/msgmux.hpp"

using namespace taps;
using namespace taps::test;
using namespace std::chrono_literals;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. Echo server and client on loopback.

bool port_accepts(int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  const bool ok = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0;
  ::close(fd);
  return ok;
}

Verdict echo_golden() {
  const int port = free_tcp_port();
  const auto out_path = std::filesystem::temp_directory_path() / ("taps_accept_server_" + std::to_string(::getpid()));
  const pid_t pid = ::fork();
  if (pid == 0) {
    const int fd = ::open(out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    ::dup2(fd, STDOUT_FILENO);
    const int null = ::open("/dev/null", O_WRONLY);
    ::dup2(null, STDERR_FILENO);
    const std::string port_s = std::to_string(port);
    ::execl(TAPS_CLI_PATH, TAPS_CLI_PATH, "echo-server", "--port", port_s.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  bool up = false;
  for (int i = 0; i < 150 && !up; ++i) {
    up = port_accepts(port);
    if (!up) std::this_thread::sleep_for(20ms);
  }
  CliResult client;
  if (up) client = run_cli("echo-client --host 127.0.0.1 --port " + std::to_string(port));
  std::this_thread::sleep_for(100ms);
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  const std::string server_out = slurp(out_path);
  std::filesystem::remove(out_path);
  if (!up) return {false, "server never started listening"};

  auto server_lines = lines_of(server_out);
  auto client_lines = lines_of(client.out);
  std::sort(server_lines.begin(), server_lines.end());
  std::sort(client_lines.begin(), client_lines.end());
  const std::vector<std::string> want_server{"Got message with length 11: HEADERFIVE!",
                                             "Got message with length 16: HEADERHelloWorld"};
  const std::vector<std::string> want_client{"Got message with length 5: FIVE!", "Got message with length 5: Hello"};
  const bool ok = client.status == 0 && server_lines == want_server && client_lines == want_client;
  std::string detail = "client exit=" + std::to_string(client.status) + ", server lines=" +
                       std::to_string(server_lines.size()) + ", client lines=" + std::to_string(client_lines.size());
  if (!ok) detail += "\n  server: " + server_out + "\n  client: " + client.out;
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 2. Protocol selection falls back as intended.

std::optional<ProtocolId> winner(SimPair& p, const TransportProperties& tp) {
  Connection c = p.client_pre(5000, tp).initiate();
  bool done = false;
  c.on_ready([&](Connection&) { done = true; });
  c.on_establishment_error([&](Connection&, const Error&) { done = true; });
  p.run_until([&] { return done; });
  c.on_ready({});
  c.on_establishment_error({});
  p.run_for(1ms);
  if (c.state() != ConnectionState::established || !c.race_trace()) return std::nullopt;
  return c.race_trace()->winning_protocol();
}

Verdict fallback() {
  const std::vector<ProtocolId> real{ProtocolId::tcp, ProtocolId::udp, ProtocolId::msgmux};
  TransportProperties forcing;
  forcing.require(SelectionProperty::reliability);
  forcing.prohibit(SelectionProperty::preserve_msg_boundaries);

  SimPair a(real);
  Listener la = a.server_pre().listen();
  const auto forced = winner(a, forcing);

  SimPair b(real);
  Listener lb = b.server_pre().listen();
  const auto rich = winner(b, TransportProperties{});

  SimPair c(real, {ProtocolId::tcp});
  Listener lc = c.server_pre().listen();
  const auto tcp_only = winner(c, TransportProperties{});

  auto name = [](std::optional<ProtocolId> p) { return p ? std::string(to_string(*p)) : std::string("none"); };
  const bool ok = forced == ProtocolId::tcp && rich == ProtocolId::msgmux && tcp_only == ProtocolId::tcp;
  return {ok, "forced=" + name(forced) + " defaults=" + name(rich) + " tcp-only peer=" + name(tcp_only)};
}

// ---------------------------------------------------------------------------
// 3. Short-flow completion time with a cloned stream.

double reduction(sim::FctConfig cfg) {
  cfg.mode = sim::FctMode::clone;
  const auto clone = sim::run_fct_experiment(cfg);
  cfg.mode = sim::FctMode::separate;
  const auto separate = sim::run_fct_experiment(cfg);
  return sim::short_flow_reduction_pct(separate, clone);
}

Verdict fct() {
  const double desk = reduction(sim::FctConfig::desk_scale());
  const double paper = reduction(sim::FctConfig::paper_scale());
  const bool desk_ok = desk >= 25.0 && desk <= 75.0;
  const bool paper_ok = paper >= 40.0 && paper <= 70.0;
  return {desk_ok && paper_ok, "desk reduction=" + fmt(desk) + "% (want 25..75), paper-scale reduction=" +
                                   fmt(paper) + "% (want 40..70)"};
}

// ---------------------------------------------------------------------------
// 4. Head-of-line blocking.

Verdict hol() {
  sim::HolConfig ordered;
  ordered.ordered = true;
  const auto o = sim::run_hol_experiment(ordered);
  sim::HolConfig unordered;
  unordered.ordered = false;
  const auto u = sim::run_hol_experiment(unordered);
  const bool order_ok = o.order() == std::vector<int>{1, 2, 3, 4} && u.order() == std::vector<int>{1, 3, 4, 2};
  const bool wait_ok = o.retransmit_arrival_s && o.delivered_at(3) && *o.delivered_at(3) >= *o.retransmit_arrival_s;
  auto seq = [](const std::vector<int>& v) {
    std::string s;
    for (int k : v) s += std::to_string(k);
    return s;
  };
  std::string detail = "ordered=" + seq(o.order()) + " unordered=" + seq(u.order());
  if (wait_ok) {
    detail += " t3=" + fmt(*o.delivered_at(3), 6) + " retx=" + fmt(*o.retransmit_arrival_s, 6);
  }
  return {order_ok && wait_ok, detail};
}

// ---------------------------------------------------------------------------
// 5. One Received event per receive call.

Verdict receive_contract() {
  SimPair p;
  Listener l = p.server_pre().listen();
  Connection server_side;
  l.on_connection_received([&](Connection c) { server_side = c; });
  Connection c = p.client_pre().initiate();
  p.run_until([&] { return server_side && c.state() == ConnectionState::established; });
  if (!server_side) return {false, "no connection"};

  std::mt19937_64 rng(2024);
  std::size_t calls = 0;
  std::size_t events = 0;
  std::size_t sent = 0;
  std::size_t violations = 0;
  std::size_t mismatches = 0;
  for (int round = 0; round < 1000; ++round) {
    const int ops = 1 + static_cast<int>(rng() % 8);
    for (int k = 0; k < ops; ++k) {
      if (rng() % 2) {
        ++calls;
        server_side.receive([&](Connection&, const Bytes&, const MessageContext&, bool) {
          ++events;
          if (events > calls) ++violations;
        });
      } else {
        c.send(std::string_view("msg"));
        ++sent;
      }
      if (rng() % 4 == 0) p.run_for(std::chrono::milliseconds(rng() % 50));
      if (events > calls) ++violations;
    }
    // Quiescent point: everything sent has arrived.
    p.run_for(200ms);
    if (events != std::min(calls, sent)) ++mismatches;
  }
  return {violations == 0 && mismatches == 0,
          "1000 rounds, " + std::to_string(calls) + " receive calls, " + std::to_string(sent) + " messages, " +
              std::to_string(events) + " events, violations=" + std::to_string(violations) +
              " quiescent mismatches=" + std::to_string(mismatches)};
}

// ---------------------------------------------------------------------------
// 6. Group property entanglement.

Verdict entanglement() {
  struct Write {
    std::string key;
    PropertyValue value;
  };
  std::vector<Write> writes;
  for (auto profile : {CapacityProfile::scavenger, CapacityProfile::low_latency_interactive,
                       CapacityProfile::constant_rate_streaming, CapacityProfile::default_profile}) {
    writes.push_back({std::string(ConnectionProperties::capacity_profile_key), profile});
  }
  writes.push_back({"retries", std::int64_t{7}});
  writes.push_back({"weight", 0.25});
  writes.push_back({"bulk", true});
  writes.push_back({"label", std::string("video")});

  std::size_t checks = 0;
  std::size_t failures = 0;
  for (std::size_t size = 1; size <= 4; ++size) {
    SimPair p;
    Listener l = p.server_pre().listen();
    std::vector<Connection> group;
    group.push_back(p.client_pre().initiate());
    p.run_until([&] { return group[0].state() == ConnectionState::established; });
    while (group.size() < size) {
      Connection k = group[0].clone();
      p.run_until([&] { return k.state() != ConnectionState::establishing; });
      group.push_back(k);
    }
    for (std::size_t i = 0; i < size; ++i) {
      for (const auto& w : writes) {
        group[i].set_property(w.key, w.value);
        for (auto& member : group) {
          ++checks;
          if (member.property(w.key) != std::optional<PropertyValue>(w.value)) ++failures;
        }
      }
    }
  }
  return {failures == 0 && checks > 0,
          std::to_string(checks) + " read-backs over group sizes 1-4, " + std::to_string(failures) + " mismatches"};
}

// ---------------------------------------------------------------------------
// 7. MSGMUX wire format.

Verdict msgmux_wire() {
  const Bytes golden{0x01, 0x00, 0x00, 0x00, 0x01, 0x01, 0x00, 0x00, 0x00, 0x05, 0x46, 0x49, 0x56, 0x45, 0x21};
  msgmux::Frame five{msgmux::FrameType::data, 1, msgmux::flag_end_of_message, to_bytes("FIVE!")};
  const bool golden_ok = msgmux::encode(five) == golden;

  std::mt19937_64 rng(77);
  const msgmux::FrameType types[] = {msgmux::FrameType::data, msgmux::FrameType::open_stream,
                                     msgmux::FrameType::close_stream, msgmux::FrameType::reset_stream,
                                     msgmux::FrameType::goaway};
  std::size_t bad = 0;
  constexpr int total = 10'000;
  constexpr int batch = 100;
  for (int done = 0; done < total; done += batch) {
    std::vector<msgmux::Frame> sent;
    Bytes wire;
    for (int i = 0; i < batch; ++i) {
      msgmux::Frame f;
      f.type = types[rng() % 5];
      f.stream_id = static_cast<std::uint32_t>(rng() & msgmux::max_stream_id);
      f.flags = static_cast<std::uint8_t>(rng() & 1);
      f.payload.resize(rng() % (msgmux::max_payload + 1));
      for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng());
      msgmux::encode(f, wire);
      sent.push_back(std::move(f));
    }
    msgmux::FrameDecoder dec;
    std::vector<msgmux::Frame> got;
    std::size_t pos = 0;
    while (pos < wire.size()) {
      const std::size_t n = std::min<std::size_t>(wire.size() - pos, 1 + rng() % 100'000);
      for (auto& f : dec.feed(ByteView(wire).subspan(pos, n))) got.push_back(std::move(f));
      pos += n;
    }
    if (got.size() != sent.size()) {
      bad += sent.size();
      continue;
    }
    for (std::size_t i = 0; i < sent.size(); ++i) {
      if (!(got[i] == sent[i])) ++bad;
    }
  }
  return {golden_ok && bad == 0, std::string("golden ") + (golden_ok ? "matches" : "differs") + ", " +
                                     std::to_string(total) + " frames, " + std::to_string(bad) + " corrupted"};
}

// ---------------------------------------------------------------------------
// 8. Racing cache.

Verdict racing_cache() {
  SimPair p({ProtocolId::tcp, ProtocolId::udp, ProtocolId::msgmux}, {ProtocolId::tcp});
  Listener l = p.server_pre().listen();
  std::vector<Connection> conns;
  for (int i = 0; i < 2; ++i) {
    Connection c = p.client_pre().initiate();
    p.run_until([&] { return c.state() != ConnectionState::establishing; });
    conns.push_back(c);
  }
  std::size_t probes = 0;
  std::vector<std::multiset<ProtocolId>> members;
  std::string winners;
  for (auto& c : conns) {
    const RaceTrace* t = c.race_trace();
    if (!t) return {false, "missing race trace"};
    probes += t->attempts_for(ProtocolId::msgmux);
    std::multiset<ProtocolId> m;
    for (const auto& cand : t->candidates) m.insert(cand.protocol);
    members.push_back(m);
    const auto w = t->winning_protocol();
    winners += std::string(w ? to_string(*w) : "none") + " ";
  }
  const bool ok = probes == 1 && members[0] == members[1];
  return {ok, "msgmux probes=" + std::to_string(probes) + ", membership " +
                  (members[0] == members[1] ? "unchanged" : "changed") + ", winners " + winners};
}

// ---------------------------------------------------------------------------
// 9. Framer byte conservation.

struct FuzzModel {
  std::mt19937_64 rng;
  const Bytes* input = nullptr;
  std::size_t committed = 0;  // stream offset of the outermost cursor
  std::uint64_t delivered = 0;
  std::uint64_t discarded = 0;
  Bytes partial;
  Bytes complete;  // bytes of finished messages, in order
  std::size_t violations = 0;
};

/// Random parse/advance/deliver program, mirrored into the model once a
/// round commits.
class FuzzFramer : public Framer {
 public:
  explicit FuzzFramer(FuzzModel* m) : m_(m) {}

  void handle_received_data(FramerContext& ctx) override {
    struct Op {
      bool deliver;
      std::size_t n;
      bool end;
    };
    std::vector<Op> ops;
    std::size_t used = 0;
    const std::size_t avail = ctx.parse(0, SIZE_MAX).data.size();
    const int count = 1 + static_cast<int>(m_->rng() % 4);
    for (int k = 0; k < count; ++k) {
      const std::size_t left = avail - used;
      switch (m_->rng() % 3) {
        case 0: {
          const std::size_t min = m_->rng() % (left + 3);
          auto r = ctx.parse(min, min + m_->rng() % 8);
          // A parse must show exactly the next unconsumed bytes.
          for (std::size_t i = 0; i < r.data.size(); ++i) {
            if (r.data[i] != (*m_->input)[m_->committed + used + i]) ++m_->violations;
          }
          break;
        }
        case 1: {
          std::size_t n = left == 0 ? 0 : m_->rng() % (left + 1);
          if (m_->rng() % 50 == 0) n = left + 1;  // out of range on purpose
          ctx.advance_receive_cursor(n);
          ops.push_back({false, n, false});
          used += n;
          break;
        }
        default: {
          std::size_t n = left == 0 ? 0 : m_->rng() % (left + 1);
          if (m_->rng() % 50 == 0) n = left + 1;
          const bool end = m_->rng() % 2 == 0;
          ctx.deliver_and_advance_receive_cursor(MessageContext{}, n, end);
          ops.push_back({true, n, end});
          used += n;
          break;
        }
      }
    }
    // Reached only when the round commits.
    for (const auto& op : ops) {
      const auto* from = m_->input->data() + m_->committed;
      if (op.deliver) {
        m_->partial.insert(m_->partial.end(), from, from + op.n);
        m_->delivered += op.n;
        if (op.end) {
          append(m_->complete, m_->partial);
          m_->partial.clear();
        }
      } else {
        m_->discarded += op.n;
      }
      m_->committed += op.n;
    }
  }

 private:
  FuzzModel* m_;
};

Verdict framer_fuzz() {
  std::mt19937_64 rng(99);
  std::size_t violations = 0;
  std::size_t range_errors = 0;
  std::uint64_t bytes = 0;
  constexpr int trials = 2000;
  for (int trial = 0; trial < trials; ++trial) {
    FuzzModel model;
    model.rng.seed(rng());
    Bytes input(rng() % 4000);
    for (auto& b : input) b = static_cast<std::uint8_t>(rng());
    model.input = &input;
    FramerChain chain({[&model] { return std::make_unique<FuzzFramer>(&model); }}, 1 << 20);
    chain.start();
    Bytes sunk;
    auto sink = [&](Bytes d, const MessageContext&) { append(sunk, d); };
    std::size_t pos = 0;
    while (pos < input.size()) {
      const std::size_t n = std::min<std::size_t>(input.size() - pos, 1 + rng() % 300);
      try {
        chain.on_inbound(ByteView(input).subspan(pos, n), MessageContext{}, false, sink);
      } catch (const Error& e) {
        if (e.code() != Errc::range_error) ++violations;
        ++range_errors;
      }
      pos += n;
      const auto& cur = chain.outer_cursor();
      if (cur.received() != cur.delivered() + cur.discarded() + cur.buffered()) ++violations;
      if (cur.received() != pos) ++violations;
      if (cur.delivered() != model.delivered || cur.discarded() != model.discarded) ++violations;
    }
    chain.stop();
    // Delivered bytes are an in-order, non-overlapping slice sequence of the input.
    if (sunk != model.complete) ++violations;
    violations += model.violations;
    bytes += input.size();
  }
  return {violations == 0, std::to_string(trials) + " programs over " + std::to_string(bytes) + " bytes, " +
                               std::to_string(range_errors) + " range errors exercised, " +
                               std::to_string(violations) + " violations"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "echo demo golden output on loopback", 5, echo_golden},
      {2, "fallback enforcement in protocol selection", 1, fallback},
      {3, "short-flow completion time with clone", 10, fct},
      {4, "head-of-line blocking order", 1, hol},
      {5, "receive contract under random interleavings", 10, receive_contract},
      {6, "group property entanglement", 1, entanglement},
      {7, "MSGMUX wire round-trip and golden vector", 10, msgmux_wire},
      {8, "racing cache limits MSGMUX probes", 1, racing_cache},
      {9, "framer byte conservation fuzz", 10, framer_fuzz},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = v.pass && in_time;
    if (!pass) ++failed;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << ": " << c.name << " (" << v.detail
              << "; " << fmt(secs, 3) << " s of " << c.limit_s << " s)" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
