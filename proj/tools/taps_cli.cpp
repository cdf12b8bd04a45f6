// taps_cli: echo demo, FCT benchmark and head-of-line demo.

#include <csignal>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "taps/experiments.hpp"
#include "taps/netsim.hpp"
#include "taps/socket_backend.hpp"
#include "taps/transport_system.hpp"

namespace {

using namespace taps;

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_config = 2;

bool g_verbose = false;

void trace(const std::string& line) {
  if (g_verbose) std::cerr << line << std::endl;
}

void print_line(const std::string& line) {
  std::cout << line << std::endl;
}

std::string text_of(const Bytes& data) { return std::string(data.begin(), data.end()); }

// ---------------------------------------------------------------------------
// Echo server

void echo_receive(Connection& c) {
  c.receive([](Connection& conn, const Bytes& data, const MessageContext&, bool) {
    trace("event=Received len=" + std::to_string(data.size()));
    print_line("Got message with length " + std::to_string(data.size()) + ": " + text_of(data));
    conn.send(data);
    echo_receive(conn);
  });
}

Listener start_echo_server(TransportSystem& ts, std::uint16_t port) {
  auto pre = ts.new_preconnection(LocalEndpoint{}.with_port(port), std::nullopt, TransportProperties{});
  Listener listener = pre.listen();
  listener.on_connection_received([](Connection c) {
    trace("event=ConnectionReceived");
    c.on_connection_error([](Connection&, const Error& e) { trace(std::string("event=ConnectionError ") + e.what()); });
    echo_receive(c);
  });
  return listener;
}

// ---------------------------------------------------------------------------
// Echo client

struct ClientRun {
  int replies = 0;
  int closed = 0;
  std::optional<Error> failure;
  Connection first;
  Connection second;
};

void client_receive(Connection& c, const std::shared_ptr<ClientRun>& run, EventLoop& loop) {
  c.receive([run, &loop](Connection&, const Bytes& data, const MessageContext&, bool) {
    trace("event=Received len=" + std::to_string(data.size()));
    print_line("Got message with length " + std::to_string(data.size()) + ": " + text_of(data));
    if (++run->replies < 2) return;
    for (Connection* c : {&run->first, &run->second}) {
      c->on_closed([run, &loop](Connection&) {
        trace("event=Closed");
        if (++run->closed == 2) loop.stop();
      });
      c->close();
    }
  });
}

/// Starts the two-connection client; `run` reports the outcome.
void start_echo_client(TransportSystem& ts, const std::string& host, std::uint16_t port,
                       const std::shared_ptr<ClientRun>& run) {
  TransportProperties tp;
  tp.require(SelectionProperty::reliability);
  tp.prohibit(SelectionProperty::preserve_msg_boundaries);
  auto pre = ts.new_preconnection(std::nullopt, RemoteEndpoint{}.with_address(host).with_port(port), tp);
  pre.add_framer<HeaderFramer>();
  EventLoop& loop = ts.loop();
  auto fail = [run, &loop](Connection&, const Error& e) {
    trace(std::string("event=EstablishmentError ") + e.what());
    run->failure = e;
    loop.stop();
  };
  run->first = pre.initiate();
  run->first.on_establishment_error(fail);
  run->first.on_ready([run, &loop, fail](Connection& c) {
    trace("event=Ready");
    client_receive(c, run, loop);
    c.send(std::string_view("FIVE!"));
    run->second = c.clone([run, &loop](Connection&, const Error& e) {
      std::cerr << "Clone failed!" << std::endl;
      run->failure = e;
      loop.stop();
    });
    run->second.on_establishment_error(fail);
    run->second.on_ready([run, &loop](Connection& c2) {
      trace("event=Ready");
      client_receive(c2, run, loop);
      c2.send(std::string_view("HelloWorld"));
    });
  });
}

TransportConfig base_config() {
  TransportConfig cfg;
  cfg.policy = SystemPolicy::from_environment();
  return cfg;
}

void install_shutdown(RealLoop& loop, TransportSystem& ts) {
  auto shutdown = [&loop, &ts] {
    trace("event=Shutdown");
    ts.close_all();
    loop.call_after(std::chrono::milliseconds(200), [&loop] { loop.stop(); });
  };
  loop.on_signal(SIGINT, shutdown);
  loop.on_signal(SIGTERM, shutdown);
}

int cmd_echo_server(std::uint16_t port) {
  RealLoop loop;
  SocketBackend backend(loop);
  TransportSystem ts(backend, base_config());
  Listener listener = start_echo_server(ts, port);
  install_shutdown(loop, ts);
  trace("event=Listening port=" + std::to_string(listener.port()));
  loop.run();
  return exit_ok;
}

int finish_client(const ClientRun& run) {
  if (run.failure) {
    std::cerr << "error: " << run.failure->what() << std::endl;
    return exit_failure;
  }
  return run.replies >= 2 ? exit_ok : exit_failure;
}

int cmd_echo_client(const std::string& host, std::uint16_t port) {
  RealLoop loop;
  SocketBackend backend(loop);
  TransportSystem ts(backend, base_config());
  auto run = std::make_shared<ClientRun>();
  start_echo_client(ts, host, port, run);
  install_shutdown(loop, ts);
  loop.run();
  return finish_client(*run);
}

/// Server and client in one process over a simulated SIM_STREAM path.
int cmd_echo_sim(std::uint16_t port) {
  sim::SimWorld world(1);
  world.net.add_host("10.0.0.1");
  world.net.add_host("10.0.0.2");
  world.net.add_name("server", "10.0.0.2");
  TransportConfig cfg = base_config();
  cfg.protocols = {ProtocolId::sim_stream};
  auto run = std::make_shared<ClientRun>();
  {
    TransportSystem server(world.net.host("10.0.0.2"), cfg);
    TransportSystem client(world.net.host("10.0.0.1"), cfg);
    Listener listener = start_echo_server(server, port);
    start_echo_client(client, "server", port, run);
    world.loop.run_until(TimePoint(std::chrono::seconds(30)));
    listener.stop();
  }
  return finish_client(*run);
}

// ---------------------------------------------------------------------------
// Experiments

int cmd_fct_bench(sim::FctConfig cfg, const std::string& mode) {
  cfg.validate();
  std::cout << "seed=" << cfg.seed << "\n";
  if (mode != "both") {
    cfg.mode = sim::fct_mode_from_string(mode);
    std::cout << sim::run_fct_experiment(cfg).flow_lines();
    return exit_ok;
  }
  cfg.mode = sim::FctMode::clone;
  const auto clone = sim::run_fct_experiment(cfg);
  cfg.mode = sim::FctMode::separate;
  const auto separate = sim::run_fct_experiment(cfg);
  std::cout << clone.flow_lines() << separate.flow_lines();
  std::cout << "reduction_pct=" << std::fixed << std::setprecision(2)
            << sim::short_flow_reduction_pct(separate, clone) << "\n";
  return exit_ok;
}

int cmd_hol_demo(bool ordered, std::uint64_t seed, bool no_loss) {
  sim::HolConfig cfg;
  cfg.ordered = ordered;
  cfg.seed = seed;
  if (no_loss) cfg.drop_chunk.reset();
  const auto t = sim::run_hol_experiment(cfg);
  std::cout << t.to_text();
  if (t.retransmit_arrival_s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << *t.retransmit_arrival_s;
    trace("retransmit_arrival t=" + os.str());
  }
  return static_cast<int>(t.deliveries.size()) == sim::hol_chunks ? exit_ok : exit_failure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transport services demos and experiments"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_flag("-v,--verbose", g_verbose, "Print connection events to stderr");

  std::uint16_t port = 5000;
  std::string host = "127.0.0.1";
  bool use_sim = false;

  auto* server = app.add_subcommand("echo-server", "Print and echo every received message");
  server->add_option("--port", port, "Local port")->capture_default_str();

  auto* client = app.add_subcommand("echo-client", "Two-connection client with the HEADER framer");
  client->add_option("--host", host, "Server address")->capture_default_str();
  client->add_option("--port", port, "Server port")->capture_default_str();
  client->add_flag("--sim", use_sim, "Run server and client over a simulated path instead");

  sim::FctConfig fct;
  std::string fct_mode = "both";
  std::string scale = "desk";
  auto* bench = app.add_subcommand("fct-bench", "Short-flow completion time, clone vs separate connection");
  bench->add_option("--scale", scale, "Preset for unset sizes: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  auto* opt_long = bench->add_option("--long-bytes", fct.long_bytes, "Long flow size in bytes");
  auto* opt_short = bench->add_option("--short-bytes", fct.short_bytes, "Short flow size in bytes");
  auto* opt_join = bench->add_option("--join-after", fct.join_after_s, "Short flow start in seconds");
  bench->add_option("--rate", fct.rate_bps, "Bottleneck rate in bit/s")->capture_default_str();
  bench->add_option("--delay", fct.delay_ms, "One-way propagation delay in ms")->capture_default_str();
  bench->add_option("--queue", fct.queue_packets, "Bottleneck queue in packets, 0 for one BDP")
      ->capture_default_str();
  bench->add_option("--mode", fct_mode, "clone, separate or both")
      ->check(CLI::IsMember({"clone", "separate", "both"}))
      ->capture_default_str();
  bench->add_option("--seed", fct.seed, "Simulator seed")->capture_default_str();

  std::string ordered = "true";
  std::uint64_t hol_seed = 1;
  bool no_loss = false;
  auto* hol = app.add_subcommand("hol-demo", "Four chunks, the second one lost once");
  hol->add_option("--ordered", ordered, "true for an ordered byte stream, false for unordered messages")
      ->check(CLI::IsMember({"true", "false"}))
      ->capture_default_str();
  hol->add_option("--seed", hol_seed, "Simulator seed")->capture_default_str();
  hol->add_flag("--no-loss", no_loss, "Do not drop any chunk");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config;
  }

  try {
    if (*server) return cmd_echo_server(port);
    if (*client) return use_sim ? cmd_echo_sim(port) : cmd_echo_client(host, port);
    if (*bench) {
      if (scale == "paper") {
        const auto paper = sim::FctConfig::paper_scale();
        if (!*opt_long) fct.long_bytes = paper.long_bytes;
        if (!*opt_short) fct.short_bytes = paper.short_bytes;
        if (!*opt_join) fct.join_after_s = paper.join_after_s;
      }
      return cmd_fct_bench(fct, fct_mode);
    }
    if (*hol) return cmd_hol_demo(ordered == "true", hol_seed, no_loss);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    switch (e.code()) {
      case Errc::config_error:
      case Errc::policy_error:
      case Errc::unknown_protocol:
        return exit_config;
      default:
        return exit_failure;
    }
  }
  return exit_ok;
}
