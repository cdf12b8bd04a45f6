#include <gtest/gtest.h>

#include <algorithm>

#include "sim_pair.hpp"

using namespace taps;
using namespace taps::test;
using namespace std::chrono_literals;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::config_error;
}

bool contains(const std::vector<ProtocolId>& v, ProtocolId p) { return std::find(v.begin(), v.end(), p) != v.end(); }

TransportProperties datagram_friendly() {
  TransportProperties tp;
  tp.ignore(SelectionProperty::reliability);
  tp.ignore(SelectionProperty::preserve_order);
  return tp;
}

}  // namespace

TEST(NewPreconnection, ListenerCapable) {
  SimPair p;
  auto pre = p.server_pre(5000);
  EXPECT_EQ(pre.local()->port, 5000);
  EXPECT_FALSE(pre.remote());
  EXPECT_FALSE(pre.started());
}

TEST(NewPreconnection, InitiatorCapable) {
  SimPair p;
  auto pre = p.client_pre(5000);
  EXPECT_EQ(pre.remote()->host, server_addr);
  EXPECT_EQ(pre.remote()->port, 5000);
}

TEST(NewPreconnection, NoEndpointsIsMissingEndpoint) {
  SimPair p;
  p.build();
  EXPECT_EQ(code_of([&] { p.client->new_preconnection(std::nullopt, std::nullopt); }), Errc::missing_endpoint);
}

TEST(AddFramer, ChainGrowsInOrder) {
  SimPair p;
  auto pre = p.client_pre();
  pre.add_framer<HeaderFramer>();
  EXPECT_EQ(pre.framer_count(), 1u);
  pre.add_framer<LengthPrefixFramer>();
  EXPECT_EQ(pre.framer_count(), 2u);
}

TEST(AddFramer, AfterStartIsAlreadyStarted) {
  SimPair p;
  auto pre = p.server_pre();
  Listener l = pre.listen();
  EXPECT_TRUE(pre.started());
  EXPECT_EQ(code_of([&] { pre.add_framer<HeaderFramer>(); }), Errc::already_started);
}

TEST(Initiate, MissingRemote) {
  SimPair p;
  auto pre = p.server_pre();
  EXPECT_EQ(code_of([&] { pre.initiate(); }), Errc::missing_endpoint);
}

TEST(Initiate, NoCandidatesWithoutPerMessageReliability) {
  SimPair p;
  TransportProperties tp;
  tp.require(SelectionProperty::reliability);
  tp.require(SelectionProperty::per_msg_reliability);
  auto pre = p.client_pre(5000, tp);
  EXPECT_EQ(code_of([&] { pre.initiate(); }), Errc::no_candidates);
}

TEST(Initiate, ReadyExactlyOnce) {
  SimPair p;
  Listener l = p.server_pre().listen();
  Connection c = p.client_pre().initiate();
  EXPECT_EQ(c.state(), ConnectionState::establishing);
  int ready = 0;
  int failed = 0;
  c.on_ready([&](Connection&) { ++ready; });
  c.on_establishment_error([&](Connection&, const Error&) { ++failed; });
  p.run_for(3s);
  EXPECT_EQ(ready, 1);
  EXPECT_EQ(failed, 0);
  EXPECT_EQ(c.state(), ConnectionState::established);
}

TEST(Initiate, DeadPortFailsOnce) {
  SimPair p;
  p.build();
  Connection c = p.client_pre().initiate();
  int ready = 0;
  int failed = 0;
  c.on_ready([&](Connection&) { ++ready; });
  c.on_establishment_error([&](Connection&, const Error&) { ++failed; });
  p.run_for(12s);
  EXPECT_EQ(ready, 0);
  EXPECT_EQ(failed, 1);
  EXPECT_EQ(c.state(), ConnectionState::closed);
}

TEST(Initiate, UnresolvableName) {
  SimPair p;
  p.build();
  Connection c = p.client->new_preconnection(std::nullopt, RemoteEndpoint{}.with_hostname("nowhere").with_port(1))
                     .initiate();
  std::optional<Error> err;
  c.on_establishment_error([&](Connection&, const Error& e) { err = e; });
  p.run_for(10ms);
  ASSERT_TRUE(err);
  EXPECT_EQ(err->code(), Errc::establishment_failed);
}

TEST(Initiate, NoHandlerRunsDuringRegistration) {
  SimPair p;
  Listener l = p.server_pre().listen();
  Connection c = p.client_pre().initiate();
  p.run_for(3s);
  bool inside = true;
  bool fired_inside = false;
  c.on_ready([&](Connection&) { fired_inside = inside; });
  inside = false;
  p.run_for(1ms);
  EXPECT_FALSE(fired_inside);
}

TEST(InitiateWithSend, EmptyIsInvalidMessage) {
  SimPair p;
  auto pre = p.client_pre();
  EXPECT_EQ(code_of([&] { pre.initiate_with_send(Bytes{}); }), Errc::invalid_message);
}

TEST(InitiateWithSend, UdpCarriesDataInFirstDatagram) {
  SimPair p({ProtocolId::udp});
  std::vector<std::string> client_packets;
  p.world.net.set_send_observer([&](const sim::Packet& pk, TimePoint) {
    if (pk.src.address == client_addr) client_packets.push_back(to_string(pk.payload));
  });
  Listener l = p.server_pre(5000, datagram_friendly()).listen();
  std::string got;
  l.on_connection_received([&](Connection c) {
    c.receive([&](Connection&, const Bytes& d, const MessageContext&, bool) { got = text(d); });
  });
  Connection c = p.client_pre(5000, datagram_friendly()).initiate_with_send(to_bytes("ping"));
  p.run_until([&] { return !got.empty(); }, 2s);
  ASSERT_FALSE(client_packets.empty());
  EXPECT_EQ(client_packets.front(), "ping");
  EXPECT_EQ(got, "ping");
}

TEST(InitiateWithSend, TcpSendsAfterHandshake) {
  SimPair p({ProtocolId::tcp});
  Listener l = p.server_pre().listen();
  std::string got;
  l.on_connection_received([&](Connection c) {
    c.receive([&](Connection&, const Bytes& d, const MessageContext&, bool) { got = text(d); });
  });
  Connection c = p.client_pre().initiate_with_send(to_bytes("ping"));
  bool ready = false;
  int sent = 0;
  c.on_ready([&](Connection&) { ready = true; });
  c.on_sent([&](Connection&, MessageRef) {
    EXPECT_TRUE(ready);
    ++sent;
  });
  p.run_until([&] { return !got.empty(); }, 2s);
  EXPECT_EQ(got, "ping");
  EXPECT_EQ(sent, 1);
}

TEST(Listen, DefaultsListenOnReliableProtocols) {
  SimPair p;
  Listener l = p.server_pre().listen();
  EXPECT_TRUE(contains(l.protocols(), ProtocolId::tcp));
  EXPECT_TRUE(contains(l.protocols(), ProtocolId::msgmux));
  EXPECT_FALSE(contains(l.protocols(), ProtocolId::udp));
  EXPECT_TRUE(l.active());
  EXPECT_EQ(l.port(), 5000);
}

TEST(Listen, UnreliableAddsUdpAndAcceptsOnFirstDatagram) {
  SimPair p;
  Listener l = p.server_pre(5000, datagram_friendly()).listen();
  EXPECT_TRUE(contains(l.protocols(), ProtocolId::udp));

  p.client_cfg.protocols = {ProtocolId::udp};
  p.client = std::make_unique<TransportSystem>(p.world.net.host(client_addr), p.client_cfg);
  int received = 0;
  std::optional<ProtocolId> proto;
  l.on_connection_received([&](Connection c) {
    ++received;
    proto = c.protocol();
  });
  Connection c = p.client_pre(5000, datagram_friendly()).initiate();
  c.on_ready([](Connection& conn) { conn.send(std::string_view("hi")); });
  p.run_for(1s);
  EXPECT_EQ(received, 1);
  EXPECT_EQ(proto, ProtocolId::udp);
}

TEST(Listen, DefaultsNeverYieldUdp) {
  SimPair p;
  Listener l = p.server_pre().listen();
  std::vector<ProtocolId> seen;
  l.on_connection_received([&](Connection c) { seen.push_back(*c.protocol()); });
  for (int i = 0; i < 3; ++i) p.client_pre().initiate();
  p.run_for(2s);
  ASSERT_EQ(seen.size(), 3u);
  for (auto pr : seen) EXPECT_NE(pr, ProtocolId::udp);
}

TEST(Listen, MissingPort) {
  SimPair p;
  p.build();
  auto pre = p.server->new_preconnection(LocalEndpoint{}.with_address(server_addr), std::nullopt);
  EXPECT_EQ(code_of([&] { pre.listen(); }), Errc::missing_endpoint);
}

TEST(Listen, PortInUseIsBindFailure) {
  SimPair p;
  Listener first = p.server_pre().listen();
  auto again = p.server_pre();
  EXPECT_EQ(code_of([&] { again.listen(); }), Errc::bind_failure);
}

TEST(Listen, PolicyCanLeaveNothing) {
  SimPair p;
  p.server_cfg.policy = SystemPolicy::parse("prohibit_protocol=TCP\nprohibit_protocol=MSGMUX\n");
  auto pre = p.server_pre();
  EXPECT_EQ(code_of([&] { pre.listen(); }), Errc::no_candidates);
}

TEST(Listen, InterfaceMustMatchPolicy) {
  SimPair p;
  p.server_cfg.policy = SystemPolicy::parse("prohibit_interface=wlan0\n");
  p.build();
  auto pre = p.server->new_preconnection(LocalEndpoint{}.with_port(5000).with_interface("wlan0"), std::nullopt);
  EXPECT_EQ(code_of([&] { pre.listen(); }), Errc::no_candidates);
}

TEST(ListenerStop, NoEventsAfterStopAndIdempotent) {
  SimPair p;
  Listener l = p.server_pre().listen();
  int received = 0;
  l.on_connection_received([&](Connection) { ++received; });
  l.stop();
  EXPECT_FALSE(l.active());
  l.stop();
  Connection c = p.client_pre().initiate();
  p.run_for(8s);
  EXPECT_EQ(received, 0);
}

TEST(ListenerStop, HeldConnectionsAreDiscarded) {
  SimPair p;
  Listener l = p.server_pre().listen();
  Connection c = p.client_pre().initiate();
  bool client_ready = false;
  c.on_ready([&](Connection&) { client_ready = true; });
  p.run_until([&] { return client_ready; });
  p.run_for(100ms);
  l.stop();
  int received = 0;
  l.on_connection_received([&](Connection) { ++received; });
  p.run_for(1s);
  EXPECT_EQ(received, 0);
}

TEST(ListenerStop, ExistingConnectionsUnaffected) {
  SimPair p({ProtocolId::tcp});
  Listener l = p.server_pre().listen();
  Connection server_side;
  l.on_connection_received([&](Connection c) { server_side = c; });
  Connection c = p.client_pre().initiate();
  p.run_until([&] { return server_side && c.state() == ConnectionState::established; });
  l.stop();
  std::string got;
  server_side.receive([&](Connection&, const Bytes& d, const MessageContext&, bool) { got = text(d); });
  c.send(std::string_view("after stop"));
  p.run_until([&] { return !got.empty(); }, 2s);
  EXPECT_EQ(got, "after stop");
}
