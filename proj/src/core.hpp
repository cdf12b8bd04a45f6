#pragma once

// Internal state behind the Connection, Listener and TransportSystem handles.

#include <deque>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "taps/connection.hpp"
#include "taps/framer.hpp"
#include "taps/preconnection.hpp"
#include "taps/racing.hpp"
#include "taps/transport_system.hpp"

namespace taps {

struct ConnectionGroup {
  std::uint64_t id = 0;
  std::shared_ptr<ConnectionProperties> properties = std::make_shared<ConnectionProperties>();
  std::vector<std::weak_ptr<ConnectionImpl>> members;

  std::vector<std::shared_ptr<ConnectionImpl>> live_members();
};

class SystemCore : public std::enable_shared_from_this<SystemCore> {
 public:
  SystemCore(NetworkBackend& backend, TransportConfig cfg)
      : backend(backend), config(std::move(cfg)), cache(config.cache_ttl) {}

  NetworkBackend& backend;
  TransportConfig config;
  RaceCache cache;

  std::uint64_t next_group_id = 1;
  std::uint64_t next_message_ref = 1;

  EventLoop& loop() { return backend.loop(); }

  // Open connections and active listeners are owned here so that dropping
  // every handle does not tear them down.
  void adopt(const std::shared_ptr<ConnectionImpl>& c) { connections.insert(c); }
  void release(const std::shared_ptr<ConnectionImpl>& c) { connections.erase(c); }
  void adopt(const std::shared_ptr<ListenerImpl>& l) { listeners.insert(l); }
  void release(const std::shared_ptr<ListenerImpl>& l) { listeners.erase(l); }

  void close_all();
  void shutdown();

  std::set<std::shared_ptr<ConnectionImpl>> connections;
  std::set<std::shared_ptr<ListenerImpl>> listeners;
};

class ConnectionImpl : public std::enable_shared_from_this<ConnectionImpl> {
 public:
  ConnectionImpl(std::shared_ptr<SystemCore> core, std::vector<FramerFactory> framers, TransportProperties tp,
                 std::shared_ptr<ConnectionGroup> group);

  // Establishment paths.
  void start_race(std::vector<CandidateStack> candidates);
  void attach(std::shared_ptr<ProtocolConnection> pc, bool report_ready);
  void fail_establishment(const Error& e);

  // API.
  void set_on_ready(Connection::StateHandler h);
  void set_on_establishment_error(Connection::ErrorHandler h);
  MessageRef send(Bytes data, const MessageProperties& props, bool is_end);
  void receive(Connection::ReceiveHandler h);
  std::shared_ptr<ConnectionImpl> clone(Connection::ErrorHandler on_error);
  void close();
  void abort();
  void set_property(std::string_view key, PropertyValue value);
  void apply_dscp();

  /// Message given to initiate_with_send.
  void queue_initial(Bytes data, const MessageProperties& props);

  std::shared_ptr<SystemCore> core;
  EventLoop& loop;
  ConnectionState state = ConnectionState::establishing;
  std::shared_ptr<ConnectionGroup> group;
  std::vector<FramerFactory> framer_factories;
  TransportProperties tp;
  std::unique_ptr<FramerChain> chain;
  std::shared_ptr<ProtocolConnection> pc;
  std::shared_ptr<Race> race;
  std::optional<RaceTrace> trace;

  Connection::StateHandler on_ready;
  Connection::ErrorHandler on_establishment_error;
  Connection::MessageHandler on_sent;
  Connection::MessageErrorHandler on_send_error;
  Connection::MessageHandler on_expired;
  Connection::StateHandler on_closed;
  Connection::ErrorHandler on_connection_error;

  struct Outgoing {
    std::vector<MessageRef> refs;
    Bytes data;
    MessageProperties props;
    std::optional<TimePoint> deadline;
  };
  struct Inbound {
    Bytes data;
    MessageContext ctx;
  };

  std::deque<Outgoing> send_queue;
  std::optional<Outgoing> partial;
  std::deque<Connection::ReceiveHandler> receive_requests;
  std::deque<Inbound> inbound;
  std::size_t received_events = 0;

 private:
  enum class Outcome { none, ready, failed };

  void emit(std::function<void(Connection&)> fn);
  void report_establishment();
  void pump();
  void expire_queued();
  void on_data(ByteView data, const MessageContext& ctx, bool eom);
  void on_pc_closed(const Error* e);
  void match_receives();
  void fail_queued(const Error& e);
  void finish(std::optional<Error> error, const Error& queued_error);
  std::optional<TimePoint> deadline_for(const MessageProperties& props) const;

  Outcome outcome_ = Outcome::none;
  std::optional<Error> establishment_error_;
  bool outcome_reported_ = false;
  bool pumping_ = false;
  bool repump_ = false;
  std::optional<TimerId> expiry_timer_;
  std::optional<TimePoint> expiry_at_;
  std::shared_ptr<ProtocolConnection> pending_connector_;
};

/// Creates a connection, registers it with its group (a fresh one when null)
/// and hands ownership to the core.
std::shared_ptr<ConnectionImpl> make_connection(const std::shared_ptr<SystemCore>& core,
                                                std::vector<FramerFactory> framers, TransportProperties tp,
                                                std::shared_ptr<ConnectionGroup> group);

class ListenerImpl : public std::enable_shared_from_this<ListenerImpl> {
 public:
  ListenerImpl(std::shared_ptr<SystemCore> core, std::vector<FramerFactory> framers, TransportProperties tp,
               std::vector<ProtocolId> protocols)
      : core(std::move(core)), framers(std::move(framers)), tp(std::move(tp)), protocols(std::move(protocols)) {}

  void bind(std::uint16_t port);
  void set_handler(Listener::ConnectionHandler h);
  void stop();

  std::shared_ptr<SystemCore> core;
  std::vector<FramerFactory> framers;
  TransportProperties tp;
  std::vector<ProtocolId> protocols;
  std::unique_ptr<ProtocolListener> listener;
  Listener::ConnectionHandler handler;
  std::deque<std::shared_ptr<ConnectionImpl>> held;
  bool active = false;

 private:
  void accepted(std::shared_ptr<ProtocolConnection> pc);
  void flush_held();
};

}  // namespace taps
