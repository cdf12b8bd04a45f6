#include "taps/preconnection.hpp"

#include "core.hpp"

namespace taps {

struct PreconnectionState {
  std::shared_ptr<SystemCore> core;
  std::optional<LocalEndpoint> local;
  std::optional<RemoteEndpoint> remote;
  TransportProperties tp;
  SecurityParameters security;
  std::vector<FramerFactory> framers;
  bool started = false;

  TransportProperties effective_properties() const {
    TransportProperties out = tp;
    if (local && local->interface && !out.interface_preference()) {
      out.set_interface(*local->interface, PreferenceLevel::require);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Listener

void ListenerImpl::bind(std::uint16_t port) {
  std::weak_ptr<ListenerImpl> weak = shared_from_this();
  listener = std::make_unique<ProtocolListener>(
      core->backend, port, protocols,
      [weak](std::shared_ptr<ProtocolConnection> pc) {
        if (auto self = weak.lock()) {
          self->accepted(std::move(pc));
        } else {
          pc->abort();
        }
      },
      core->config.adapter);
  active = true;
}

void ListenerImpl::accepted(std::shared_ptr<ProtocolConnection> pc) {
  if (!active) {
    pc->abort();
    return;
  }
  auto conn = make_connection(core, framers, tp, nullptr);
  conn->attach(std::move(pc), false);
  held.push_back(std::move(conn));
  flush_held();
}

void ListenerImpl::set_handler(Listener::ConnectionHandler h) {
  handler = std::move(h);
  flush_held();
}

void ListenerImpl::flush_held() {
  if (!handler) return;
  auto self = shared_from_this();
  while (!held.empty()) {
    auto conn = std::move(held.front());
    held.pop_front();
    core->loop().post([self, conn] {
      if (!self->active) {
        conn->abort();
        return;
      }
      if (self->handler) self->handler(Connection(conn));
    });
  }
}

void ListenerImpl::stop() {
  if (!active) return;
  auto self = shared_from_this();
  active = false;
  if (listener) listener->stop();
  for (auto& c : held) c->abort();
  held.clear();
  core->release(self);
}

void Listener::on_connection_received(ConnectionHandler h) {
  if (!impl_) throw Error(Errc::closed, "empty listener handle");
  auto impl = impl_;
  impl->core->loop().dispatch([impl, h = std::move(h)]() mutable { impl->set_handler(std::move(h)); });
}

void Listener::stop() {
  if (!impl_) return;
  auto impl = impl_;
  impl->core->loop().dispatch([impl] { impl->stop(); });
}

bool Listener::active() const { return impl_ && impl_->active; }

std::uint16_t Listener::port() const { return impl_ && impl_->listener ? impl_->listener->port() : 0; }

const std::vector<ProtocolId>& Listener::protocols() const {
  static const std::vector<ProtocolId> none;
  return impl_ ? impl_->protocols : none;
}

// ---------------------------------------------------------------------------
// Preconnection

Preconnection::Preconnection(TransportSystem& system, std::optional<LocalEndpoint> local,
                             std::optional<RemoteEndpoint> remote, TransportProperties tp,
                             SecurityParameters security)
    : state_(std::make_shared<PreconnectionState>()) {
  if (!local && !remote) throw Error(Errc::missing_endpoint, "a preconnection needs a local or remote endpoint");
  state_->core = system.core();
  state_->local = std::move(local);
  state_->remote = std::move(remote);
  state_->tp = std::move(tp);
  state_->security = security;
}

Preconnection& Preconnection::add_framer(FramerFactory factory) {
  if (state_->started) throw Error(Errc::already_started, "framers must be added before initiate or listen");
  state_->framers.push_back(std::move(factory));
  return *this;
}

Connection Preconnection::initiate() {
  auto& st = *state_;
  if (!st.remote || !st.remote->host || !st.remote->port) {
    throw Error(Errc::missing_endpoint, "initiate needs a remote host and port");
  }
  auto& core = st.core;
  const TransportProperties tp = st.effective_properties();
  const auto addresses = core->backend.resolve(*st.remote->host);
  std::vector<Endpoint> remotes;
  for (const auto& a : addresses) remotes.push_back(Endpoint{a, *st.remote->port});

  if (remotes.empty()) {
    // Selection still decides NoCandidates before resolution does.
    derive_candidates(tp, core->config.protocols, core->config.policy, core->cache,
                      {Endpoint{*st.remote->host, *st.remote->port}}, core->loop().now());
    st.started = true;
    auto conn = make_connection(core, st.framers, tp, nullptr);
    conn->fail_establishment(Error(Errc::establishment_failed, "cannot resolve " + *st.remote->host));
    return Connection(conn);
  }

  auto candidates =
      derive_candidates(tp, core->config.protocols, core->config.policy, core->cache, remotes, core->loop().now());
  st.started = true;
  auto conn = make_connection(core, st.framers, tp, nullptr);
  conn->start_race(std::move(candidates));
  return Connection(conn);
}

Connection Preconnection::initiate_with_send(Bytes data, const MessageProperties& props) {
  if (data.empty()) throw Error(Errc::invalid_message, "empty message");
  Connection c = initiate();
  c.impl()->queue_initial(std::move(data), props);
  return c;
}

Listener Preconnection::listen() {
  auto& st = *state_;
  if (!st.local || !st.local->port) throw Error(Errc::missing_endpoint, "listen needs a local port");
  auto& core = st.core;
  const TransportProperties tp = st.effective_properties();
  std::vector<ProtocolId> protocols;
  if (core->config.policy.permits_interface(tp)) {
    for (ProtocolId p : core->config.protocols) {
      if (satisfies(features(p), tp).eligible && core->config.policy.permits(p)) protocols.push_back(p);
    }
  }
  if (protocols.empty()) throw Error(Errc::no_candidates, "no protocol satisfies the transport properties and system policy");
  auto impl = std::make_shared<ListenerImpl>(core, st.framers, tp, protocols);
  impl->bind(*st.local->port);
  st.started = true;
  core->adopt(impl);
  return Listener(impl);
}

void Preconnection::start() { state_->core->loop().run(); }

bool Preconnection::started() const { return state_->started; }
std::size_t Preconnection::framer_count() const { return state_->framers.size(); }
const TransportProperties& Preconnection::transport_properties() const { return state_->tp; }
const std::optional<LocalEndpoint>& Preconnection::local() const { return state_->local; }
const std::optional<RemoteEndpoint>& Preconnection::remote() const { return state_->remote; }

}  // namespace taps
