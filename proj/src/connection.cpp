#include <algorithm>

#include "core.hpp"

namespace taps {

std::string_view to_string(ConnectionState s) noexcept {
  switch (s) {
    case ConnectionState::establishing: return "Establishing";
    case ConnectionState::established: return "Established";
    case ConnectionState::closing: return "Closing";
    case ConnectionState::closed: return "Closed";
  }
  return "?";
}

std::vector<std::shared_ptr<ConnectionImpl>> ConnectionGroup::live_members() {
  std::vector<std::shared_ptr<ConnectionImpl>> out;
  std::erase_if(members, [](const std::weak_ptr<ConnectionImpl>& w) { return w.expired(); });
  for (auto& w : members) {
    if (auto m = w.lock()) out.push_back(std::move(m));
  }
  return out;
}

std::shared_ptr<ConnectionImpl> make_connection(const std::shared_ptr<SystemCore>& core,
                                                std::vector<FramerFactory> framers, TransportProperties tp,
                                                std::shared_ptr<ConnectionGroup> group) {
  if (!group) {
    group = std::make_shared<ConnectionGroup>();
    group->id = core->next_group_id++;
  }
  auto impl = std::make_shared<ConnectionImpl>(core, std::move(framers), std::move(tp), group);
  group->members.push_back(impl);
  core->adopt(impl);
  return impl;
}

ConnectionImpl::ConnectionImpl(std::shared_ptr<SystemCore> c, std::vector<FramerFactory> framers,
                               TransportProperties props, std::shared_ptr<ConnectionGroup> g)
    : core(std::move(c)),
      loop(core->loop()),
      group(std::move(g)),
      framer_factories(std::move(framers)),
      tp(std::move(props)),
      chain(std::make_unique<FramerChain>(framer_factories, core->config.max_message_bytes)) {}

void ConnectionImpl::emit(std::function<void(Connection&)> fn) {
  auto self = shared_from_this();
  loop.post([self, fn = std::move(fn)] {
    Connection c(self);
    fn(c);
  });
}

// ---------------------------------------------------------------------------
// Establishment

void ConnectionImpl::start_race(std::vector<CandidateStack> candidates) {
  std::weak_ptr<ConnectionImpl> weak = shared_from_this();
  race = std::make_shared<Race>(core->backend, core->cache, std::move(candidates), core->config.race,
                                [weak](std::shared_ptr<ProtocolConnection> winner, const Error* err) {
                                  auto self = weak.lock();
                                  if (!self) {
                                    if (winner) winner->dismiss();
                                    return;
                                  }
                                  if (err) {
                                    self->fail_establishment(*err);
                                  } else {
                                    self->attach(std::move(winner), true);
                                  }
                                });
  race->start();
}

void ConnectionImpl::attach(std::shared_ptr<ProtocolConnection> p, bool report_ready) {
  if (state == ConnectionState::closed) {
    p->dismiss();
    return;
  }
  pending_connector_.reset();
  pc = std::move(p);
  std::weak_ptr<ConnectionImpl> weak = shared_from_this();
  ProtocolConnection::Handlers h;
  h.on_data = [weak](ByteView d, const MessageContext& ctx, bool eom) {
    if (auto s = weak.lock()) s->on_data(d, ctx, eom);
  };
  h.on_writable = [weak] {
    if (auto s = weak.lock()) s->pump();
  };
  h.on_closed = [weak](const Error* e) {
    if (auto s = weak.lock()) s->on_pc_closed(e);
  };
  pc->set_handlers(std::move(h));
  try {
    pc->activate();
    chain->start();
  } catch (const Error& e) {
    pc->abort();
    fail_establishment(e);
    return;
  }
  apply_dscp();
  state = ConnectionState::established;
  if (report_ready) {
    outcome_ = Outcome::ready;
    report_establishment();
  }
  pump();
}

void ConnectionImpl::fail_establishment(const Error& e) {
  if (state == ConnectionState::closed) return;
  auto self = shared_from_this();
  state = ConnectionState::closed;
  outcome_ = Outcome::failed;
  establishment_error_ = e;
  fail_queued(Error(Errc::establishment_failed, e.what()));
  report_establishment();
  core->release(self);
}

void ConnectionImpl::report_establishment() {
  if (outcome_reported_) return;
  if (outcome_ == Outcome::ready && on_ready) {
    outcome_reported_ = true;
    emit([](Connection& c) {
      if (c.impl()->on_ready) c.impl()->on_ready(c);
    });
  } else if (outcome_ == Outcome::failed && on_establishment_error) {
    outcome_reported_ = true;
    emit([e = *establishment_error_](Connection& c) {
      if (c.impl()->on_establishment_error) c.impl()->on_establishment_error(c, e);
    });
  }
}

void ConnectionImpl::set_on_ready(Connection::StateHandler h) {
  on_ready = std::move(h);
  report_establishment();
}

void ConnectionImpl::set_on_establishment_error(Connection::ErrorHandler h) {
  on_establishment_error = std::move(h);
  report_establishment();
}

// ---------------------------------------------------------------------------
// Sending

std::optional<TimePoint> ConnectionImpl::deadline_for(const MessageProperties& props) const {
  if (!props.lifetime_ms) return std::nullopt;
  return loop.now() + std::chrono::milliseconds(*props.lifetime_ms);
}

void ConnectionImpl::queue_initial(Bytes data, const MessageProperties& props) {
  const MessageRef ref = core->next_message_ref++;
  if (state == ConnectionState::closed) {
    emit([ref](Connection& c) {
      if (c.impl()->on_send_error) {
        c.impl()->on_send_error(c, ref, Error(Errc::establishment_failed, "connection failed before sending"));
      }
    });
    return;
  }
  send_queue.push_back(Outgoing{{ref}, std::move(data), props, deadline_for(props)});
  pump();
}

MessageRef ConnectionImpl::send(Bytes data, const MessageProperties& props, bool is_end) {
  if (state != ConnectionState::established) {
    throw Error(Errc::not_established, std::string("send in state ") + std::string(to_string(state)));
  }
  if (data.empty() && !partial && !is_end) throw Error(Errc::invalid_message, "empty partial message");
  if (data.empty() && !partial) throw Error(Errc::invalid_message, "empty message");
  const MessageRef ref = core->next_message_ref++;
  if (partial) {
    append(partial->data, data);
    partial->refs.push_back(ref);
  } else {
    partial = Outgoing{{ref}, std::move(data), props, deadline_for(props)};
  }
  if (!is_end) return ref;
  send_queue.push_back(std::move(*partial));
  partial.reset();
  pump();
  return ref;
}

void ConnectionImpl::pump() {
  if (pumping_) {
    repump_ = true;
    return;
  }
  auto self = shared_from_this();
  pumping_ = true;
  do {
    repump_ = false;
    while (pc && !send_queue.empty() &&
           (state == ConnectionState::established || state == ConnectionState::closing)) {
      if (!pc->can_accept()) break;
      Outgoing m = std::move(send_queue.front());
      send_queue.pop_front();
      MessageContext ctx;
      ctx.properties = m.props;
      ctx.message_id = m.refs.front();
      ctx.stream_id = pc->stream_id();
      std::optional<Error> failure;
      try {
        const Bytes wire = chain->frame_outbound(m.data, ctx, true);
        pc->send(wire, m.props);
      } catch (const Error& e) {
        failure = e;
      } catch (const std::exception& e) {
        failure = Error(Errc::framer_error, e.what());
      }
      for (MessageRef ref : m.refs) {
        if (failure) {
          emit([ref, e = *failure](Connection& c) {
            if (c.impl()->on_send_error) c.impl()->on_send_error(c, ref, e);
          });
        } else {
          emit([ref](Connection& c) {
            if (c.impl()->on_sent) c.impl()->on_sent(c, ref);
          });
        }
      }
    }
  } while (repump_);
  pumping_ = false;
  expire_queued();
  if (state == ConnectionState::closing && send_queue.empty()) {
    if (pc) pc->close();
    finish(std::nullopt, Error(Errc::closed, "connection closed"));
  }
}

void ConnectionImpl::expire_queued() {
  if (!pc || send_queue.empty() || !supports_expiry(pc->protocol())) {
    if (expiry_timer_) {
      loop.cancel(*expiry_timer_);
      expiry_timer_.reset();
    }
    return;
  }
  const TimePoint now = loop.now();
  std::optional<TimePoint> earliest;
  for (auto it = send_queue.begin(); it != send_queue.end();) {
    if (it->deadline && *it->deadline <= now) {
      for (MessageRef ref : it->refs) {
        emit([ref](Connection& c) {
          if (c.impl()->on_expired) c.impl()->on_expired(c, ref);
        });
      }
      it = send_queue.erase(it);
      continue;
    }
    if (it->deadline && (!earliest || *it->deadline < *earliest)) earliest = it->deadline;
    ++it;
  }
  if (expiry_timer_ && expiry_at_ == earliest) return;
  if (expiry_timer_) {
    loop.cancel(*expiry_timer_);
    expiry_timer_.reset();
  }
  if (!earliest) return;
  expiry_at_ = earliest;
  std::weak_ptr<ConnectionImpl> weak = shared_from_this();
  expiry_timer_ = loop.call_after(*earliest - now, [weak] {
    if (auto s = weak.lock()) {
      s->expiry_timer_.reset();
      s->pump();
    }
  });
}

void ConnectionImpl::fail_queued(const Error& e) {
  std::vector<MessageRef> refs;
  if (partial) {
    refs.insert(refs.end(), partial->refs.begin(), partial->refs.end());
    partial.reset();
  }
  for (auto& m : send_queue) refs.insert(refs.end(), m.refs.begin(), m.refs.end());
  send_queue.clear();
  for (MessageRef ref : refs) {
    emit([ref, e](Connection& c) {
      if (c.impl()->on_send_error) c.impl()->on_send_error(c, ref, e);
    });
  }
}

// ---------------------------------------------------------------------------
// Receiving

void ConnectionImpl::on_data(ByteView data, const MessageContext& ctx, bool eom) {
  if (state == ConnectionState::closed) return;
  try {
    chain->on_inbound(data, ctx, eom, [this](Bytes msg, const MessageContext& mctx) {
      inbound.push_back(Inbound{std::move(msg), mctx});
    });
  } catch (const Error& e) {
    if (pc) pc->abort();
    finish(e, Error(Errc::aborted, e.what()));
    return;
  } catch (const std::exception& e) {
    if (pc) pc->abort();
    const Error err(Errc::framer_error, e.what());
    finish(err, err);
    return;
  }
  match_receives();
}

void ConnectionImpl::receive(Connection::ReceiveHandler h) {
  if (state == ConnectionState::closed && inbound.empty()) {
    throw Error(Errc::not_established, "receive on a closed connection");
  }
  receive_requests.push_back(std::move(h));
  match_receives();
}

void ConnectionImpl::match_receives() {
  while (!receive_requests.empty() && !inbound.empty()) {
    auto h = std::move(receive_requests.front());
    receive_requests.pop_front();
    auto msg = std::make_shared<Inbound>(std::move(inbound.front()));
    inbound.pop_front();
    ++received_events;
    emit([h = std::move(h), msg](Connection& c) {
      if (h) h(c, msg->data, msg->ctx, true);
    });
  }
}

// ---------------------------------------------------------------------------
// Teardown

void ConnectionImpl::on_pc_closed(const Error* e) {
  if (state == ConnectionState::closed) return;
  if (e) {
    finish(*e, Error(Errc::carrier_closed, e->what()));
  } else {
    finish(std::nullopt, Error(Errc::carrier_closed, "closed by peer"));
  }
}

void ConnectionImpl::finish(std::optional<Error> error, const Error& queued_error) {
  if (state == ConnectionState::closed) return;
  auto self = shared_from_this();
  state = ConnectionState::closed;
  if (expiry_timer_) {
    loop.cancel(*expiry_timer_);
    expiry_timer_.reset();
  }
  fail_queued(queued_error);
  if (chain->started() && !chain->stopped()) chain->stop();
  if (pc) pc->set_handlers({});
  if (error) {
    emit([e = *error](Connection& c) {
      if (c.impl()->on_connection_error) c.impl()->on_connection_error(c, e);
    });
  } else {
    emit([](Connection& c) {
      if (c.impl()->on_closed) c.impl()->on_closed(c);
    });
  }
  core->release(self);
}

void ConnectionImpl::close() {
  switch (state) {
    case ConnectionState::closed:
    case ConnectionState::closing:
      return;
    case ConnectionState::establishing:
      if (race) race->cancel();
      outcome_reported_ = true;
      finish(std::nullopt, Error(Errc::closed, "closed before establishment"));
      return;
    case ConnectionState::established:
      state = ConnectionState::closing;
      if (partial) {
        const Error e(Errc::invalid_message, "partial message never finished");
        for (MessageRef ref : partial->refs) {
          emit([ref, e](Connection& c) {
            if (c.impl()->on_send_error) c.impl()->on_send_error(c, ref, e);
          });
        }
        partial.reset();
      }
      pump();
      return;
  }
}

void ConnectionImpl::abort() {
  if (state == ConnectionState::closed) return;
  if (state == ConnectionState::establishing) {
    if (race) race->cancel();
    outcome_reported_ = true;
  }
  if (pc) pc->abort();
  finish(std::nullopt, Error(Errc::aborted, "connection aborted"));
}

// ---------------------------------------------------------------------------
// Groups

std::shared_ptr<ConnectionImpl> ConnectionImpl::clone(Connection::ErrorHandler on_error) {
  auto c = make_connection(core, framer_factories, tp, group);
  c->race.reset();
  auto clone_failed = [c, on_error](const std::string& why) {
    c->outcome_reported_ = true;
    c->state = ConnectionState::closed;
    c->core->release(c);
    const Error e(Errc::clone_failed, why);
    c->emit([on_error, e](Connection& conn) {
      if (on_error) on_error(conn, e);
    });
  };
  if (state != ConnectionState::established || !pc) {
    clone_failed(std::string("cannot clone a connection in state ") + std::string(to_string(state)));
    return c;
  }
  std::shared_ptr<ProtocolConnection> sibling;
  try {
    sibling = pc->open_sibling_stream();
  } catch (const Error& e) {
    clone_failed(e.what());
    return c;
  }
  if (sibling) {
    c->attach(std::move(sibling), true);
    return c;
  }
  std::shared_ptr<ProtocolConnection> fresh;
  try {
    fresh = make_connector(pc->protocol(), core->backend, pc->remote());
  } catch (const Error& e) {
    clone_failed(e.what());
    return c;
  }
  std::weak_ptr<ConnectionImpl> weak = c;
  std::weak_ptr<ProtocolConnection> wpc = fresh;
  ProtocolConnection::Handlers h;
  h.on_ready = [weak, wpc, this_loop = &loop] {
    this_loop->post([weak, wpc] {
      auto s = weak.lock();
      auto p = wpc.lock();
      if (s && p && s->state == ConnectionState::establishing) s->attach(p, true);
    });
  };
  h.on_establishment_error = [weak, wpc, on_error, this_loop = &loop](const Error& e) {
    this_loop->post([weak, wpc, on_error, e] {
      auto s = weak.lock();
      if (!s || s->state != ConnectionState::establishing) return;
      s->outcome_reported_ = true;
      s->state = ConnectionState::closed;
      s->pending_connector_.reset();
      s->core->release(s);
      const Error err(Errc::clone_failed, e.what());
      s->emit([on_error, err](Connection& conn) {
        if (on_error) on_error(conn, err);
      });
    });
  };
  fresh->set_handlers(std::move(h));
  c->pending_connector_ = fresh;
  fresh->start();
  return c;
}

void ConnectionImpl::set_property(std::string_view key, PropertyValue value) {
  if (state == ConnectionState::closed) throw Error(Errc::closed, "connection is closed");
  group->properties->set(key, std::move(value));
  if (key == ConnectionProperties::capacity_profile_key) {
    for (auto& m : group->live_members()) m->apply_dscp();
  }
}

void ConnectionImpl::apply_dscp() {
  if (pc && state != ConnectionState::closed) pc->set_dscp(dscp_for_profile(group->properties->capacity_profile()));
}

// ---------------------------------------------------------------------------
// Handle

ConnectionImpl& Connection::checked() const {
  if (!impl_) throw Error(Errc::closed, "empty connection handle");
  return *impl_;
}

void Connection::on_ready(StateHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->set_on_ready(std::move(h)); });
}
void Connection::on_establishment_error(ErrorHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->set_on_establishment_error(std::move(h)); });
}
void Connection::on_sent(MessageHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->on_sent = std::move(h); });
}
void Connection::on_send_error(MessageErrorHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->on_send_error = std::move(h); });
}
void Connection::on_expired(MessageHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->on_expired = std::move(h); });
}
void Connection::on_closed(StateHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->on_closed = std::move(h); });
}
void Connection::on_connection_error(ErrorHandler h) {
  auto impl = impl_;
  checked().loop.dispatch([impl, h = std::move(h)]() mutable { impl->on_connection_error = std::move(h); });
}

MessageRef Connection::send(Bytes data, const MessageProperties& props, bool is_end) {
  return checked().send(std::move(data), props, is_end);
}

MessageRef Connection::send(std::string_view text, const MessageProperties& props, bool is_end) {
  return send(to_bytes(text), props, is_end);
}

void Connection::receive(ReceiveHandler handler) { checked().receive(std::move(handler)); }

Connection Connection::clone(ErrorHandler on_error) { return Connection(checked().clone(std::move(on_error))); }

void Connection::close() {
  auto impl = impl_;
  checked().loop.dispatch([impl] { impl->close(); });
}

void Connection::abort() {
  auto impl = impl_;
  checked().loop.dispatch([impl] { impl->abort(); });
}

ConnectionState Connection::state() const { return checked().state; }
std::uint64_t Connection::group_id() const { return checked().group->id; }
std::size_t Connection::group_size() const { return checked().group->live_members().size(); }

void Connection::set_property(std::string_view key, PropertyValue value) {
  checked().set_property(key, std::move(value));
}

std::optional<PropertyValue> Connection::property(std::string_view key) const {
  return checked().group->properties->get(key);
}

CapacityProfile Connection::capacity_profile() const { return checked().group->properties->capacity_profile(); }

std::optional<ProtocolId> Connection::protocol() const {
  auto& c = checked();
  if (!c.pc) return std::nullopt;
  return c.pc->protocol();
}

std::optional<Endpoint> Connection::remote() const {
  auto& c = checked();
  if (!c.pc) return std::nullopt;
  return c.pc->remote();
}

std::optional<std::uint32_t> Connection::stream_id() const {
  auto& c = checked();
  if (!c.pc) return std::nullopt;
  return c.pc->stream_id();
}

const RaceTrace* Connection::race_trace() const {
  auto& c = checked();
  return c.race ? &c.race->trace() : nullptr;
}

std::size_t Connection::pending_receives() const { return checked().receive_requests.size(); }
std::size_t Connection::buffered_messages() const { return checked().inbound.size(); }

}  // namespace taps
