#include "taps/racing.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace taps {

void RaceConfig::validate() const {
  if (stagger_ms < 0) throw Error(Errc::config_error, "stagger_ms must be non-negative");
  if (timeout_ms <= 0) throw Error(Errc::config_error, "timeout_ms must be positive");
  if (stagger_ms > timeout_ms) throw Error(Errc::config_error, "stagger_ms must not exceed timeout_ms");
}

void RaceCache::record(const Endpoint& remote, ProtocolId p, CacheOutcome outcome, TimePoint now) {
  entries_[{remote.address, remote.port, p}] = Entry{outcome, now + ttl_};
}

std::optional<CacheOutcome> RaceCache::lookup(const Endpoint& remote, ProtocolId p, TimePoint now) const {
  auto it = entries_.find({remote.address, remote.port, p});
  if (it == entries_.end() || now >= it->second.expiry) return std::nullopt;
  return it->second.outcome;
}

bool SystemPolicy::permits_interface(const TransportProperties& tp) const {
  if (forced_interface && prohibited_interfaces.count(*forced_interface)) return false;
  const auto& pref = tp.interface_preference();
  if (!pref) return true;
  const auto& [name, level] = *pref;
  const std::string effective = forced_interface.value_or(name);
  if (level == PreferenceLevel::require) {
    return effective == name && !prohibited_interfaces.count(name);
  }
  if (level == PreferenceLevel::prohibit) return effective != name || !forced_interface;
  return true;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

SystemPolicy SystemPolicy::parse(std::string_view text) {
  SystemPolicy p;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::policy_error, "policy line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (value.empty()) throw Error(Errc::policy_error, "policy line " + std::to_string(lineno) + ": empty value");
    if (key == "prohibit_protocol") {
      try {
        p.prohibited_protocols.insert(protocol_from_string(value));
      } catch (const Error& e) {
        throw Error(Errc::policy_error, "policy line " + std::to_string(lineno) + ": " + e.what());
      }
    } else if (key == "prohibit_interface") {
      p.prohibited_interfaces.insert(value);
    } else if (key == "force_interface") {
      p.forced_interface = value;
    } else {
      throw Error(Errc::policy_error, "policy line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  return p;
}

SystemPolicy SystemPolicy::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(Errc::policy_error, "cannot read policy file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

SystemPolicy SystemPolicy::from_environment() {
  const char* path = std::getenv(policy_env_var);
  if (!path || !*path) return {};
  return load_file(path);
}

std::vector<CandidateStack> derive_candidates(const TransportProperties& tp, const std::vector<ProtocolId>& protocols,
                                              const SystemPolicy& policy, const RaceCache& cache,
                                              const std::vector<Endpoint>& remotes, TimePoint now) {
  std::vector<CandidateStack> out;
  if (policy.permits_interface(tp)) {
    for (std::size_t ei = 0; ei < remotes.size(); ++ei) {
      for (ProtocolId p : protocols) {
        const MatchResult m = satisfies(features(p), tp);
        if (!m.eligible || !policy.permits(p)) continue;
        out.push_back(CandidateStack{p, remotes[ei], m.score, 0});
      }
    }
  }
  if (out.empty()) throw Error(Errc::no_candidates, "no protocol satisfies the transport properties and system policy");

  // Endpoint order is kept as the last tie-break by the stable sort.
  std::stable_sort(out.begin(), out.end(), [](const CandidateStack& a, const CandidateStack& b) {
    if (a.score != b.score) return a.score > b.score;
    return protocol_rank(a.protocol) < protocol_rank(b.protocol);
  });
  auto cached = [&](const CandidateStack& c) { return cache.lookup(c.endpoint, c.protocol, now); };
  std::stable_partition(out.begin(), out.end(), [&](const CandidateStack& c) {
    return cached(c) == CacheOutcome::supported;
  });
  std::stable_partition(out.begin(), out.end(), [&](const CandidateStack& c) {
    return cached(c) != CacheOutcome::unsupported;
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i);
  return out;
}

std::string_view to_string(RaceAttempt::Outcome o) {
  switch (o) {
    case RaceAttempt::Outcome::pending: return "pending";
    case RaceAttempt::Outcome::succeeded: return "succeeded";
    case RaceAttempt::Outcome::failed: return "failed";
    case RaceAttempt::Outcome::timed_out: return "timed_out";
    case RaceAttempt::Outcome::cancelled: return "cancelled";
  }
  return "?";
}

std::size_t RaceTrace::attempts_for(ProtocolId p) const {
  return static_cast<std::size_t>(
      std::count_if(attempts.begin(), attempts.end(), [p](const RaceAttempt& a) { return a.candidate.protocol == p; }));
}

std::optional<ProtocolId> RaceTrace::winning_protocol() const {
  if (!winner) return std::nullopt;
  return attempts[*winner].candidate.protocol;
}

std::string RaceTrace::describe() const {
  std::ostringstream os;
  for (const auto& a : attempts) {
    os << "attempt protocol=" << to_string(a.candidate.protocol) << " remote=" << a.candidate.endpoint.to_string()
       << " start=" << to_seconds(a.started) << " outcome=" << to_string(a.outcome);
    if (a.finished) os << " end=" << to_seconds(*a.finished);
    if (!a.detail.empty()) os << " detail=\"" << a.detail << '"';
    os << '\n';
  }
  return os.str();
}

Race::Race(NetworkBackend& backend, RaceCache& cache, std::vector<CandidateStack> candidates, RaceConfig cfg,
           Done done)
    : backend_(backend), cache_(cache), cfg_(cfg), done_(std::move(done)) {
  cfg_.validate();
  trace_.candidates = std::move(candidates);
}

void Race::start() {
  if (trace_.candidates.empty()) {
    finished_ = true;
    const Error e(Errc::no_candidates, "no candidates to race");
    if (done_) done_(nullptr, &e);
    return;
  }
  start_next();
}

void Race::schedule_next() {
  if (next_ >= trace_.candidates.size() || finished_) return;
  std::weak_ptr<Race> weak = weak_from_this();
  stagger_timer_ = backend_.loop().call_after(std::chrono::milliseconds(cfg_.stagger_ms), [weak] {
    if (auto self = weak.lock()) {
      self->stagger_timer_.reset();
      self->start_next();
    }
  });
}

void Race::start_next() {
  if (finished_ || next_ >= trace_.candidates.size()) return;
  if (stagger_timer_) {
    backend_.loop().cancel(*stagger_timer_);
    stagger_timer_.reset();
  }
  const std::size_t i = next_++;
  RaceAttempt attempt;
  attempt.candidate = trace_.candidates[i];
  attempt.started = backend_.loop().now();
  trace_.attempts.push_back(attempt);
  live_.push_back(Live{});

  std::weak_ptr<Race> weak = weak_from_this();
  std::shared_ptr<ProtocolConnection> pc;
  try {
    pc = make_connector(attempt.candidate.protocol, backend_, attempt.candidate.endpoint);
  } catch (const Error& e) {
    on_failure(i, e, RaceAttempt::Outcome::failed);
    return;
  }
  live_[i].pc = pc;
  ProtocolConnection::Handlers h;
  // Outcomes are processed from a fresh loop turn so that the winner's
  // handlers can be replaced safely.
  h.on_ready = [weak, i] {
    if (auto self = weak.lock()) {
      self->backend_.loop().post([weak, i] {
        if (auto s = weak.lock()) s->on_success(i);
      });
    }
  };
  h.on_establishment_error = [weak, i](const Error& e) {
    if (auto self = weak.lock()) {
      self->backend_.loop().post([weak, i, e] {
        if (auto s = weak.lock()) s->on_failure(i, e, RaceAttempt::Outcome::failed);
      });
    }
  };
  pc->set_handlers(std::move(h));
  live_[i].timeout = backend_.loop().call_after(std::chrono::milliseconds(cfg_.timeout_ms), [weak, i] {
    if (auto self = weak.lock()) {
      self->live_[i].timeout.reset();
      self->on_failure(i, Error(Errc::timeout, "attempt timed out"), RaceAttempt::Outcome::timed_out);
    }
  });
  pc->start();
  schedule_next();
}

bool Race::all_started_failed() const {
  return std::all_of(trace_.attempts.begin(), trace_.attempts.end(),
                     [](const RaceAttempt& a) { return a.outcome != RaceAttempt::Outcome::pending; });
}

void Race::on_success(std::size_t i) {
  auto& a = trace_.attempts[i];
  if (finished_ || a.outcome != RaceAttempt::Outcome::pending) return;
  const TimePoint now = backend_.loop().now();
  finished_ = true;
  a.outcome = RaceAttempt::Outcome::succeeded;
  a.finished = now;
  trace_.winner = i;
  cache_.record(a.candidate.endpoint, a.candidate.protocol, CacheOutcome::supported, now);
  if (stagger_timer_) {
    backend_.loop().cancel(*stagger_timer_);
    stagger_timer_.reset();
  }
  for (std::size_t j = 0; j < live_.size(); ++j) {
    if (live_[j].timeout) {
      backend_.loop().cancel(*live_[j].timeout);
      live_[j].timeout.reset();
    }
    if (j == i) continue;
    auto& other = trace_.attempts[j];
    if (other.outcome == RaceAttempt::Outcome::pending) {
      other.outcome = RaceAttempt::Outcome::cancelled;
      other.finished = now;
      // Started earlier yet lost: not worth probing first next time.
      if (j < i) cache_.record(other.candidate.endpoint, other.candidate.protocol, CacheOutcome::unsupported, now);
    }
    if (live_[j].pc) {
      live_[j].pc->set_handlers({});
      live_[j].pc->dismiss();
      live_[j].pc.reset();
    }
  }
  auto winner = std::move(live_[i].pc);
  auto done = std::move(done_);
  if (done) done(std::move(winner), nullptr);
}

void Race::on_failure(std::size_t i, const Error& e, RaceAttempt::Outcome how) {
  auto& a = trace_.attempts[i];
  if (finished_ || a.outcome != RaceAttempt::Outcome::pending) return;
  const TimePoint now = backend_.loop().now();
  a.outcome = how;
  a.finished = now;
  a.detail = e.what();
  cache_.record(a.candidate.endpoint, a.candidate.protocol, CacheOutcome::unsupported, now);
  if (live_[i].timeout) {
    backend_.loop().cancel(*live_[i].timeout);
    live_[i].timeout.reset();
  }
  if (live_[i].pc) {
    live_[i].pc->set_handlers({});
    live_[i].pc->abort();
    live_[i].pc.reset();
  }
  if (!all_started_failed()) return;
  if (next_ < trace_.candidates.size()) {
    start_next();
    return;
  }
  conclude_failure();
}

void Race::conclude_failure() {
  finished_ = true;
  std::string causes;
  for (const auto& a : trace_.attempts) {
    if (!causes.empty()) causes += "; ";
    causes += std::string(to_string(a.candidate.protocol)) + " " + a.candidate.endpoint.to_string() + ": " + a.detail;
  }
  const Error e(Errc::establishment_failed, "all candidates failed (" + causes + ")");
  auto done = std::move(done_);
  if (done) done(nullptr, &e);
}

void Race::cancel() {
  if (finished_) return;
  finished_ = true;
  if (stagger_timer_) {
    backend_.loop().cancel(*stagger_timer_);
    stagger_timer_.reset();
  }
  const TimePoint now = backend_.loop().now();
  for (std::size_t j = 0; j < live_.size(); ++j) {
    if (live_[j].timeout) backend_.loop().cancel(*live_[j].timeout);
    if (trace_.attempts[j].outcome == RaceAttempt::Outcome::pending) {
      trace_.attempts[j].outcome = RaceAttempt::Outcome::cancelled;
      trace_.attempts[j].finished = now;
    }
    if (live_[j].pc) {
      live_[j].pc->set_handlers({});
      live_[j].pc->abort();
    }
  }
  live_.clear();
  done_ = nullptr;
}

}  // namespace taps
