#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "taps/error.hpp"
#include "taps/event_loop.hpp"
#include "taps/network.hpp"
#include "taps/properties.hpp"
#include "taps/protocol.hpp"

namespace taps {

struct CandidateStack {
  ProtocolId protocol = ProtocolId::tcp;
  Endpoint endpoint;
  int score = 0;
  /// Position in race order.
  int rank = 0;
};

struct RaceConfig {
  std::int64_t stagger_ms = 250;
  std::int64_t timeout_ms = 5000;

  /// Throws Error(config_error).
  void validate() const;
};

enum class CacheOutcome { supported, unsupported };

class RaceCache {
 public:
  explicit RaceCache(Duration ttl = std::chrono::seconds(600)) : ttl_(ttl) {}

  void record(const Endpoint& remote, ProtocolId p, CacheOutcome outcome, TimePoint now);
  /// Expired entries read as absent.
  std::optional<CacheOutcome> lookup(const Endpoint& remote, ProtocolId p, TimePoint now) const;
  Duration ttl() const noexcept { return ttl_; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    CacheOutcome outcome;
    TimePoint expiry;
  };
  Duration ttl_;
  std::map<std::tuple<std::string, std::uint16_t, ProtocolId>, Entry> entries_;
};

inline void cache_record(RaceCache& cache, const Endpoint& remote, ProtocolId p, CacheOutcome outcome,
                         TimePoint now) {
  cache.record(remote, p, outcome, now);
}
inline std::optional<CacheOutcome> cache_lookup(const RaceCache& cache, const Endpoint& remote, ProtocolId p,
                                                TimePoint now) {
  return cache.lookup(remote, p, now);
}

/// System-wide restrictions that override application preferences.
struct SystemPolicy {
  std::set<ProtocolId> prohibited_protocols;
  std::set<std::string> prohibited_interfaces;
  std::optional<std::string> forced_interface;

  bool permits(ProtocolId p) const { return prohibited_protocols.count(p) == 0; }
  /// False if the interface constraints of `tp` cannot be met under this policy.
  bool permits_interface(const TransportProperties& tp) const;

  /// key=value lines; '#' starts a comment. Throws Error(policy_error).
  static SystemPolicy parse(std::string_view text);
  static SystemPolicy load_file(const std::string& path);
  /// Reads the file named by TAPS_POLICY_FILE, or returns an empty policy.
  static SystemPolicy from_environment();
};

inline constexpr const char* policy_env_var = "TAPS_POLICY_FILE";

/// Eligible, policy-permitted (protocol, endpoint) pairs, ordered by
/// descending score then protocol rank. Cached failures move to the end,
/// a cached success to the front. Throws Error(no_candidates).
std::vector<CandidateStack> derive_candidates(const TransportProperties& tp, const std::vector<ProtocolId>& protocols,
                                              const SystemPolicy& policy, const RaceCache& cache,
                                              const std::vector<Endpoint>& remotes, TimePoint now);

struct RaceAttempt {
  enum class Outcome { pending, succeeded, failed, timed_out, cancelled };
  CandidateStack candidate;
  TimePoint started{0};
  std::optional<TimePoint> finished;
  Outcome outcome = Outcome::pending;
  std::string detail;
};

std::string_view to_string(RaceAttempt::Outcome o);

struct RaceTrace {
  std::vector<CandidateStack> candidates;
  std::vector<RaceAttempt> attempts;
  std::optional<std::size_t> winner;  // index into attempts

  std::size_t attempts_for(ProtocolId p) const;
  std::optional<ProtocolId> winning_protocol() const;
  /// One line per attempt.
  std::string describe() const;
};

/// Staggered connection racing over a candidate list. Attempt k starts
/// k * stagger after the first unless an attempt already won; when every
/// started attempt has failed the next one starts at once.
class Race : public std::enable_shared_from_this<Race> {
 public:
  using Done = std::function<void(std::shared_ptr<ProtocolConnection> winner, const Error* error)>;

  Race(NetworkBackend& backend, RaceCache& cache, std::vector<CandidateStack> candidates, RaceConfig cfg, Done done);

  void start();
  /// Aborts every attempt; `done` is not called.
  void cancel();
  bool finished() const noexcept { return finished_; }
  const RaceTrace& trace() const noexcept { return trace_; }

 private:
  struct Live {
    std::shared_ptr<ProtocolConnection> pc;
    std::optional<TimerId> timeout;
  };

  void start_next();
  void schedule_next();
  void on_success(std::size_t i);
  void on_failure(std::size_t i, const Error& e, RaceAttempt::Outcome how);
  void conclude_failure();
  bool all_started_failed() const;

  NetworkBackend& backend_;
  RaceCache& cache_;
  RaceConfig cfg_;
  Done done_;
  RaceTrace trace_;
  std::vector<Live> live_;
  std::size_t next_ = 0;
  std::optional<TimerId> stagger_timer_;
  bool finished_ = false;
};

}  // namespace taps
