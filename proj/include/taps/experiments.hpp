#pragma once

// Head-of-line blocking and flow-completion-time experiments over netsim,
// driven through the public connection API.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace taps::sim {

struct HolConfig {
  bool ordered = true;
  std::uint64_t seed = 1;
  /// 1-based chunk whose first transmission is dropped; nullopt for no loss.
  std::optional<int> drop_chunk = 2;
};

struct HolDelivery {
  int chunk = 0;
  double t = 0.0;
};

struct HolTrace {
  std::vector<HolDelivery> deliveries;
  /// Arrival at the receiver of the dropped chunk's retransmission.
  std::optional<double> retransmit_arrival_s;

  std::vector<int> order() const;
  std::optional<double> delivered_at(int chunk) const;
  /// `deliver chunk=<k> t=<s>` lines.
  std::string to_text() const;
};

inline constexpr int hol_chunks = 4;
inline constexpr std::size_t hol_chunk_bytes = 1444;  // plus a 4-byte length prefix = one segment

HolTrace run_hol_experiment(const HolConfig& cfg);

enum class FctMode { clone, separate };

std::string_view to_string(FctMode m) noexcept;
/// Throws Error(config_error).
FctMode fct_mode_from_string(std::string_view s);

struct FctConfig {
  std::uint64_t long_bytes = 1'500'000;
  std::uint64_t short_bytes = 100'000;
  double join_after_s = 1.0;
  double rate_bps = 5'000'000.0;
  double delay_ms = 30.0;
  FctMode mode = FctMode::clone;
  std::uint64_t seed = 1;
  /// Bottleneck queue in packets; 0 means one bandwidth-delay product.
  std::size_t queue_packets = 0;

  static FctConfig desk_scale();
  static FctConfig paper_scale();
  /// Throws Error(config_error) on non-positive sizes, rates or a negative
  /// delay or join time.
  void validate() const;
};

struct FctFlow {
  std::string name;  // "long" or "short"
  FctMode mode = FctMode::clone;
  std::uint64_t bytes = 0;
  double start_s = 0.0;
  double completion_s = 0.0;
  double fct_s = 0.0;
};

struct FctReport {
  std::uint64_t seed = 0;
  FctMode mode = FctMode::clone;
  std::vector<FctFlow> flows;

  const FctFlow& flow(std::string_view name) const;
  /// Flow lines only.
  std::string flow_lines() const;
  /// `seed=<n>` header followed by the flow lines.
  std::string to_text() const;
};

/// Throws Error(config_error) for an invalid config, Error(timeout) if a
/// flow does not complete within the simulated time limit.
FctReport run_fct_experiment(const FctConfig& cfg);

/// Percentage by which the clone-mode short flow beats the separate one.
double short_flow_reduction_pct(const FctReport& separate, const FctReport& clone);

}  // namespace taps::sim
