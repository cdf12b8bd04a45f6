#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

namespace taps {

/// Qualifier attached to a selection property. Require and Prohibit are hard
/// constraints; Prefer and Avoid only influence candidate scoring.
enum class PreferenceLevel { require, prefer, ignore, avoid, prohibit };

enum class SelectionProperty {
  reliability,
  preserve_msg_boundaries,
  preserve_order,
  per_msg_reliability,
  multistreaming,
  zero_rtt,
};

inline constexpr std::array<SelectionProperty, 6> all_selection_properties = {
    SelectionProperty::reliability,         SelectionProperty::preserve_msg_boundaries,
    SelectionProperty::preserve_order,      SelectionProperty::per_msg_reliability,
    SelectionProperty::multistreaming,      SelectionProperty::zero_rtt,
};

inline constexpr std::array<PreferenceLevel, 5> all_preference_levels = {
    PreferenceLevel::require, PreferenceLevel::prefer, PreferenceLevel::ignore,
    PreferenceLevel::avoid,   PreferenceLevel::prohibit,
};

std::string_view to_string(PreferenceLevel level) noexcept;
std::string_view to_string(SelectionProperty prop) noexcept;

/// One row of the protocol feature matrix.
struct FeatureSet {
  bool reliable = false;
  bool preserves_msg_boundaries = false;
  bool preserves_order = false;
  bool per_msg_reliability = false;
  bool multistreaming = false;
  bool zero_rtt = false;

  bool has(SelectionProperty prop) const noexcept;
  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

/// Selection properties: a total map from every SelectionProperty to a level,
/// plus an optional interface preference.
class TransportProperties {
 public:
  /// Defaults: reliable ordered stream, preferring boundaries and multistreaming.
  TransportProperties();

  PreferenceLevel get(SelectionProperty prop) const noexcept {
    return prefs_[static_cast<std::size_t>(prop)];
  }
  TransportProperties& set(SelectionProperty prop, PreferenceLevel level) noexcept {
    prefs_[static_cast<std::size_t>(prop)] = level;
    return *this;
  }

  TransportProperties& require(SelectionProperty p) noexcept { return set(p, PreferenceLevel::require); }
  TransportProperties& prefer(SelectionProperty p) noexcept { return set(p, PreferenceLevel::prefer); }
  TransportProperties& ignore(SelectionProperty p) noexcept { return set(p, PreferenceLevel::ignore); }
  TransportProperties& avoid(SelectionProperty p) noexcept { return set(p, PreferenceLevel::avoid); }
  TransportProperties& prohibit(SelectionProperty p) noexcept { return set(p, PreferenceLevel::prohibit); }

  void set_interface(std::string name, PreferenceLevel level) {
    interface_pref_ = std::pair{std::move(name), level};
  }
  const std::optional<std::pair<std::string, PreferenceLevel>>& interface_preference() const noexcept {
    return interface_pref_;
  }

  friend bool operator==(const TransportProperties&, const TransportProperties&) = default;

 private:
  std::array<PreferenceLevel, all_selection_properties.size()> prefs_{};
  std::optional<std::pair<std::string, PreferenceLevel>> interface_pref_;
};

inline TransportProperties new_transport_properties() { return TransportProperties{}; }

/// Value-returning form of TransportProperties::set.
inline TransportProperties set_preference(TransportProperties tp, SelectionProperty prop,
                                          PreferenceLevel level) {
  tp.set(prop, level);
  return tp;
}

struct MatchResult {
  bool eligible = false;
  int score = 0;
  std::optional<SelectionProperty> excluded_by;

  static MatchResult excluded(SelectionProperty p) { return {false, 0, p}; }
  static MatchResult with_score(int s) { return {true, s, std::nullopt}; }
};

/// Hard constraints first (Require absent / Prohibit present excludes), then
/// score = #Prefer present - #Avoid present.
MatchResult satisfies(const FeatureSet& features, const TransportProperties& tp) noexcept;

enum class CapacityProfile { default_profile, scavenger, low_latency_interactive, constant_rate_streaming };

std::string_view to_string(CapacityProfile p) noexcept;
std::optional<CapacityProfile> capacity_profile_from_string(std::string_view s) noexcept;

/// 6-bit DiffServ code point for a capacity profile.
constexpr std::uint8_t dscp_for_profile(CapacityProfile p) noexcept {
  switch (p) {
    case CapacityProfile::default_profile: return 0;
    case CapacityProfile::scavenger: return 1;
    case CapacityProfile::low_latency_interactive: return 46;
    case CapacityProfile::constant_rate_streaming: return 34;
  }
  return 0;
}

using PropertyValue = std::variant<bool, std::int64_t, double, std::string, CapacityProfile>;

/// Properties that may change while a connection is active. Shared by every
/// member of a connection group.
class ConnectionProperties {
 public:
  static constexpr std::string_view capacity_profile_key = "capacity_profile";

  CapacityProfile capacity_profile() const noexcept { return capacity_profile_; }
  void set_capacity_profile(CapacityProfile p) noexcept { capacity_profile_ = p; }

  /// Generic setter. The capacity_profile key accepts a CapacityProfile or its
  /// string name; any other key is stored verbatim.
  void set(std::string_view key, PropertyValue value);
  std::optional<PropertyValue> get(std::string_view key) const;

  const std::map<std::string, PropertyValue, std::less<>>& entries() const noexcept { return entries_; }

  friend bool operator==(const ConnectionProperties&, const ConnectionProperties&) = default;

 private:
  CapacityProfile capacity_profile_ = CapacityProfile::default_profile;
  std::map<std::string, PropertyValue, std::less<>> entries_;
};

/// Per-message properties. An unset lifetime means infinite.
struct MessageProperties {
  std::optional<std::uint64_t> lifetime_ms;
  bool ordered = true;
  bool reliable = true;
};

/// Opaque placeholder; never interpreted.
struct SecurityParameters {};

}  // namespace taps
