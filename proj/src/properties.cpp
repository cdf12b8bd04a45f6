#include "taps/properties.hpp"

#include "taps/error.hpp"

namespace taps {

std::string_view to_string(PreferenceLevel level) noexcept {
  switch (level) {
    case PreferenceLevel::require: return "require";
    case PreferenceLevel::prefer: return "prefer";
    case PreferenceLevel::ignore: return "ignore";
    case PreferenceLevel::avoid: return "avoid";
    case PreferenceLevel::prohibit: return "prohibit";
  }
  return "?";
}

std::string_view to_string(SelectionProperty prop) noexcept {
  switch (prop) {
    case SelectionProperty::reliability: return "reliability";
    case SelectionProperty::preserve_msg_boundaries: return "preserve_msg_boundaries";
    case SelectionProperty::preserve_order: return "preserve_order";
    case SelectionProperty::per_msg_reliability: return "per_msg_reliability";
    case SelectionProperty::multistreaming: return "multistreaming";
    case SelectionProperty::zero_rtt: return "zero_rtt";
  }
  return "?";
}

bool FeatureSet::has(SelectionProperty prop) const noexcept {
  switch (prop) {
    case SelectionProperty::reliability: return reliable;
    case SelectionProperty::preserve_msg_boundaries: return preserves_msg_boundaries;
    case SelectionProperty::preserve_order: return preserves_order;
    case SelectionProperty::per_msg_reliability: return per_msg_reliability;
    case SelectionProperty::multistreaming: return multistreaming;
    case SelectionProperty::zero_rtt: return zero_rtt;
  }
  return false;
}

TransportProperties::TransportProperties() {
  set(SelectionProperty::reliability, PreferenceLevel::require);
  set(SelectionProperty::preserve_order, PreferenceLevel::require);
  set(SelectionProperty::preserve_msg_boundaries, PreferenceLevel::prefer);
  set(SelectionProperty::per_msg_reliability, PreferenceLevel::ignore);
  set(SelectionProperty::multistreaming, PreferenceLevel::prefer);
  set(SelectionProperty::zero_rtt, PreferenceLevel::ignore);
}

MatchResult satisfies(const FeatureSet& features, const TransportProperties& tp) noexcept {
  int score = 0;
  for (auto prop : all_selection_properties) {
    const bool present = features.has(prop);
    switch (tp.get(prop)) {
      case PreferenceLevel::require:
        if (!present) return MatchResult::excluded(prop);
        break;
      case PreferenceLevel::prohibit:
        if (present) return MatchResult::excluded(prop);
        break;
      case PreferenceLevel::prefer:
        if (present) ++score;
        break;
      case PreferenceLevel::avoid:
        if (present) --score;
        break;
      case PreferenceLevel::ignore:
        break;
    }
  }
  return MatchResult::with_score(score);
}

std::string_view to_string(CapacityProfile p) noexcept {
  switch (p) {
    case CapacityProfile::default_profile: return "default";
    case CapacityProfile::scavenger: return "scavenger";
    case CapacityProfile::low_latency_interactive: return "low_latency_interactive";
    case CapacityProfile::constant_rate_streaming: return "constant_rate_streaming";
  }
  return "?";
}

std::optional<CapacityProfile> capacity_profile_from_string(std::string_view s) noexcept {
  for (auto p : {CapacityProfile::default_profile, CapacityProfile::scavenger,
                 CapacityProfile::low_latency_interactive, CapacityProfile::constant_rate_streaming}) {
    if (to_string(p) == s) return p;
  }
  return std::nullopt;
}

void ConnectionProperties::set(std::string_view key, PropertyValue value) {
  if (key == capacity_profile_key) {
    if (auto* p = std::get_if<CapacityProfile>(&value)) {
      capacity_profile_ = *p;
      return;
    }
    if (auto* s = std::get_if<std::string>(&value)) {
      if (auto p = capacity_profile_from_string(*s)) {
        capacity_profile_ = *p;
        return;
      }
    }
    throw Error(Errc::config_error, "capacity_profile expects a profile name");
  }
  entries_.insert_or_assign(std::string(key), std::move(value));
}

std::optional<PropertyValue> ConnectionProperties::get(std::string_view key) const {
  if (key == capacity_profile_key) return PropertyValue{capacity_profile_};
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  return std::nullopt;
}

}  // namespace taps
