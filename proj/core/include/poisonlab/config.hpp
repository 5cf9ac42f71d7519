#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace poisonlab {

/// Flat `key = value` configuration with dotted namespaces
/// (`scenario.p`, `trigger.method`, `budget.epsilon`, ...).
using FlatConfig = std::map<std::string, std::string>;

FlatConfig parse_flat_config(const std::string& text);
FlatConfig load_flat_config(const std::string& path);

/// Canonical serialization: sorted keys, one `key = value` per line.
/// The config hash is computed over this form, so key order in the source
/// file never matters.
std::string canonical_config(const FlatConfig& cfg);
std::string config_hash(const FlatConfig& cfg);

/// Accepts plain decimals ("0.0314") and fractions ("8/255").
double parse_number_or_fraction(const std::string& s);

std::string get_str(const FlatConfig&, const std::string& key, const std::string& fallback);
std::optional<std::string> get_opt(const FlatConfig&, const std::string& key);
int64_t get_int(const FlatConfig&, const std::string& key, int64_t fallback);
double get_double(const FlatConfig&, const std::string& key, double fallback);
bool get_bool(const FlatConfig&, const std::string& key, bool fallback);
std::vector<std::string> split_list(const std::string& csv);

std::string format_double(double v);

}  // namespace poisonlab
