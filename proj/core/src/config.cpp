#include "poisonlab/config.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "poisonlab/hash.hpp"

namespace poisonlab {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

FlatConfig parse_flat_config(const std::string& text) {
    FlatConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line.erase(hash_pos);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected `key = value`, got: " + t);
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        cfg[key] = value;
    }
    return cfg;
}

FlatConfig load_flat_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_flat_config(ss.str());
}

std::string canonical_config(const FlatConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg) {  // std::map iterates in sorted key order
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

std::string config_hash(const FlatConfig& cfg) { return hex16(fnv1a64(canonical_config(cfg))); }

double parse_number_or_fraction(const std::string& s) {
    const std::string t = trim(s);
    const size_t slash = t.find('/');
    try {
        if (slash != std::string::npos) {
            const double num = std::stod(trim(t.substr(0, slash)));
            const double den = std::stod(trim(t.substr(slash + 1)));
            if (den == 0.0) throw std::runtime_error("zero denominator");
            return num / den;
        }
        size_t used = 0;
        const double v = std::stod(t, &used);
        if (used != t.size()) throw std::runtime_error("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("cannot parse number or fraction: `" + s + "`");
    }
}

std::string get_str(const FlatConfig& c, const std::string& key, const std::string& fallback) {
    const auto it = c.find(key);
    return it == c.end() ? fallback : it->second;
}

std::optional<std::string> get_opt(const FlatConfig& c, const std::string& key) {
    const auto it = c.find(key);
    if (it == c.end()) return std::nullopt;
    return it->second;
}

int64_t get_int(const FlatConfig& c, const std::string& key, int64_t fallback) {
    const auto it = c.find(key);
    if (it == c.end()) return fallback;
    try {
        size_t used = 0;
        const int64_t v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::runtime_error("");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config key `" + key + "`: expected integer, got `" +
                                 it->second + "`");
    }
}

double get_double(const FlatConfig& c, const std::string& key, double fallback) {
    const auto it = c.find(key);
    if (it == c.end()) return fallback;
    try {
        return parse_number_or_fraction(it->second);
    } catch (const std::exception&) {
        throw std::runtime_error("config key `" + key + "`: expected number, got `" +
                                 it->second + "`");
    }
}

bool get_bool(const FlatConfig& c, const std::string& key, bool fallback) {
    const auto it = c.find(key);
    if (it == c.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::runtime_error("config key `" + key + "`: expected boolean, got `" + v + "`");
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : csv) {
        if (ch == ',') {
            const std::string t = trim(cur);
            if (!t.empty()) out.push_back(t);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    const std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace poisonlab
