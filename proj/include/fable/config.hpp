#pragma once

// Flat dotted-key configuration: `section.key = value` lines, '#' comments.
// Environment variables override file values; the prefix is FABLE_ and a
// double underscore separates key segments, so FABLE_TRAIN__MIN_WORDS sets
// train.min_words (single underscores stay part of the segment name).

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fable/errors.hpp"

extern char** environ;

namespace fable {

namespace detail {

inline std::string trim_ws(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool valid_config_key(const std::string& k) {
    if (k.empty() || k.front() == '.' || k.back() == '.') return false;
    for (char c : k) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_' ||
                  c == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace detail

class Config {
public:
    Config() = default;

    static Config from_string(const std::string& text, const std::string& origin = "<string>") {
        Config cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string t = detail::trim_ws(line);
            if (t.empty() || t.front() == '#') continue;
            size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw ContentError(origin + ":" + std::to_string(lineno) +
                                   ": expected 'key = value', got '" + t + "'");
            std::string key = detail::trim_ws(t.substr(0, eq));
            std::string value = detail::trim_ws(t.substr(eq + 1));
            if (!detail::valid_config_key(key))
                throw ContentError(origin + ":" + std::to_string(lineno) + ": bad key '" + key +
                                   "' (want lowercase dotted segments)");
            cfg.values_[key] = value;  // later lines win
        }
        return cfg;
    }

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ValueError("config: cannot open " + path);
        std::ostringstream buf;
        buf << f.rdbuf();
        return from_string(buf.str(), path);
    }

    // FABLE_SECTION__KEY=value (double underscore between segments) wins over
    // anything read from the file.
    void apply_env(const std::string& prefix = "FABLE_") {
        for (char** e = environ; e && *e; ++e) {
            std::string entry(*e);
            if (entry.rfind(prefix, 0) != 0) continue;
            size_t eq = entry.find('=');
            if (eq == std::string::npos) continue;
            std::string raw = entry.substr(prefix.size(), eq - prefix.size());
            std::string key;
            for (size_t i = 0; i < raw.size(); ++i) {
                if (raw[i] == '_' && i + 1 < raw.size() && raw[i + 1] == '_') {
                    key += '.';
                    ++i;
                } else {
                    key += static_cast<char>(std::tolower(static_cast<unsigned char>(raw[i])));
                }
            }
            if (detail::valid_config_key(key)) values_[key] = entry.substr(eq + 1);
        }
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback = "") const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& key, long long fallback = 0) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        size_t pos = 0;
        long long v;
        try {
            v = std::stoll(it->second, &pos);
        } catch (const std::exception&) {
            throw ContentError("config: key '" + key + "' is not an integer: '" + it->second +
                               "'");
        }
        if (pos != it->second.size())
            throw ContentError("config: key '" + key + "' is not an integer: '" + it->second +
                               "'");
        return v;
    }

    double get_double(const std::string& key, double fallback = 0.0) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        size_t pos = 0;
        double v;
        try {
            v = std::stod(it->second, &pos);
        } catch (const std::exception&) {
            throw ContentError("config: key '" + key + "' is not a number: '" + it->second + "'");
        }
        if (pos != it->second.size())
            throw ContentError("config: key '" + key + "' is not a number: '" + it->second + "'");
        return v;
    }

    bool get_bool(const std::string& key, bool fallback = false) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::string v;
        for (char c : it->second)
            v += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ContentError("config: key '" + key + "' is not a boolean: '" + it->second + "'");
    }

    // Canonical sorted text form; parsing it back reproduces the config.
    std::string dump() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
        return out.str();
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace fable
