#ifndef DV_CONFIG_HPP
#define DV_CONFIG_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <vector>
#include <set>
#include <sstream>
#include <string>

#include "tensor.hpp"

// Plain-text config: `[section]` headers and `key = value` lines, comments
// with '#' or ';'. Keys are addressed as "section.key". Readers mark keys as
// consumed; reject_unknown() then turns every leftover key into an error, so
// a typo in a config file fails loudly instead of silently using a default.

namespace dv {

class Config {
public:
    static Config parse(const std::string& text) {
        Config cfg;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string s = trim(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                check(s.back() == ']' && s.size() > 2,
                      "config: line " + std::to_string(lineno) + ": malformed section header");
                section = trim(s.substr(1, s.size() - 2));
                continue;
            }
            const size_t eq = s.find('=');
            check(eq != std::string::npos,
                  "config: line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            check(!key.empty(), "config: line " + std::to_string(lineno) + ": empty key");
            const std::string full = section.empty() ? key : section + "." + key;
            check(cfg.values_.emplace(full, value).second, "config: duplicate key " + full);
        }
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream f(path);
        check(f.good(), "config: cannot open " + path);
        std::ostringstream buf;
        buf << f.rdbuf();
        return parse(buf.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        return it->second;
    }

    int64_t get_int(const std::string& key, int64_t def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        size_t pos = 0;
        int64_t v = 0;
        try {
            v = std::stoll(it->second, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        check(pos == it->second.size() && !it->second.empty(),
              "config: bad integer for " + key);
        return v;
    }

    double get_double(const std::string& key, double def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(it->second, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        check(pos == it->second.size() && !it->second.empty(), "config: bad number for " + key);
        return v;
    }

    bool get_bool(const std::string& key, bool def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        const std::string& v = it->second;
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        check(false, "config: bad boolean for " + key);
        return def;
    }

    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            check(touched_.count(key) > 0, "config: unknown key " + key);
    }

    // schema validation for callers that read only a subset of the keys
    void ensure_known(const std::vector<std::string>& known) const {
        for (const auto& [key, value] : values_)
            check(std::find(known.begin(), known.end(), key) != known.end(),
                  "config: unknown key " + key);
    }

private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> touched_;
};

}  // namespace dv

#endif  // DV_CONFIG_HPP
