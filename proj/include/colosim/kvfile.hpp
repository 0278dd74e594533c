#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace colosim {

/// Flat key-value text file: `key = value` lines, '#' comments, blank lines ignored.
/// Used for model/GPU profiles and experiment configs.
class KvFile {
  public:
    static KvFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str(), path);
    }

    static KvFile parse_text(const std::string& text, const std::string& origin = "<string>") {
        KvFile kv;
        kv.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": expected `key = value`, got: " + s);
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            if (key.empty())
                throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
            if (kv.values_.count(key))
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": duplicate key: " + key);
            kv.values_[key] = value;
        }
        return kv;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end())
            throw std::runtime_error(origin_ + ": missing required key: " + key);
        consumed_.insert(key);
        return it->second;
    }

    std::string get_string_or(const std::string& key, const std::string& dflt) {
        if (!has(key)) return dflt;
        return get_string(key);
    }

    std::uint64_t get_u64(const std::string& key) { return to_u64(key, get_string(key)); }

    std::uint64_t get_u64_or(const std::string& key, std::uint64_t dflt) {
        if (!has(key)) return dflt;
        return get_u64(key);
    }

    double get_f64(const std::string& key) { return to_f64(key, get_string(key)); }

    double get_f64_or(const std::string& key, double dflt) {
        if (!has(key)) return dflt;
        return get_f64(key);
    }

    /// Keys under `prefix.` as a sub-view (prefix stripped); consumes them.
    KvFile section(const std::string& prefix) {
        KvFile sub;
        sub.origin_ = origin_ + " [" + prefix + ".*]";
        for (const auto& [k, v] : values_) {
            if (k.rfind(prefix + ".", 0) == 0) {
                sub.values_[k.substr(prefix.size() + 1)] = v;
                consumed_.insert(k);
            }
        }
        return sub;
    }

    /// Rejects any key that was never consumed, naming it.
    void reject_unknown() const {
        for (const auto& [k, v] : values_) {
            if (!consumed_.count(k))
                throw std::runtime_error(origin_ + ": unknown key: " + k);
        }
    }

    const std::string& origin() const { return origin_; }

  private:
    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::uint64_t to_u64(const std::string& key, const std::string& v) const {
        try {
            size_t pos = 0;
            // Allow scientific notation for large byte counts (e.g. 24e9).
            if (v.find_first_of("eE.") != std::string::npos) {
                double d = std::stod(v, &pos);
                if (pos != v.size() || d < 0) throw std::invalid_argument(v);
                return static_cast<std::uint64_t>(d);
            }
            unsigned long long u = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return u;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key " + key + ": not an unsigned integer: " + v);
        }
    }

    double to_f64(const std::string& key, const std::string& v) const {
        try {
            size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key " + key + ": not a number: " + v);
        }
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

} // namespace colosim
