#pragma once

#include <map>
#include <optional>
#include <string>

#include "rafe/common.hpp"

namespace rafe {

/// Hierarchical plain-text configuration: `[section]` headers, `key = value`
/// lines, `#` comments. Keys mirror the corresponding struct field names.
class Config {
public:
    Config() = default;

    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& section, const std::string& key,
                         std::int64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

    void set(const std::string& section, const std::string& key, const std::string& value);

    const std::string& raw_text() const { return raw_text_; }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
    std::string raw_text_;
};

}  // namespace rafe
