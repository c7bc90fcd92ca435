#include "rafe/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace rafe {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config c;
    c.raw_text_ = text;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                raise(ErrorCode::invalid_argument,
                      "config line " + std::to_string(line_no) + ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            raise(ErrorCode::invalid_argument,
                  "config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            raise(ErrorCode::invalid_argument,
                  "config line " + std::to_string(line_no) + ": empty key");
        c.sections_[section][key] = value;
    }
    return c;
}

Config Config::load(const std::string& path) { return parse(read_text_file(path)); }

bool Config::has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string Config::get_string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_string(section, key, "");
    try {
        std::size_t consumed = 0;
        double d = std::stod(v, &consumed);
        if (consumed != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        raise(ErrorCode::invalid_argument, "config [" + section + "] " + key + ": not a number: " + v);
    }
}

std::int64_t Config::get_int(const std::string& section, const std::string& key,
                             std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_string(section, key, "");
    try {
        std::size_t consumed = 0;
        std::int64_t i = std::stoll(v, &consumed);
        if (consumed != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        raise(ErrorCode::invalid_argument, "config [" + section + "] " + key + ": not an integer: " + v);
    }
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    std::string v = get_string(section, key, "");
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    raise(ErrorCode::invalid_argument, "config [" + section + "] " + key + ": not a boolean: " + v);
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
    raw_text_ += "\n[" + section + "]\n" + key + " = " + value + "\n";
}

}  // namespace rafe
