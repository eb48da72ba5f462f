#include "evseg/kv.hpp"

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "evseg/errors.hpp"

namespace evseg {
namespace {

std::string trim(const std::string& s) {
    std::size_t begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    std::size_t end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::vector<std::string> split_dots(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = s.find('.', start);
        if (dot == std::string::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, dot - start));
        start = dot + 1;
    }
}

bool matches_pattern(const std::string& key, const std::string& pattern) {
    const auto k = split_dots(key);
    const auto p = split_dots(pattern);
    if (k.size() != p.size()) return false;
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (p[i] != "*" && p[i] != k[i]) return false;
    }
    return true;
}

double parse_double(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t.empty()) throw ConfigError("empty numeric value for '" + key + "'");
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || errno == ERANGE) {
        throw ConfigError("cannot parse '" + text + "' as a number for '" + key + "'");
    }
    return v;
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    Int v{};
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
        throw ConfigError("cannot parse '" + text + "' as an integer for '" + key +
                          "'");
    }
    return v;
}

}  // namespace

KvFile KvFile::parse_text(const std::string& text, const std::string& origin) {
    KvFile kv;
    kv.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("missing '=' on line " + std::to_string(line_no) +
                              (origin.empty() ? "" : " of " + origin));
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("empty key on line " + std::to_string(line_no) +
                              (origin.empty() ? "" : " of " + origin));
        }
        if (kv.find(key) != nullptr) {
            throw ConfigError("duplicate key '" + key + "'" +
                              (origin.empty() ? "" : " in " + origin));
        }
        kv.entries_.emplace_back(key, value);
    }
    return kv;
}

KvFile KvFile::parse(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path.string());
}

const std::string* KvFile::find(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return &v;
    }
    return nullptr;
}

bool KvFile::has(const std::string& key) const { return find(key) != nullptr; }

const std::string& KvFile::get(const std::string& key) const {
    const std::string* v = find(key);
    if (v == nullptr) {
        throw ConfigError("missing key '" + key + "'" +
                          (origin_.empty() ? "" : " in " + origin_));
    }
    return *v;
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? *v : fallback;
}

double KvFile::get_double(const std::string& key) const {
    return parse_double(key, get(key));
}

double KvFile::get_double_or(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? parse_double(key, *v) : fallback;
}

std::int64_t KvFile::get_int(const std::string& key) const {
    return parse_integer<std::int64_t>(key, get(key));
}

std::int64_t KvFile::get_int_or(const std::string& key, std::int64_t fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? parse_integer<std::int64_t>(key, *v) : fallback;
}

std::uint64_t KvFile::get_u64(const std::string& key) const {
    return parse_integer<std::uint64_t>(key, get(key));
}

std::uint64_t KvFile::get_u64_or(const std::string& key, std::uint64_t fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? parse_integer<std::uint64_t>(key, *v) : fallback;
}

bool KvFile::get_bool_or(const std::string& key, bool fallback) const {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError("cannot parse '" + *v + "' as a boolean for '" + key + "'");
}

std::vector<double> KvFile::get_doubles(const std::string& key) const {
    const auto tokens = split_ws(get(key));
    std::vector<double> out;
    out.reserve(tokens.size());
    for (const std::string& t : tokens) out.push_back(parse_double(key, t));
    return out;
}

std::vector<std::string> KvFile::get_tokens(const std::string& key) const {
    return split_ws(get(key));
}

void KvFile::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

void KvFile::set_double(const std::string& key, double value) {
    set(key, format_double(value));
}

void KvFile::set_int(const std::string& key, std::int64_t value) {
    set(key, std::to_string(value));
}

void KvFile::set_u64(const std::string& key, std::uint64_t value) {
    set(key, std::to_string(value));
}

void KvFile::expect_known_keys(const std::vector<std::string>& patterns) const {
    for (const auto& [key, value] : entries_) {
        bool known = false;
        for (const std::string& pat : patterns) {
            if (matches_pattern(key, pat)) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("unknown key '" + key + "'" +
                              (origin_.empty() ? "" : " in " + origin_));
        }
    }
}

std::string KvFile::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
    return os.str();
}

void KvFile::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << to_text();
    if (!out.flush()) throw IoError("write failed: " + path.string());
}

std::string format_double(double value) {
    // Shortest representation that round-trips: try increasing precision.
    char buf[64];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof(buf), "%.*g", precision, value);
        if (std::strtod(buf, nullptr) == value) break;
    }
    return buf;
}

}  // namespace evseg
