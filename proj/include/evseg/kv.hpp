#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace evseg {

// Flat "key = value" text files used for phantom descriptions, training
// configuration and run reports. Lines starting with '#' and blank lines
// are ignored. Keys are dotted paths ("region.2.shape"); values keep
// their raw text until a typed getter parses them. Entry order is
// preserved so that writing is deterministic.
class KvFile {
public:
    KvFile() = default;

    static KvFile parse_text(const std::string& text, const std::string& origin = {});
    static KvFile parse(const std::filesystem::path& path);

    bool has(const std::string& key) const;

    // Typed getters throw ConfigError when the key is missing or the value
    // does not parse. The *_or variants fall back instead of throwing on a
    // missing key (but still reject malformed values).
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
    std::uint64_t get_u64(const std::string& key) const;
    std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;

    // Whitespace-separated numeric list ("0.75 0 0.25").
    std::vector<double> get_doubles(const std::string& key) const;
    // Whitespace-separated tokens ("sphere 24 24 16 16").
    std::vector<std::string> get_tokens(const std::string& key) const;

    void set(const std::string& key, const std::string& value);
    void set_double(const std::string& key, double value);
    void set_int(const std::string& key, std::int64_t value);
    void set_u64(const std::string& key, std::uint64_t value);

    // Throws ConfigError naming the first key that matches none of the
    // given dotted patterns, where a '*' segment matches any one segment
    // ("region.*.shape"). Guards against typos in config files.
    void expect_known_keys(const std::vector<std::string>& patterns) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const {
        return entries_;
    }

    std::string to_text() const;
    void save(const std::filesystem::path& path) const;

private:
    const std::string* find(const std::string& key) const;

    std::vector<std::pair<std::string, std::string>> entries_;
    std::string origin_;  // file name for error messages
};

// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double value);

}  // namespace evseg
