#pragma once

// Internal little-endian stream helpers shared by the binary file
// formats. Not installed; include only from library sources.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "evseg/errors.hpp"

namespace evseg::detail {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "file formats assume IEEE-754 binary32");

// On a little-endian host the multi-byte writes collapse to memcpy; the
// byte-swapping path keeps the formats valid on big-endian machines.
template <typename T>
T to_little(T value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        T out;
        auto* src = reinterpret_cast<const unsigned char*>(&value);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
}

class Writer {
public:
    Writer(const std::filesystem::path& path)
        : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot open for writing: " + path.string());
    }

    void bytes(const void* data, std::size_t n) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    }

    void u16(std::uint16_t v) { v = to_little(v); bytes(&v, 2); }
    void u32(std::uint32_t v) { v = to_little(v); bytes(&v, 4); }

    void u64(std::uint64_t v) { v = to_little(v); bytes(&v, 8); }

    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    template <typename T>
    void array(const std::vector<T>& values) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(values.data(), values.size() * sizeof(T));
        } else {
            for (T v : values) {
                v = to_little(v);
                bytes(&v, sizeof(T));
            }
        }
    }

    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    Reader(const std::filesystem::path& path)
        : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path.string());
    }

    void bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError(FormatError::Fault::Truncated,
                              "file ends early: " + path_.string());
        }
    }

    std::uint16_t u16() {
        std::uint16_t v;
        bytes(&v, 2);
        return to_little(v);
    }

    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return to_little(v);
    }

    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return to_little(v);
    }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    // Length-prefixed string with a sanity cap against garbage lengths.
    std::string str(std::uint32_t max_len = 1u << 20) {
        const std::uint32_t len = u32();
        if (len > max_len) {
            throw FormatError(FormatError::Fault::Malformed,
                              "string length " + std::to_string(len) +
                                  " exceeds limit in " + path_.string());
        }
        std::string s(len, '\0');
        if (len > 0) bytes(s.data(), len);
        return s;
    }

    template <typename T>
    std::vector<T> array(std::size_t count) {
        std::vector<T> values(count);
        bytes(values.data(), count * sizeof(T));
        if constexpr (std::endian::native != std::endian::little) {
            for (T& v : values) v = to_little(v);
        }
        return values;
    }

    void expect_magic(const char (&magic)[5]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, magic, 4) != 0) {
            throw FormatError(FormatError::Fault::BadMagic,
                              "not a " + std::string(magic) + " file: " + path_.string());
        }
    }

    void expect_version(std::uint16_t expected) {
        const std::uint16_t got = u16();
        if (got != expected) {
            throw FormatError(FormatError::Fault::BadVersion,
                              "unsupported version " + std::to_string(got) + " in " +
                                  path_.string());
        }
    }

    // Call after the last field: any remaining byte means the file does
    // not have the advertised length.
    void expect_end() {
        char extra;
        in_.read(&extra, 1);
        if (in_.gcount() != 0) {
            throw FormatError(FormatError::Fault::TrailingBytes,
                              "trailing bytes after payload: " + path_.string());
        }
    }

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

}  // namespace evseg::detail
