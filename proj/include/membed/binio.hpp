#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "membed/errors.hpp"

// Byte-level little-endian encoding helpers shared by the feature-file and
// checkpoint formats. Values are assembled byte by byte so the on-disk
// layout is identical on any host.

namespace membed::binio {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

// Cursor over an in-memory file image. Every read is bounds-checked and a
// short buffer surfaces as TruncatedFileError.
class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size, std::string context)
        : data_(data), size_(size), context_(std::move(context)) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

    const std::uint8_t* take(std::size_t n) {
        if (remaining() < n)
            throw TruncatedFileError(context_ + ": truncated (need " + std::to_string(n) +
                                     " bytes at offset " + std::to_string(pos_) + ", have " +
                                     std::to_string(remaining()) + ")");
        const std::uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    std::uint32_t u32() {
        const std::uint8_t* p = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }

    std::uint64_t u64() {
        const std::uint8_t* p = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }

    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::string context_;
    std::size_t pos_ = 0;
};

}  // namespace membed::binio
