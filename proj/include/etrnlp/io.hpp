#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "etrnlp/tensor.hpp"

namespace etrnlp {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : IoError {
    using IoError::IoError;
};
struct TruncatedFileError : IoError {
    using IoError::IoError;
};
struct UnsupportedDtypeError : IoError {
    using IoError::IoError;
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const std::uint8_t b[2] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8)};
    put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    put_bytes(os, b, 8);
}

inline void put_f32_payload(std::ostream& os, const std::vector<float>& data) {
    for (float f : data) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(os, u);
    }
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw TruncatedFileError(std::string("truncated file while reading ") + what);
    }
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
    std::uint8_t v;
    get_bytes(is, &v, 1, what);
    return v;
}

inline std::uint16_t get_u16(std::istream& is, const char* what) {
    std::uint8_t b[2];
    get_bytes(is, b, 2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint8_t b[4];
    get_bytes(is, b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint8_t b[8];
    get_bytes(is, b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void get_f32_payload(std::istream& is, std::vector<float>& data, const char* what) {
    for (auto& f : data) {
        const std::uint32_t u = get_u32(is, what);
        std::memcpy(&f, &u, 4);
    }
}

}  // namespace detail

// Tensor container: "TNSR" | version u8 | dtype u8 (1 = f32) | rank u32 |
// dims u64 each | little-endian row-major payload.
inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("TNSR", 4);
    detail::put_u8(os, 1);
    detail::put_u8(os, 1);
    detail::put_u32(os, 4);
    detail::put_u64(os, static_cast<std::uint64_t>(t.shape.n));
    detail::put_u64(os, static_cast<std::uint64_t>(t.shape.c));
    detail::put_u64(os, static_cast<std::uint64_t>(t.shape.h));
    detail::put_u64(os, static_cast<std::uint64_t>(t.shape.w));
    detail::put_f32_payload(os, t.data);
    if (!os) throw IoError("write failed: " + path.string());
}

inline TensorPtr load_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "TNSR", 4) != 0) {
        throw BadMagicError("bad magic in " + path.string());
    }
    const auto version = detail::get_u8(is, "version");
    if (version != 1) throw IoError("unsupported tensor file version");
    const auto dtype = detail::get_u8(is, "dtype");
    if (dtype != 1) {
        throw UnsupportedDtypeError("unsupported dtype code " + std::to_string(dtype));
    }
    const auto rank = detail::get_u32(is, "rank");
    if (rank < 1 || rank > 4) throw IoError("unsupported rank " + std::to_string(rank));
    std::int64_t dims[4] = {1, 1, 1, 1};
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[4 - rank + i] = static_cast<std::int64_t>(detail::get_u64(is, "dims"));
    }
    Shape shape{dims[0], dims[1], dims[2], dims[3]};
    auto t = make_tensor<float>(shape);
    detail::get_f32_payload(is, t->data, "payload");
    return t;
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

using NamedTensors = std::vector<std::pair<std::string, TensorPtr>>;

// Checkpoint container: "ETRN" | format version u16 | count u32, then
// per-tensor records (name length u16, UTF-8 name, rank u32, dims u64 each,
// raw little-endian f32 payload). Round-trips bit-exactly.
inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("ETRN", 4);
    detail::put_u16(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
        detail::put_bytes(os, name.data(), name.size());
        detail::put_u32(os, 4);
        detail::put_u64(os, static_cast<std::uint64_t>(t->shape.n));
        detail::put_u64(os, static_cast<std::uint64_t>(t->shape.c));
        detail::put_u64(os, static_cast<std::uint64_t>(t->shape.h));
        detail::put_u64(os, static_cast<std::uint64_t>(t->shape.w));
        detail::put_f32_payload(os, t->data);
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "ETRN", 4) != 0) {
        throw BadMagicError("bad magic in " + path.string());
    }
    const auto version = detail::get_u16(is, "version");
    if (version != 1) throw IoError("unsupported checkpoint version");
    const auto count = detail::get_u32(is, "count");
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get_u16(is, "name length");
        std::string name(name_len, '\0');
        detail::get_bytes(is, name.data(), name_len, "name");
        const auto rank = detail::get_u32(is, "rank");
        if (rank < 1 || rank > 4) throw IoError("unsupported rank " + std::to_string(rank));
        std::int64_t dims[4] = {1, 1, 1, 1};
        for (std::uint32_t d = 0; d < rank; ++d) {
            dims[4 - rank + d] = static_cast<std::int64_t>(detail::get_u64(is, "dims"));
        }
        auto t = make_tensor<float>(Shape{dims[0], dims[1], dims[2], dims[3]});
        detail::get_f32_payload(is, t->data, "payload");
        t->name = name;
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace etrnlp
