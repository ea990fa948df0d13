#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "realign/tensor.hpp"

namespace realign::rtf {

// Tensor container, one record per tensor:
//
//   magic "RATF" | version 0x01 | dtype u8 | rank u8 |
//   extents u64-le x rank | payload (little-endian floats) |
//   name length u16-le | name bytes (UTF-8)
//
// dtype 0x01 = f32, 0x02 = f64. Values are promoted to f64 on read.
// A file is a sequence of records. Every multi-byte field is little-endian
// regardless of host, so files are byte-exact across platforms.

enum class Dtype : std::uint8_t { f32 = 0x01, f64 = 0x02 };

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    put_u64(out, bits);
}

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n, const std::string& path)
        : p_(p), n_(n), path_(path) {}

    bool at_end() const { return off_ == n_; }
    std::size_t offset() const { return off_; }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError("rtf: " + path_ + ": " + what + " at byte offset " +
                        std::to_string(off_));
    }

    void need(std::size_t k, const char* what) {
        if (off_ + k > n_) fail(std::string("truncated file reading ") + what);
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return p_[off_++];
    }

    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(p_[off_] | (p_[off_ + 1] << 8));
        off_ += 2;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[off_ + i]) << (8 * i);
        off_ += 8;
        return v;
    }

    void bytes(void* dst, std::size_t k, const char* what) {
        need(k, what);
        std::memcpy(dst, p_ + off_, k);
        off_ += k;
    }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
    std::string path_;
};

}  // namespace detail

/// Encode one record into `out`. Exposed so tests can check exact bytes.
inline void encode_record(std::vector<std::uint8_t>& out, const NamedTensor& nt, Dtype dtype) {
    if (nt.name.size() > 0xffff)
        throw DataError("rtf: tensor name longer than 65535 bytes: " + nt.name.substr(0, 40));
    out.push_back('R');
    out.push_back('A');
    out.push_back('T');
    out.push_back('F');
    out.push_back(0x01);
    out.push_back(static_cast<std::uint8_t>(dtype));
    if (nt.tensor.rank() > 0xff) throw DataError("rtf: rank > 255");
    out.push_back(static_cast<std::uint8_t>(nt.tensor.rank()));
    for (std::size_t e : nt.tensor.shape) detail::put_u64(out, e);
    if (dtype == Dtype::f32) {
        for (double v : nt.tensor.data) detail::put_f32(out, static_cast<float>(v));
    } else {
        for (double v : nt.tensor.data) detail::put_f64(out, v);
    }
    detail::put_u16(out, static_cast<std::uint16_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
}

inline std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors,
                                        Dtype dtype = Dtype::f64) {
    std::vector<std::uint8_t> out;
    for (const auto& nt : tensors) encode_record(out, nt, dtype);
    return out;
}

inline void write(const std::string& path, const std::vector<NamedTensor>& tensors,
                  Dtype dtype = Dtype::f64) {
    std::vector<std::uint8_t> bytes = encode(tensors, dtype);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("rtf: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("rtf: write failed: " + path);
}

inline std::vector<NamedTensor> decode(const std::vector<std::uint8_t>& bytes,
                                       const std::string& path = "<memory>") {
    detail::Reader r(bytes.data(), bytes.size(), path);
    std::vector<NamedTensor> out;
    while (!r.at_end()) {
        char magic[4];
        r.bytes(magic, 4, "magic");
        if (std::memcmp(magic, "RATF", 4) != 0) r.fail("bad magic (expected RATF)");
        std::uint8_t version = r.u8("version");
        if (version != 0x01) r.fail("unsupported version " + std::to_string(version));
        std::uint8_t dtype = r.u8("dtype");
        if (dtype != 0x01 && dtype != 0x02) r.fail("bad dtype byte " + std::to_string(dtype));
        std::uint8_t rank = r.u8("rank");
        Shape shape(rank);
        for (std::uint8_t i = 0; i < rank; ++i) {
            std::uint64_t e = r.u64("extent");
            if (e == 0) r.fail("zero extent");
            shape[i] = static_cast<std::size_t>(e);
        }
        std::size_t count = numel(shape);
        Tensor t(shape);
        if (dtype == 0x01) {
            for (std::size_t i = 0; i < count; ++i) {
                std::uint32_t bits = 0;
                std::uint8_t b[4];
                r.bytes(b, 4, "f32 payload");
                for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
                t.data[i] = static_cast<double>(std::bit_cast<float>(bits));
            }
        } else {
            for (std::size_t i = 0; i < count; ++i) {
                std::uint64_t bits = r.u64("f64 payload");
                t.data[i] = std::bit_cast<double>(bits);
            }
        }
        std::uint16_t name_len = r.u16("name length");
        std::string name(name_len, '\0');
        if (name_len) r.bytes(name.data(), name_len, "name");
        out.push_back(NamedTensor{std::move(name), std::move(t)});
    }
    return out;
}

inline std::vector<NamedTensor> read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("rtf: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return decode(bytes, path);
}

/// Lookup by name; throws DataError when absent.
inline const Tensor& find(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& nt : tensors)
        if (nt.name == name) return nt.tensor;
    throw DataError("rtf: missing tensor \"" + name + "\"");
}

}  // namespace realign::rtf
