#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mtgc/errors.hpp"

namespace mtgc {

using Bytes = std::vector<uint8_t>;

// Little-endian byte packing used by every wire format in the project.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        buf_.push_back(uint8_t(v));
        buf_.push_back(uint8_t(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; i++) buf_.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; i++) buf_.push_back(uint8_t(v >> (8 * i)));
    }
    void f32(float v) {
        uint32_t x;
        std::memcpy(&x, &v, 4);
        u32(x);
    }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void bytes(const Bytes& b) { raw(b.data(), b.size()); }
    void str(const std::string& s) { raw(s.data(), s.size()); }

    size_t size() const { return buf_.size(); }
    const Bytes& data() const { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    Bytes buf_;
};

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const Bytes& b) : p_(b.data()), n_(b.size()) {}

    uint8_t u8() {
        need(1);
        return p_[pos_++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = uint16_t(p_[pos_]) | uint16_t(p_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; i++) v |= uint32_t(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; i++) v |= uint64_t(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() {
        uint32_t x = u32();
        float v;
        std::memcpy(&v, &x, 4);
        return v;
    }
    Bytes bytes(size_t n) {
        need(n);
        Bytes out(p_ + pos_, p_ + pos_ + n);
        pos_ += n;
        return out;
    }
    void skip(size_t n) {
        need(n);
        pos_ += n;
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return n_ - pos_; }
    const uint8_t* cursor() const { return p_ + pos_; }

private:
    void need(size_t n) const {
        if (pos_ + n > n_) throw TruncatedContainer("byte stream truncated");
    }
    const uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
};

uint32_t crc32_ieee(const uint8_t* data, size_t n);
inline uint32_t crc32_ieee(const Bytes& b) { return crc32_ieee(b.data(), b.size()); }

Bytes read_file(const std::string& path);
void write_file(const std::string& path, const Bytes& data);

}  // namespace mtgc
