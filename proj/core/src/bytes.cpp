#include "mtgc/bytes.hpp"

#include <zlib.h>

#include <cstdio>

namespace mtgc {

uint32_t crc32_ieee(const uint8_t* data, size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt chunks; payloads here are far below 4 GiB but chunk anyway
    while (n > 0) {
        const uInt chunk = uInt(std::min<size_t>(n, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return uint32_t(crc);
}

Bytes read_file(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open for read: " + path);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    Bytes out(static_cast<size_t>(size), 0);
    if (size > 0 && std::fread(out.data(), 1, size_t(size), f) != size_t(size)) {
        std::fclose(f);
        throw IoError("short read: " + path);
    }
    std::fclose(f);
    return out;
}

void write_file(const std::string& path, const Bytes& data) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open for write: " + path);
    if (!data.empty() && std::fwrite(data.data(), 1, data.size(), f) != data.size()) {
        std::fclose(f);
        throw IoError("short write: " + path);
    }
    std::fclose(f);
}

}  // namespace mtgc
