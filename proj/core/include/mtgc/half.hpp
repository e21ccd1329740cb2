#pragma once

#include <cstdint>
#include <cstring>

namespace mtgc {

// IEEE 754 binary16 conversions, round-to-nearest-even, saturating at
// +-65504. Used for the SPW wire format.
inline uint16_t float_to_half(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    const uint32_t sign = (x >> 16) & 0x8000u;
    x &= 0x7fffffffu;

    if (x >= 0x7f800000u) {  // inf / nan
        if (x > 0x7f800000u) return uint16_t(sign | 0x7e00u);  // qNaN
        return uint16_t(sign | 0x7c00u);
    }
    if (x >= 0x477ff000u) return uint16_t(sign | 0x7bffu);  // > 65504 saturates
    if (x < 0x33000001u) return uint16_t(sign);             // underflow to 0

    int exp = int(x >> 23) - 127;
    uint32_t mant = x & 0x7fffffu;
    if (exp < -14) {
        // subnormal half: shift with round-to-nearest-even
        mant |= 0x800000u;
        const int shift = -14 - exp;
        const uint32_t q = mant >> (13 + shift);
        const uint32_t rem = mant & ((1u << (13 + shift)) - 1);
        const uint32_t half_ulp = 1u << (12 + shift);
        uint32_t r = q;
        if (rem > half_ulp || (rem == half_ulp && (q & 1u))) r++;
        return uint16_t(sign | r);
    }
    uint32_t q = mant >> 13;
    const uint32_t rem = mant & 0x1fffu;
    uint32_t h = uint32_t(exp + 15) << 10 | q;
    if (rem > 0x1000u || (rem == 0x1000u && (q & 1u))) h++;  // may carry into exp
    return uint16_t(sign | h);
}

inline float half_to_float(uint16_t h) {
    const uint32_t sign = uint32_t(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t mant = h & 0x3ffu;
    uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            // subnormal: normalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                exp--;
            }
            mant &= 0x3ffu;
            x = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

}  // namespace mtgc
