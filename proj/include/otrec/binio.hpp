#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "otrec/tensor.hpp"

namespace otrec::binio {

inline void put_u8(std::ostream& out, uint8_t v) { out.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint8_t get_u8(std::istream& in) {
    const int c = in.get();
    if (c == EOF) throwf("unexpected end of file");
    return static_cast<uint8_t>(c);
}

inline uint32_t get_u32(std::istream& in) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(get_u8(in)) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& in) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(get_u8(in)) << (8 * i);
    return v;
}

inline std::string get_string(std::istream& in) {
    const uint64_t n = get_u64(in);
    if (n > (1ULL << 32)) throwf("string length %llu is implausible", static_cast<unsigned long long>(n));
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<uint64_t>(in.gcount()) != n) throwf("unexpected end of file in string");
    return s;
}

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

template <typename S>
void put_tensor_payload(std::ostream& out, const Tensor<S>& t) {
    for (S v : t.data) {
        if constexpr (sizeof(S) == 4) {
            put_f32(out, static_cast<float>(v));
        } else {
            put_f64(out, static_cast<double>(v));
        }
    }
}

template <typename S>
void get_tensor_payload(std::istream& in, Tensor<S>& t) {
    for (auto& v : t.data) {
        if constexpr (sizeof(S) == 4) {
            v = get_f32(in);
        } else {
            v = get_f64(in);
        }
    }
}

}  // namespace otrec::binio
