#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hba/common.hpp"

namespace hba {

// little-endian primitive IO for the checkpoint/state file formats
namespace bio {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw IoError(std::string("truncated file while reading ") + what);
}

template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    put_bytes(os, &v, sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
    T v{};
    get_bytes(is, &v, sizeof(T), what);
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    put_bytes(os, s.data(), s.size());
}

inline std::string get_string(std::istream& is, const char* what, std::uint32_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>(is, what);
    if (n > max_len) throw IoError(std::string(what) + ": implausible string length");
    std::string s(n, '\0');
    get_bytes(is, s.data(), n, what);
    return s;
}

inline void put_f32_array(std::ostream& os, const float* p, std::size_t n) {
    put_bytes(os, p, n * sizeof(float));
}

inline void get_f32_array(std::istream& is, float* p, std::size_t n, const char* what) {
    get_bytes(is, p, n * sizeof(float), what);
}

} // namespace bio

// FNV-1a, used for config digests
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace hba
