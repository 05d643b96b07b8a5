#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hba {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// dimension / shape mismatches
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf escaped an operation
struct NumericError : Error {
    using Error::Error;
};

// invalid or inconsistent configuration
struct ConfigError : Error {
    using Error::Error;
};

// file and format problems
struct IoError : Error {
    using Error::Error;
};

// Dense 4-D layout, row-major N-C-H-W.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    std::int64_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::int64_t>(in) * c + ic) * h + ih) * w + iw;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + "]";
    }
};

} // namespace hba
