#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hba/common.hpp"

namespace hba {

// interleaved 8-bit image, channels = 1 (gray) or 3 (RGB)
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// 8-bit gray/RGB/RGBA PNGs, no interlacing; RGBA alpha is dropped, gray is
// returned as one channel
ImageU8 read_png(const std::string& path);

// channels must be 1 or 3
void write_png(const std::string& path, const ImageU8& img);

ImageU8 to_rgb(const ImageU8& img);

// comma-separated, UTF-8, no quoting; CR stripped; empty lines skipped
std::vector<std::vector<std::string>> read_csv(const std::string& path);

} // namespace hba
