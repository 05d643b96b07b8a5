#include "hba/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace hba {

namespace {

const std::uint8_t kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::uint8_t* data, std::size_t len) {
    put_be32(out, static_cast<std::uint32_t>(len));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    const auto crc = crc32(crc32(0L, Z_NULL, 0), out.data() + start, static_cast<uInt>(4 + len));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    out.resize(bound);
    return out;
}

std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& comp, std::size_t expect) {
    std::vector<std::uint8_t> out(expect);
    uLongf len = static_cast<uLongf>(expect);
    const int rc = uncompress(out.data(), &len, comp.data(), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || len != expect) throw IoError("png: inflate failed or size mismatch");
    return out;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

} // namespace

ImageU8 read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open PNG: " + path);
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (file.size() < 8 || std::memcmp(file.data(), kPngSignature, 8) != 0)
        throw IoError("not a PNG file: " + path);

    int width = 0, height = 0, depth = 0, color = -1;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= file.size()) {
        const std::uint32_t len = be32(file.data() + pos);
        if (pos + 12 + len > file.size()) throw IoError("truncated PNG chunk in " + path);
        const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
        const std::uint8_t* data = file.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("bad IHDR in " + path);
            width = static_cast<int>(be32(data));
            height = static_cast<int>(be32(data + 4));
            depth = data[8];
            color = data[9];
            if (data[12] != 0) throw IoError("interlaced PNG unsupported: " + path);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0) throw IoError("PNG missing IHDR: " + path);
    if (depth != 8) throw IoError("only 8-bit PNGs supported: " + path);
    int src_ch = 0;
    switch (color) {
        case 0: src_ch = 1; break; // gray
        case 2: src_ch = 3; break; // RGB
        case 6: src_ch = 4; break; // RGBA
        default: throw IoError("unsupported PNG color type " + std::to_string(color) + ": " + path);
    }

    const std::size_t stride = static_cast<std::size_t>(width) * src_ch;
    auto raw = zlib_inflate(idat, (stride + 1) * static_cast<std::size_t>(height));

    // unfilter in place into the output buffer
    std::vector<std::uint8_t> scan(stride * static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
        const std::uint8_t* src = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
        std::uint8_t* dst = scan.data() + stride * static_cast<std::size_t>(y);
        const std::uint8_t* prev = y > 0 ? scan.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(src_ch) ? dst[i - src_ch] : 0;
            const int b = prev ? prev[i] : 0;
            const int c = (prev && i >= static_cast<std::size_t>(src_ch)) ? prev[i - src_ch] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("unknown PNG filter in " + path);
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }

    ImageU8 img;
    img.width = width;
    img.height = height;
    img.channels = src_ch == 1 ? 1 : 3;
    img.pixels.resize(static_cast<std::size_t>(width) * height * img.channels);
    if (src_ch == img.channels) {
        img.pixels = std::move(scan);
    } else { // RGBA -> RGB
        for (std::size_t px = 0; px < static_cast<std::size_t>(width) * height; ++px)
            for (int c = 0; c < 3; ++c) img.pixels[px * 3 + c] = scan[px * 4 + c];
    }
    return img;
}

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError("write_png: channels must be 1 or 3");
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
        throw IoError("write_png: inconsistent image buffer");

    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw[(stride + 1) * static_cast<std::size_t>(y)] = 0; // filter None
        std::memcpy(raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1,
                    img.pixels.data() + stride * static_cast<std::size_t>(y), stride);
    }
    const auto compressed = zlib_deflate(raw);

    std::vector<std::uint8_t> out(kPngSignature, kPngSignature + 8);
    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(img.width);
    ihdr[4] = static_cast<std::uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(img.height);
    ihdr[8] = 8;                                    // bit depth
    ihdr[9] = img.channels == 1 ? 0 : 2;            // gray / RGB
    ihdr[10] = ihdr[11] = ihdr[12] = 0;             // compression, filter, interlace
    append_chunk(out, "IHDR", ihdr, sizeof(ihdr));
    append_chunk(out, "IDAT", compressed.data(), compressed.size());
    append_chunk(out, "IEND", nullptr, 0);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("write failed: " + path);
}

ImageU8 to_rgb(const ImageU8& img) {
    if (img.channels == 3) return img;
    ImageU8 rgb;
    rgb.width = img.width;
    rgb.height = img.height;
    rgb.channels = 3;
    rgb.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (std::size_t px = 0; px < static_cast<std::size_t>(img.width) * img.height; ++px)
        for (int c = 0; c < 3; ++c) rgb.pixels[px * 3 + c] = img.pixels[px];
    return rgb;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open CSV: " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

} // namespace hba
