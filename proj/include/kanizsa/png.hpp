#pragma once

// Minimal 8-bit grayscale PNG writer (color type 0, no alpha) on top of zlib.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/raster.hpp"

namespace kanizsa {

namespace detail {

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::uint8_t* data, std::uint32_t len) {
    put_u32_be(out, len);
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len > 0) out.insert(out.end(), data, data + len);
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + start, static_cast<uInt>(4 + len)));
    put_u32_be(out, crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png_gray8(const Image& img) {
    // One filter byte (0 = None) per scanline.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height) * (img.width + 1));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = img.pixels.data() + static_cast<size_t>(y) * img.width;
        raw.insert(raw.end(), row, row + img.width);
    }

    uLongf comp_len = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (::compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw IoError("png: zlib compression failed");
    }
    comp.resize(comp_len);

    std::vector<std::uint8_t> out;
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);

    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(img.width);
    ihdr[4] = static_cast<std::uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 0;   // color type: grayscale
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    detail::append_chunk(out, "IHDR", ihdr, 13);
    detail::append_chunk(out, "IDAT", comp.data(), static_cast<std::uint32_t>(comp.size()));
    detail::append_chunk(out, "IEND", nullptr, 0);
    return out;
}

inline void write_png_gray8(const std::string& path, const Image& img) {
    auto bytes = encode_png_gray8(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

}  // namespace kanizsa
