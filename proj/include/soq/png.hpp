// SPDX-License-Identifier: Apache-2.0
//
// Minimal 8-bit RGB PNG I/O over zlib. Writes non-interlaced color type 2
// with filter 0 rows; the reader handles all five standard filters but only
// the 8-bit RGB / RGBA, non-interlaced layout we produce.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "soq/common.hpp"

namespace soq {

struct Image {
    int width = 0, height = 0;
    std::vector<uint8_t> rgb;  // height*width*3, row-major

    uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32(out, crc);
}

inline uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

}  // namespace pngdetail

inline std::vector<uint8_t> encode_png(const Image& img) {
    SOQ_REQUIRE(img.width > 0 && img.height > 0, "encode_png: empty image");
    SOQ_REQUIRE(img.rgb.size() == static_cast<size_t>(img.width) * img.height * 3,
                "encode_png: buffer size");
    // raw scanlines with filter byte 0
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * 3));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const uint8_t* row = &img.rgb[static_cast<size_t>(y) * img.width * 3];
        raw.insert(raw.end(), row, row + static_cast<size_t>(img.width) * 3);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> zbuf(zlen);
    if (compress2(zbuf.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("encode_png: deflate failed");
    zbuf.resize(zlen);

    std::vector<uint8_t> out;
    const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    out.insert(out.end(), sig, sig + 8);
    std::vector<uint8_t> ihdr;
    pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.width));
    pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    pngdetail::put_chunk(out, "IHDR", ihdr);
    pngdetail::put_chunk(out, "IDAT", zbuf);
    pngdetail::put_chunk(out, "IEND", {});
    return out;
}

inline void save_png(const Image& img, const std::string& path) {
    const auto bytes = encode_png(img);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("save_png: write failed " + path);
}

inline Image decode_png(const std::vector<uint8_t>& bytes) {
    const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw DataError("decode_png: bad signature");
    size_t pos = 8;
    Image img;
    int channels = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = pngdetail::get_u32(&bytes[pos]);
        if (pos + 12 + len > bytes.size()) throw DataError("decode_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
        const uint8_t* data = &bytes[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.width = static_cast<int>(pngdetail::get_u32(data));
            img.height = static_cast<int>(pngdetail::get_u32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || (color != 2 && color != 6) || interlace != 0)
                throw DataError("decode_png: unsupported layout");
            channels = color == 2 ? 3 : 4;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (img.width <= 0 || img.height <= 0 || idat.empty()) throw DataError("decode_png: no data");
    const size_t stride = static_cast<size_t>(img.width) * channels;
    std::vector<uint8_t> raw(static_cast<size_t>(img.height) * (stride + 1));
    uLongf rawlen = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        rawlen != raw.size())
        throw DataError("decode_png: inflate failed");

    // unfilter
    std::vector<uint8_t> pix(static_cast<size_t>(img.height) * stride, 0);
    for (int y = 0; y < img.height; ++y) {
        const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = &raw[static_cast<size_t>(y) * (stride + 1) + 1];
        uint8_t* dst = &pix[static_cast<size_t>(y) * stride];
        const uint8_t* up = y > 0 ? &pix[static_cast<size_t>(y - 1) * stride] : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(channels) ? dst[i - channels] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= static_cast<size_t>(channels)) ? up[i - channels] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    x += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw DataError("decode_png: bad filter type");
            }
            dst[i] = static_cast<uint8_t>(x & 0xff);
        }
    }
    img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.rgb[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
                    pix[static_cast<size_t>(y) * stride + static_cast<size_t>(x) * channels + c];
    return img;
}

inline Image load_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

}  // namespace soq
