#include "cortexbridge/imageio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cortexbridge/io_util.hpp"

namespace cortexbridge::imageio {

namespace {

double unit_position(double v, double lo, double hi) {
    if (!(hi > lo)) throw std::invalid_argument("image export: need hi > lo");
    return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

uint8_t to_byte(double t) {
    return uint8_t(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
}

void append_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

void write_chunk(std::ostream& os, const char* type, const std::vector<uint8_t>& data) {
    std::vector<uint8_t> head;
    append_be32(head, uint32_t(data.size()));
    head.insert(head.end(), type, type + 4);
    os.write(reinterpret_cast<const char*>(head.data()), std::streamsize(head.size()));
    if (!data.empty())
        os.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
    std::vector<uint8_t> tail;
    append_be32(tail, uint32_t(crc));
    os.write(reinterpret_cast<const char*>(tail.data()), std::streamsize(tail.size()));
}

void require_matching(const GridImage& image, const GridMask& mask) {
    if (image.h != mask.h || image.w != mask.w)
        throw std::invalid_argument("image export: image/mask shape mismatch");
    if (image.h <= 0 || image.w <= 0)
        throw std::invalid_argument("image export: empty image");
}

}  // namespace

void write_pgm(const std::string& path, const GridImage& image,
               const GridMask& mask, double lo, double hi) {
    require_matching(image, mask);
    auto os = io::open_output(path);
    os << "P5\n" << image.w << " " << image.h << "\n255\n";
    std::vector<uint8_t> row(size_t(image.w));
    for (int i = 0; i < image.h; ++i) {
        for (int j = 0; j < image.w; ++j)
            row[size_t(j)] = mask.at(i, j) ? to_byte(unit_position(image.at(i, j), lo, hi)) : 0;
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!os) throw io::IoError("failed writing " + path);
}

void write_png(const std::string& path, const GridImage& image,
               const GridMask& mask, double lo, double hi) {
    require_matching(image, mask);

    // Filter byte 0 before every row, then RGB triples.
    std::vector<uint8_t> raw;
    raw.reserve(size_t(image.h) * (1 + 3 * size_t(image.w)));
    for (int i = 0; i < image.h; ++i) {
        raw.push_back(0);
        for (int j = 0; j < image.w; ++j) {
            uint8_t r = 0, g = 0, b = 0;
            if (mask.at(i, j)) {
                const double t = unit_position(image.at(i, j), lo, hi);
                if (t < 0.5) {
                    const double u = 2.0 * t;  // blue -> white
                    r = to_byte(u);
                    g = to_byte(u);
                    b = 255;
                } else {
                    const double u = 2.0 * t - 1.0;  // white -> red
                    r = 255;
                    g = to_byte(1.0 - u);
                    b = to_byte(1.0 - u);
                }
            }
            raw.push_back(r);
            raw.push_back(g);
            raw.push_back(b);
        }
    }

    uLongf comp_len = compressBound(uLong(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 9) != Z_OK)
        throw io::IoError("deflate failed for " + path);
    comp.resize(comp_len);

    auto os = io::open_output(path);
    static const uint8_t signature[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    os.write(reinterpret_cast<const char*>(signature), 8);

    std::vector<uint8_t> ihdr;
    append_be32(ihdr, uint32_t(image.w));
    append_be32(ihdr, uint32_t(image.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // truecolor
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // adaptive filtering
    ihdr.push_back(0);   // no interlace
    write_chunk(os, "IHDR", ihdr);
    write_chunk(os, "IDAT", comp);
    write_chunk(os, "IEND", {});
    if (!os) throw io::IoError("failed writing " + path);
}

}  // namespace cortexbridge::imageio
