#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace cortexbridge {

// Row-major H x W scalar image. Row 0 holds v = -1 (bottom of the parameter
// square), column 0 holds u = -1.
struct GridImage {
    int h = 0, w = 0;
    std::vector<double> v;

    GridImage() = default;
    GridImage(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

    double& at(int i, int j) { return v[size_t(i) * w + j]; }
    double at(int i, int j) const { return v[size_t(i) * w + j]; }
    size_t size() const { return v.size(); }

    bool same_shape(const GridImage& o) const { return h == o.h && w == o.w; }
};

struct GridMask {
    int h = 0, w = 0;
    std::vector<uint8_t> m;

    GridMask() = default;
    GridMask(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), m(size_t(h_) * w_, fill) {}

    uint8_t& at(int i, int j) { return m[size_t(i) * w + j]; }
    uint8_t at(int i, int j) const { return m[size_t(i) * w + j]; }

    int count() const {
        int c = 0;
        for (uint8_t b : m) c += b ? 1 : 0;
        return c;
    }
    bool operator==(const GridMask& o) const { return h == o.h && w == o.w && m == o.m; }
};

inline void require_same_shape(const GridImage& a, const GridImage& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("image shape mismatch");
}

}  // namespace cortexbridge
