#pragma once

#include <string>

#include "cortexbridge/grid.hpp"

namespace cortexbridge::imageio {

// Binary PGM (P5). Values clamp to [lo, hi] and map linearly to 0..255;
// pixels outside the mask are written as 0.
void write_pgm(const std::string& path, const GridImage& image,
               const GridMask& mask, double lo = -1.0, double hi = 1.0);

// Truecolor PNG with the fixed diverging colormap: lo is blue (0,0,255),
// the midpoint of [lo, hi] is white, hi is red (255,0,0), linear in between.
// Pixels outside the mask are black.
void write_png(const std::string& path, const GridImage& image,
               const GridMask& mask, double lo = -1.0, double hi = 1.0);

}  // namespace cortexbridge::imageio
