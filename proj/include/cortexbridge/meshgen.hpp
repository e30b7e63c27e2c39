#pragma once

#include "cortexbridge/mesh.hpp"

namespace cortexbridge::mesh {

// Unit icosphere, `subdivisions` 4-way refinements of the icosahedron.
// All vertices labeled "sphere".
SurfaceMesh make_icosphere(int subdivisions);

// Upper unit hemisphere from a latitude/longitude grid: `rings` latitude
// bands between pole and equator, `segments` longitude steps. The equator is
// the single boundary loop. Interior vertices are labeled by quadrant
// (quad_px, quad_py, quad_nx, quad_ny by azimuth); the outermost ring of
// vertices is labeled "other" so ROI extraction has a nontrivial rim to cut.
SurfaceMesh make_hemisphere(int rings, int segments);

// Quadrant label of azimuth phi (radians).
std::string quadrant_label(double phi);

}  // namespace cortexbridge::mesh
