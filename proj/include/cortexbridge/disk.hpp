#pragma once

#include <string>

#include "cortexbridge/conformal.hpp"
#include "cortexbridge/grid.hpp"
#include "cortexbridge/mesh.hpp"

namespace cortexbridge::disk {

struct NotBijective : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Affine normalization raw -> (raw - offset) / scale, clamped to [-1, 1].
struct NormPolicy {
    double offset = 0.0;
    double scale = 1.0;
};

// Per-series policy: 1st..99th percentile range maps to [-1, 1].
NormPolicy percentile_norm(const std::vector<double>& values);

struct BrainDisk {
    GridImage image;  // unmasked pixels carry 0
    GridMask mask;
    NormPolicy norm;
    int time_index = 0;
};

struct DiskSeries {
    std::vector<BrainDisk> disks;  // shared shape and mask
    std::string norm_policy_id = "percentile_1_99_sym";
};

// Pixel -> (face, barycentric weights) lookup, shared by every time step.
// Pixel centers: u = -1 + (col+0.5)*2/W, v = -1 + (row+0.5)*2/H.
struct RasterPlan {
    int h = 0, w = 0;
    GridMask mask;
    std::vector<int32_t> face;                   // per pixel, -1 outside
    std::vector<std::array<double, 3>> weights;  // per pixel
};

RasterPlan make_raster_plan(const mesh::RoiPatch& patch,
                            const conformal::DiskParameterization& param, int resolution);

BrainDisk rasterize(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                    const std::vector<double>& values, int resolution);
BrainDisk rasterize(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                    const std::vector<double>& values, int resolution, const NormPolicy& norm);
BrainDisk rasterize(const RasterPlan& plan, const mesh::RoiPatch& patch,
                    const std::vector<double>& values, const NormPolicy& norm, int time_index);

DiskSeries rasterize_series(const mesh::RoiPatch& patch,
                            const conformal::DiskParameterization& param,
                            const mesh::SignalSeries& signals, int resolution);

struct ResampleResult {
    std::vector<double> values;  // denormalized, per vertex
    int fallback_count = 0;      // vertices served by the nearest masked pixel
};

ResampleResult resample_to_vertices(const BrainDisk& disk,
                                    const conformal::DiskParameterization& param);

double roundtrip_error(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                       const std::vector<double>& values, int resolution);

DiskSeries load_disk_series(const std::string& path);
void save_disk_series(const DiskSeries& series, const std::string& path);

}  // namespace cortexbridge::disk
