#include "cortexbridge/disk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cortexbridge/io_util.hpp"

namespace cortexbridge::disk {

namespace {

double clamp11(double x) { return std::min(1.0, std::max(-1.0, x)); }

double normalize(double raw, const NormPolicy& n) { return clamp11((raw - n.offset) / n.scale); }
double denormalize(double val, const NormPolicy& n) { return val * n.scale + n.offset; }

// Linearly interpolated percentile of a sorted sample.
double percentile_sorted(const std::vector<double>& sorted, double p) {
    double idx = p / 100.0 * double(sorted.size() - 1);
    size_t lo = size_t(idx);
    size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = idx - double(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// First-vertex-anchored interpolation: exact for equal corner values.
double bary_interp(const std::array<double, 3>& w, double x0, double x1, double x2) {
    return x0 + w[1] * (x1 - x0) + w[2] * (x2 - x0);
}

}  // namespace

NormPolicy percentile_norm(const std::vector<double>& values) {
    if (values.empty()) return {};
    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    double p1 = percentile_sorted(sorted, 1.0);
    double p99 = percentile_sorted(sorted, 99.0);
    NormPolicy n;
    n.offset = (p1 + p99) / 2.0;
    n.scale = (p99 - p1) / 2.0;
    if (n.scale == 0) n.scale = 1.0;  // constant series normalizes to 0
    return n;
}

RasterPlan make_raster_plan(const mesh::RoiPatch& patch,
                            const conformal::DiskParameterization& param, int resolution) {
    const auto& m = patch.submesh;
    if (int(param.uv.size()) != m.n_vertices())
        throw ShapeMismatch("parameterization does not cover the patch");
    if (conformal::count_flipped_faces(m, param.uv) > 0)
        throw NotBijective("parameterization has flipped faces");

    RasterPlan plan;
    plan.h = plan.w = resolution;
    plan.mask = GridMask(resolution, resolution);
    plan.face.assign(size_t(resolution) * resolution, -1);
    plan.weights.assign(size_t(resolution) * resolution, {0, 0, 0});

    // Uniform spatial index over the face bounding boxes.
    const int cells = std::max(1, int(std::ceil(std::sqrt(double(m.n_faces())))));
    const double cell_sz = 2.0 / cells;
    std::vector<std::vector<int32_t>> bucket(size_t(cells) * cells);
    auto cell_of = [&](double x) {
        return std::min(cells - 1, std::max(0, int((x + 1.0) / cell_sz)));
    };
    for (int f = 0; f < m.n_faces(); ++f) {  // ascending: ties resolve to lowest index
        const auto& tri = m.faces[f];
        double xmin = 2, xmax = -2, ymin = 2, ymax = -2;
        for (int k = 0; k < 3; ++k) {
            xmin = std::min(xmin, param.uv[tri[k]][0]);
            xmax = std::max(xmax, param.uv[tri[k]][0]);
            ymin = std::min(ymin, param.uv[tri[k]][1]);
            ymax = std::max(ymax, param.uv[tri[k]][1]);
        }
        for (int cy = cell_of(ymin); cy <= cell_of(ymax); ++cy)
            for (int cx = cell_of(xmin); cx <= cell_of(xmax); ++cx)
                bucket[size_t(cy) * cells + cx].push_back(int32_t(f));
    }

    constexpr double kEdgeTol = 1e-12;
    for (int i = 0; i < resolution; ++i) {
        double v = -1.0 + (i + 0.5) * 2.0 / resolution;
        for (int j = 0; j < resolution; ++j) {
            double u = -1.0 + (j + 0.5) * 2.0 / resolution;
            size_t px = size_t(i) * resolution + j;
            if (u * u + v * v > 1.0) continue;
            for (int32_t f : bucket[size_t(cell_of(v)) * cells + cell_of(u)]) {
                const auto& tri = m.faces[f];
                const auto& a = param.uv[tri[0]];
                const auto& b = param.uv[tri[1]];
                const auto& c = param.uv[tri[2]];
                double det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                if (det == 0) continue;
                double w1 = ((u - a[0]) * (c[1] - a[1]) - (v - a[1]) * (c[0] - a[0])) / det;
                double w2 = ((b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0])) / det;
                double w0 = 1.0 - w1 - w2;
                if (w0 < -kEdgeTol || w1 < -kEdgeTol || w2 < -kEdgeTol) continue;
                w0 = std::max(w0, 0.0);
                w1 = std::max(w1, 0.0);
                w2 = std::max(w2, 0.0);
                double s = w0 + w1 + w2;
                plan.face[px] = f;
                plan.weights[px] = {w0 / s, w1 / s, w2 / s};
                plan.mask.m[px] = 1;
                break;
            }
        }
    }
    return plan;
}

BrainDisk rasterize(const RasterPlan& plan, const mesh::RoiPatch& patch,
                    const std::vector<double>& values, const NormPolicy& norm, int time_index) {
    const auto& m = patch.submesh;
    if (int(values.size()) != m.n_vertices())
        throw ShapeMismatch("value count does not match patch vertex count");

    std::vector<double> nv(values.size());
    for (size_t i = 0; i < values.size(); ++i) nv[i] = normalize(values[i], norm);

    BrainDisk d;
    d.image = GridImage(plan.h, plan.w);
    d.mask = plan.mask;
    d.norm = norm;
    d.time_index = time_index;
    for (size_t px = 0; px < plan.face.size(); ++px) {
        if (plan.face[px] < 0) continue;
        const auto& tri = m.faces[plan.face[px]];
        d.image.v[px] = bary_interp(plan.weights[px], nv[tri[0]], nv[tri[1]], nv[tri[2]]);
    }
    return d;
}

BrainDisk rasterize(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                    const std::vector<double>& values, int resolution, const NormPolicy& norm) {
    return rasterize(make_raster_plan(patch, param, resolution), patch, values, norm, 0);
}

BrainDisk rasterize(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                    const std::vector<double>& values, int resolution) {
    return rasterize(patch, param, values, resolution, percentile_norm(values));
}

DiskSeries rasterize_series(const mesh::RoiPatch& patch,
                            const conformal::DiskParameterization& param,
                            const mesh::SignalSeries& signals, int resolution) {
    if (signals.n_vertices != patch.submesh.n_vertices())
        throw ShapeMismatch("signal vertex count does not match patch");
    NormPolicy norm = percentile_norm(signals.values);
    RasterPlan plan = make_raster_plan(patch, param, resolution);
    DiskSeries series;
    series.disks.reserve(signals.n_samples);
    std::vector<double> slice(signals.n_vertices);
    for (int t = 0; t < signals.n_samples; ++t) {
        for (int v = 0; v < signals.n_vertices; ++v) slice[v] = signals.at(v, t);
        series.disks.push_back(rasterize(plan, patch, slice, norm, t));
    }
    return series;
}

ResampleResult resample_to_vertices(const BrainDisk& disk,
                                    const conformal::DiskParameterization& param) {
    const int h = disk.image.h, w = disk.image.w;
    ResampleResult out;
    out.values.resize(param.uv.size());

    std::vector<std::pair<int, int>> masked;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (disk.mask.m[size_t(i) * w + j]) masked.emplace_back(i, j);

    for (size_t vtx = 0; vtx < param.uv.size(); ++vtx) {
        double x = (param.uv[vtx][0] + 1.0) * 0.5 * w - 0.5;  // continuous column
        double y = (param.uv[vtx][1] + 1.0) * 0.5 * h - 0.5;  // continuous row
        int j0 = int(std::floor(x)), i0 = int(std::floor(y));
        double fx = x - j0, fy = y - i0;

        bool usable = true;
        double corner[2][2] = {};
        for (int di = 0; di < 2 && usable; ++di)
            for (int dj = 0; dj < 2 && usable; ++dj) {
                int ii = i0 + di, jj = j0 + dj;
                if (ii < 0 || ii >= h || jj < 0 || jj >= w ||
                    !disk.mask.m[size_t(ii) * w + jj])
                    usable = false;
                else
                    corner[di][dj] = disk.image.v[size_t(ii) * w + jj];
            }

        double val;
        if (usable) {
            val = corner[0][0] + fx * (corner[0][1] - corner[0][0]) +
                  fy * (corner[1][0] - corner[0][0]) +
                  fx * fy * (corner[1][1] - corner[1][0] - corner[0][1] + corner[0][0]);
        } else {
            // Deterministic nearest masked pixel; ties to lowest (row, col).
            double best = std::numeric_limits<double>::infinity();
            int bi = 0, bj = 0;
            for (const auto& [mi, mj] : masked) {
                double d2 = (mi - y) * (mi - y) + (mj - x) * (mj - x);
                if (d2 < best) {
                    best = d2;
                    bi = mi;
                    bj = mj;
                }
            }
            val = disk.image.v[size_t(bi) * w + bj];
            ++out.fallback_count;
        }
        out.values[vtx] = denormalize(val, disk.norm);
    }
    return out;
}

double roundtrip_error(const mesh::RoiPatch& patch, const conformal::DiskParameterization& param,
                       const std::vector<double>& values, int resolution) {
    BrainDisk d = rasterize(patch, param, values, resolution);
    auto back = resample_to_vertices(d, param);
    double num = 0, den = 0;
    for (size_t v = 0; v < values.size(); ++v) {
        double diff = back.values[v] - values[v];
        num += diff * diff;
        den += values[v] * values[v];
    }
    if (den == 0) return num == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

DiskSeries load_disk_series(const std::string& path) {
    auto is = io::open_input(path);
    io::check_magic(is, "BDSK1");
    auto h = io::read_pod<uint32_t>(is);
    auto w = io::read_pod<uint32_t>(is);
    auto t = io::read_pod<uint32_t>(is);
    NormPolicy norm;
    norm.offset = io::read_pod<double>(is);
    norm.scale = io::read_pod<double>(is);
    GridMask mask{int(h), int(w)};
    io::read_array(is, mask.m, size_t(h) * w);

    DiskSeries series;
    series.disks.reserve(t);
    std::vector<float> buf;
    for (uint32_t k = 0; k < t; ++k) {
        BrainDisk d;
        d.image = GridImage(int(h), int(w));
        d.mask = mask;
        d.norm = norm;
        d.time_index = int(k);
        io::read_array(is, buf, size_t(h) * w);
        for (size_t px = 0; px < buf.size(); ++px) d.image.v[px] = double(buf[px]);
        series.disks.push_back(std::move(d));
    }
    return series;
}

void save_disk_series(const DiskSeries& series, const std::string& path) {
    if (series.disks.empty()) throw ShapeMismatch("refusing to save an empty disk series");
    const auto& first = series.disks.front();
    auto os = io::open_output(path);
    io::write_magic(os, "BDSK1");
    io::write_pod(os, uint32_t(first.image.h));
    io::write_pod(os, uint32_t(first.image.w));
    io::write_pod(os, uint32_t(series.disks.size()));
    io::write_pod(os, first.norm.offset);
    io::write_pod(os, first.norm.scale);
    io::write_array(os, first.mask.m);
    std::vector<float> buf(first.image.v.size());
    for (const auto& d : series.disks) {
        if (d.image.h != first.image.h || d.image.w != first.image.w)
            throw ShapeMismatch("disk series has mixed shapes");
        for (size_t px = 0; px < buf.size(); ++px) buf[px] = float(d.image.v[px]);
        io::write_array(os, buf);
    }
    os.flush();
}

}  // namespace cortexbridge::disk
