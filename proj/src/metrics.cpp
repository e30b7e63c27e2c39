#include "cortexbridge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "json.hpp"

namespace cortexbridge::metrics {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr int kMinCoarseSide = 8;
constexpr double kCanonicalWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

double signed_pow(double m, double e) {
    if (m == 0.0) return 0.0;
    return std::copysign(std::pow(std::abs(m), e), m);
}

struct LevelStats {
    double mean_lcs = 0.0;
    double mean_cs = 0.0;
};

LevelStats eval_level(const LevelPlan& lp, const std::vector<double>& a,
                      const std::vector<double>& b, double c1, double c2) {
    if (int(a.size()) != lp.h * lp.w || int(b.size()) != lp.h * lp.w)
        throw ShapeMismatch("image size does not match the window plan");
    if (lp.windows.empty()) throw EmptyMask("no valid windows at this scale");

    double sum_lcs = 0.0, sum_cs = 0.0;
    for (const auto& win : lp.windows) {
        double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
        for (size_t k = 0; k < win.px.size(); ++k) {
            double wa = a[size_t(win.px[k])], wb = b[size_t(win.px[k])];
            double wt = win.wgt[k];
            ma += wt * wa;
            mb += wt * wb;
            aa += wt * wa * wa;
            bb += wt * wb * wb;
            ab += wt * wa * wb;
        }
        double va = aa - ma * ma, vb = bb - mb * mb, cov = ab - ma * mb;
        double l = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        double cs = (2 * cov + c2) / (va + vb + c2);
        sum_lcs += l * cs;
        sum_cs += cs;
    }
    double n = double(lp.windows.size());
    return {sum_lcs / n, sum_cs / n};
}

std::vector<double> downsample(const LevelPlan& lp, const std::vector<double>& x) {
    std::vector<double> out(size_t((lp.h / 2) * (lp.w / 2)), 0.0);
    for (const auto& cell : lp.pool) {
        double acc = 0;
        for (size_t k = 0; k < cell.px.size(); ++k) acc += cell.wgt[k] * x[size_t(cell.px[k])];
        out[size_t(cell.center)] = acc;
    }
    return out;
}

void require_pair(const GridImage& a, const GridImage& b, const GridMask& mask) {
    if (a.h != b.h || a.w != b.w || a.h != mask.h || a.w != mask.w)
        throw ShapeMismatch("image/mask shapes disagree");
}

std::string format_double(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

}  // namespace

LevelPlan make_level_plan(const GridMask& mask) {
    LevelPlan lp;
    lp.h = mask.h;
    lp.w = mask.w;
    lp.mask = mask;

    const int r = kWindow / 2;
    double g[kWindow][kWindow];
    for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj)
            g[di + r][dj + r] = std::exp(-(di * di + dj * dj) / (2 * kSigma * kSigma));

    for (int i = 0; i < lp.h; ++i) {
        for (int j = 0; j < lp.w; ++j) {
            if (!mask.at(i, j)) continue;
            SparseWindow win;
            win.center = i * lp.w + j;
            int in_image = 0;
            double total = 0;
            for (int di = -r; di <= r; ++di) {
                int ii = i + di;
                if (ii < 0 || ii >= lp.h) continue;
                for (int dj = -r; dj <= r; ++dj) {
                    int jj = j + dj;
                    if (jj < 0 || jj >= lp.w) continue;
                    ++in_image;
                    if (!mask.at(ii, jj)) continue;
                    win.px.push_back(ii * lp.w + jj);
                    win.wgt.push_back(g[di + r][dj + r]);
                    total += g[di + r][dj + r];
                }
            }
            if (2 * int(win.px.size()) < in_image) continue;  // under half masked: skip
            for (auto& wt : win.wgt) wt /= total;
            lp.windows.push_back(std::move(win));
        }
    }
    return lp;
}

MsssimPlan make_msssim_plan(const GridMask& mask, int levels) {
    MsssimPlan plan;
    levels = std::max(1, std::min(levels, 5));
    int side = std::min(mask.h, mask.w);
    while (levels > 1 && (side >> (levels - 1)) < kMinCoarseSide) --levels;
    plan.levels = levels;

    double wsum = 0;
    for (int k = 0; k < levels; ++k) wsum += kCanonicalWeights[k];
    for (int k = 0; k < levels; ++k) plan.weights.push_back(kCanonicalWeights[k] / wsum);

    GridMask cur = mask;
    for (int k = 0; k < levels; ++k) {
        LevelPlan lp = make_level_plan(cur);
        if (lp.windows.empty()) throw EmptyMask("mask too sparse for the requested scales");
        if (k + 1 < levels) {
            int h2 = lp.h / 2, w2 = lp.w / 2;
            GridMask next(h2, w2);
            for (int ci = 0; ci < h2; ++ci) {
                for (int cj = 0; cj < w2; ++cj) {
                    SparseWindow cell;
                    cell.center = ci * w2 + cj;
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj)
                            if (cur.at(2 * ci + di, 2 * cj + dj))
                                cell.px.push_back((2 * ci + di) * lp.w + (2 * cj + dj));
                    if (int(cell.px.size()) < 2) continue;  // coarse pixel stays unmasked
                    cell.wgt.assign(cell.px.size(), 1.0 / double(cell.px.size()));
                    next.m[size_t(cell.center)] = 1;
                    lp.pool.push_back(std::move(cell));
                }
            }
            cur = next;
        }
        plan.level.push_back(std::move(lp));
    }
    return plan;
}

double ssim(const LevelPlan& plan, const std::vector<double>& a, const std::vector<double>& b,
            double data_range) {
    double c1 = 0.01 * data_range, c2 = 0.03 * data_range;
    return eval_level(plan, a, b, c1 * c1, c2 * c2).mean_lcs;
}

double ssim(const GridImage& a, const GridImage& b, const GridMask& mask, double data_range) {
    require_pair(a, b, mask);
    return ssim(make_level_plan(mask), a.v, b.v, data_range);
}

MsSsimResult ms_ssim(const MsssimPlan& plan, const std::vector<double>& a,
                     const std::vector<double>& b, double data_range) {
    double c1 = 0.01 * data_range, c2 = 0.03 * data_range;
    c1 *= c1;
    c2 *= c2;
    MsSsimResult out;
    out.levels_used = plan.levels;
    out.value = 1.0;
    std::vector<double> cur_a = a, cur_b = b;
    for (int k = 0; k < plan.levels; ++k) {
        LevelStats st = eval_level(plan.level[size_t(k)], cur_a, cur_b, c1, c2);
        double m = (k + 1 == plan.levels) ? st.mean_lcs : st.mean_cs;
        out.value *= signed_pow(m, plan.weights[size_t(k)]);
        if (k + 1 < plan.levels) {
            cur_a = downsample(plan.level[size_t(k)], cur_a);
            cur_b = downsample(plan.level[size_t(k)], cur_b);
        }
    }
    return out;
}

MsSsimResult ms_ssim(const GridImage& a, const GridImage& b, const GridMask& mask, int levels,
                     double data_range) {
    require_pair(a, b, mask);
    return ms_ssim(make_msssim_plan(mask, levels), a.v, b.v, data_range);
}

PsnrResult psnr(const GridImage& a, const GridImage& b, const GridMask& mask, double data_range) {
    require_pair(a, b, mask);
    double acc = 0;
    int n = 0;
    for (size_t px = 0; px < mask.m.size(); ++px) {
        if (!mask.m[px]) continue;
        double d = a.v[px] - b.v[px];
        acc += d * d;
        ++n;
    }
    if (n == 0) throw EmptyMask("psnr needs at least one masked pixel");
    double mse = acc / n;
    if (mse == 0.0) return {99.0, true};
    return {10.0 * std::log10(data_range * data_range / mse), false};
}

Eigen::MatrixXd sqrt_spd(const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd a = 0.5 * (m + m.transpose());
    const int n = int(a.rows());
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd y = a, z = id;
    auto log_abs_det = [](const Eigen::PartialPivLU<Eigen::MatrixXd>& lu) {
        return lu.matrixLU().diagonal().array().abs().log().sum();
    };
    for (int it = 0; it < 100; ++it) {
        Eigen::PartialPivLU<Eigen::MatrixXd> lu_y(y), lu_z(z);
        // Determinantal scaling keeps ill-conditioned inputs in the fast phase.
        double gamma = std::exp(-(log_abs_det(lu_y) + log_abs_det(lu_z)) / (2.0 * n));
        if (!std::isfinite(gamma)) break;
        Eigen::MatrixXd yinv = lu_y.solve(id) / gamma;
        Eigen::MatrixXd zinv = lu_z.solve(id) / gamma;
        if (!yinv.allFinite() || !zinv.allFinite()) break;
        Eigen::MatrixXd yn = 0.5 * (gamma * y + zinv);
        Eigen::MatrixXd zn = 0.5 * (gamma * z + yinv);
        double step = (yn - y).norm();
        y = yn;
        z = zn;
        if (step <= 1e-13 * std::max(1.0, y.norm())) break;
    }
    if (!y.allFinite() || (y * y - a).norm() > 1e-8 * (1.0 + a.norm()))
        throw SingularCovariance("matrix square root did not converge");
    return y;
}

FrechetResult frechet_feature_distance(const std::vector<GridImage>& set_a,
                                       const std::vector<GridImage>& set_b,
                                       const GridMask& mask, uint64_t feature_seed) {
    constexpr int kDim = 64;
    if (set_a.size() < 2 || set_b.size() < 2)
        throw std::invalid_argument("each set needs at least two samples");
    std::vector<int> masked;
    for (size_t px = 0; px < mask.m.size(); ++px)
        if (mask.m[px]) masked.push_back(int(px));
    if (masked.empty()) throw EmptyMask("feature distance needs a non-empty mask");

    std::mt19937_64 rng(feature_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd proj(kDim, int(masked.size()));
    for (int r = 0; r < kDim; ++r)
        for (int c = 0; c < int(masked.size()); ++c) proj(r, c) = gauss(rng);
    proj /= std::sqrt(double(masked.size()));

    auto featurize = [&](const std::vector<GridImage>& set) {
        Eigen::MatrixXd f(int(set.size()), kDim);
        Eigen::VectorXd x(int(masked.size()));
        for (size_t s = 0; s < set.size(); ++s) {
            if (set[s].h != mask.h || set[s].w != mask.w)
                throw ShapeMismatch("disk does not match the shared mask");
            for (size_t k = 0; k < masked.size(); ++k) x(int(k)) = set[s].v[size_t(masked[k])];
            f.row(int(s)) = (proj * x).transpose();
        }
        return f;
    };

    Eigen::MatrixXd fa = featurize(set_a), fb = featurize(set_b);
    Eigen::VectorXd mu_a = fa.colwise().mean(), mu_b = fb.colwise().mean();
    Eigen::MatrixXd ca = fa.rowwise() - mu_a.transpose();
    Eigen::MatrixXd cb = fb.rowwise() - mu_b.transpose();
    Eigen::MatrixXd sig_a = ca.transpose() * ca / double(fa.rows() - 1);
    Eigen::MatrixXd sig_b = cb.transpose() * cb / double(fb.rows() - 1);

    FrechetResult out;
    out.low_sample = fa.rows() < 2 * kDim || fb.rows() < 2 * kDim;

    auto cross_trace = [](const Eigen::MatrixXd& sa, const Eigen::MatrixXd& sb) {
        Eigen::MatrixXd s = sqrt_spd(sa);
        Eigen::MatrixXd inner = s * sb * s;
        return sqrt_spd(inner).trace();
    };

    double tr_cross;
    try {
        tr_cross = cross_trace(sig_a, sig_b);
    } catch (const SingularCovariance&) {
        out.jittered = true;
        const Eigen::MatrixXd jitter = 1e-6 * Eigen::MatrixXd::Identity(kDim, kDim);
        sig_a += jitter;
        sig_b += jitter;
        tr_cross = cross_trace(sig_a, sig_b);
    }
    out.distance =
        (mu_a - mu_b).squaredNorm() + sig_a.trace() + sig_b.trace() - 2.0 * tr_cross;
    return out;
}

MetricReport evaluate_series(const disk::DiskSeries& a, const disk::DiskSeries& b,
                             uint64_t feature_seed) {
    if (a.disks.size() != b.disks.size() || a.disks.empty())
        throw ShapeMismatch("series must pair slice for slice");
    const GridMask& mask = a.disks[0].mask;
    std::vector<GridImage> imgs_a, imgs_b;
    for (size_t t = 0; t < a.disks.size(); ++t) {
        if (!(a.disks[t].mask == mask) || !(b.disks[t].mask == mask))
            throw ShapeMismatch("series must share one mask");
        imgs_a.push_back(a.disks[t].image);
        imgs_b.push_back(b.disks[t].image);
    }

    MsssimPlan plan = make_msssim_plan(mask, 5);
    MetricReport rep;
    rep.n_slices = int(a.disks.size());
    rep.msssim_levels = plan.levels;
    for (size_t t = 0; t < a.disks.size(); ++t) {
        SliceMetrics sm;
        sm.time_index = a.disks[t].time_index;
        sm.ssim = ssim(plan.level[0], imgs_a[t].v, imgs_b[t].v);
        sm.ms_ssim = ms_ssim(plan, imgs_a[t].v, imgs_b[t].v).value;
        PsnrResult pr = psnr(imgs_a[t], imgs_b[t], mask);
        sm.psnr_db = pr.db;
        sm.psnr_capped = pr.capped;
        rep.ssim += sm.ssim;
        rep.ms_ssim += sm.ms_ssim;
        rep.psnr_db += sm.psnr_db;
        rep.slices.push_back(sm);
    }
    rep.ssim /= rep.n_slices;
    rep.ms_ssim /= rep.n_slices;
    rep.psnr_db /= rep.n_slices;

    FrechetResult fr = frechet_feature_distance(imgs_a, imgs_b, mask, feature_seed);
    rep.frechet_distance = fr.distance;
    rep.frechet_jittered = fr.jittered;
    rep.frechet_low_sample = fr.low_sample;
    return rep;
}

std::string to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["ssim"] = report.ssim;
    j["ms_ssim"] = report.ms_ssim;
    j["psnr_db"] = report.psnr_db;
    j["frechet_distance"] = report.frechet_distance;
    j["n_slices"] = report.n_slices;
    j["msssim_levels"] = report.msssim_levels;
    j["frechet_jittered"] = report.frechet_jittered;
    j["frechet_low_sample"] = report.frechet_low_sample;
    j["slices"] = nlohmann::ordered_json::array();
    for (const auto& s : report.slices) {
        nlohmann::ordered_json js;
        js["time_index"] = s.time_index;
        js["ssim"] = s.ssim;
        js["ms_ssim"] = s.ms_ssim;
        js["psnr_db"] = s.psnr_db;
        js["psnr_capped"] = s.psnr_capped;
        j["slices"].push_back(js);
    }
    return j.dump(2);
}

std::string to_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "slice,ssim,ms_ssim,psnr_db,psnr_capped,frechet_distance\n";
    for (const auto& s : report.slices)
        os << s.time_index << "," << format_double(s.ssim) << "," << format_double(s.ms_ssim)
           << "," << format_double(s.psnr_db) << "," << (s.psnr_capped ? 1 : 0) << ",\n";
    os << "mean," << format_double(report.ssim) << "," << format_double(report.ms_ssim) << ","
       << format_double(report.psnr_db) << ",," << format_double(report.frechet_distance)
       << "\n";
    return os.str();
}

}  // namespace cortexbridge::metrics
