#include "cortexbridge/prf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <thread>

#include "cortexbridge/io_util.hpp"

namespace cortexbridge::prf {

namespace {

double gamma_lobe(double t, double delay, double dispersion) {
    if (t <= 0.0) return 0.0;
    const double k = delay / dispersion;
    return std::pow(t / delay, k) * std::exp(-(t - delay) / dispersion);
}

void validate_movie(const StimulusMovie& stim) {
    if (stim.t_frames < 1 || stim.grid < 1) throw std::invalid_argument("stimulus: empty movie");
    if (!(stim.extent_deg > 0.0)) throw std::invalid_argument("stimulus: extent must be positive");
    if (!(stim.tr_seconds > 0.0)) throw std::invalid_argument("stimulus: tr must be positive");
    const size_t want = size_t(stim.t_frames) * stim.grid * stim.grid;
    if (stim.frames.size() != want) throw std::invalid_argument("stimulus: frame buffer size");
    for (double v : stim.frames)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("stimulus: contrast outside [0,1]");
}

std::vector<double> rf_drive(const std::vector<double>& rf, const StimulusMovie& stim) {
    const int npix = stim.grid * stim.grid;
    std::vector<double> drive(size_t(stim.t_frames), 0.0);
    for (int t = 0; t < stim.t_frames; ++t) {
        const double* f = stim.frame(t);
        double acc = 0.0;
        for (int p = 0; p < npix; ++p) acc += rf[size_t(p)] * f[p];
        drive[size_t(t)] = acc;
    }
    return drive;
}

std::vector<double> causal_convolve(const std::vector<double>& drive,
                                    const std::vector<double>& kernel) {
    const int n = int(drive.size()), k = int(kernel.size());
    std::vector<double> out(drive.size(), 0.0);
    for (int t = 0; t < n; ++t) {
        double acc = 0.0;
        const int kmax = std::min(t + 1, k);
        for (int q = 0; q < kmax; ++q) acc += kernel[size_t(q)] * drive[size_t(t - q)];
        out[size_t(t)] = acc;
    }
    return out;
}

struct Candidate {
    double sse = std::numeric_limits<double>::infinity();
    double beta = 0.0;
};

// Amplitude enters linearly: beta* = <p,y>/<p,p> minimizes ||beta p - y||^2.
Candidate score(const std::vector<double>& unit_pred, const std::vector<double>& y) {
    double pp = 0.0, py = 0.0, yy = 0.0;
    for (size_t t = 0; t < y.size(); ++t) {
        pp += unit_pred[t] * unit_pred[t];
        py += unit_pred[t] * y[t];
        yy += y[t] * y[t];
    }
    Candidate c;
    c.beta = pp > 0.0 ? py / pp : 0.0;
    c.sse = yy - 2.0 * c.beta * py + c.beta * c.beta * pp;
    return c;
}

}  // namespace

std::vector<double> sample_hrf(const HrfModel& hrf, double tr_seconds) {
    if (!(tr_seconds > 0.0)) throw std::invalid_argument("hrf: tr must be positive");
    if (!(hrf.kernel_length_s > 0.0)) throw std::invalid_argument("hrf: kernel length");
    if (!(hrf.peak_dispersion_s > 0.0) || !(hrf.undershoot_dispersion_s > 0.0))
        throw std::invalid_argument("hrf: dispersions must be positive");
    const int taps = int(std::floor(hrf.kernel_length_s / tr_seconds)) + 1;
    std::vector<double> h(size_t(taps), 0.0);
    for (int k = 0; k < taps; ++k) {
        const double t = k * tr_seconds;
        h[size_t(k)] = gamma_lobe(t, hrf.peak_delay_s, hrf.peak_dispersion_s) -
                       hrf.undershoot_ratio *
                           gamma_lobe(t, hrf.undershoot_delay_s, hrf.undershoot_dispersion_s);
    }
    const double peak = *std::max_element(h.begin(), h.end());
    if (!(peak > 0.0)) throw std::invalid_argument("hrf: kernel has no positive lobe");
    for (auto& v : h) v /= peak;
    return h;
}

double grid_coordinate(int i, int grid, double extent_deg) {
    return -extent_deg + (2.0 * i + 1.0) * extent_deg / grid;
}

std::vector<double> gaussian_rf(double v1_deg, double v2_deg, double sigma_deg, int grid,
                                double extent_deg) {
    if (!(sigma_deg > 0.0)) throw std::invalid_argument("gaussian_rf: sigma must be positive");
    if (grid < 1 || !(extent_deg > 0.0)) throw std::invalid_argument("gaussian_rf: bad grid");
    std::vector<double> w(size_t(grid) * grid);
    const double inv = 1.0 / (2.0 * sigma_deg * sigma_deg);
    double total = 0.0;
    for (int i = 0; i < grid; ++i) {
        const double x1 = grid_coordinate(i, grid, extent_deg);
        for (int j = 0; j < grid; ++j) {
            const double x2 = grid_coordinate(j, grid, extent_deg);
            const double d2 = (v1_deg - x1) * (v1_deg - x1) + (v2_deg - x2) * (v2_deg - x2);
            const double g = std::exp(-d2 * inv);
            w[size_t(i) * grid + j] = g;
            total += g;
        }
    }
    if (!(total > 0.0)) {
        // All weights underflowed: fall back to a delta at the nearest node.
        int bi = 0, bj = 0;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < grid; ++i)
            for (int j = 0; j < grid; ++j) {
                const double x1 = grid_coordinate(i, grid, extent_deg);
                const double x2 = grid_coordinate(j, grid, extent_deg);
                const double d2 =
                    (v1_deg - x1) * (v1_deg - x1) + (v2_deg - x2) * (v2_deg - x2);
                if (d2 < best) best = d2, bi = i, bj = j;
            }
        std::fill(w.begin(), w.end(), 0.0);
        w[size_t(bi) * grid + bj] = 1.0;
        return w;
    }
    for (auto& v : w) v /= total;
    return w;
}

std::vector<double> predict_timeseries(const PrfParams& params, const StimulusMovie& stim,
                                       const HrfModel& hrf) {
    validate_movie(stim);
    const auto rf = gaussian_rf(params.v1_deg, params.v2_deg, params.sigma_deg, stim.grid,
                                stim.extent_deg);
    auto pred = causal_convolve(rf_drive(rf, stim), sample_hrf(hrf, stim.tr_seconds));
    for (auto& v : pred) v *= params.beta;
    return pred;
}

double variance_explained(const std::vector<double>& pred, const std::vector<double>& obs) {
    if (pred.size() != obs.size() || obs.empty())
        throw std::invalid_argument("variance_explained: length mismatch");
    double mean = 0.0;
    for (double v : obs) mean += v;
    mean /= double(obs.size());
    double sse = 0.0, tv = 0.0;
    for (size_t t = 0; t < obs.size(); ++t) {
        sse += (pred[t] - obs[t]) * (pred[t] - obs[t]);
        tv += (obs[t] - mean) * (obs[t] - mean);
    }
    if (!(tv > 0.0)) throw ZeroVariance("variance_explained: constant observation");
    return (1.0 - sse / tv) * 100.0;
}

PrfParams fit_prf(const std::vector<double>& series, const StimulusMovie& stim,
                  const HrfModel& hrf, const PrfFitOptions& opts) {
    validate_movie(stim);
    if (int(series.size()) != stim.t_frames)
        throw std::invalid_argument("fit_prf: series length must match the movie");
    {
        double mean = 0.0;
        for (double v : series) mean += v;
        mean /= double(series.size());
        double tv = 0.0;
        for (double v : series) tv += (v - mean) * (v - mean);
        if (!(tv > 0.0)) throw FlatSeries("fit_prf: series has zero variance");
    }
    const auto kernel = sample_hrf(hrf, stim.tr_seconds);

    auto evaluate = [&](double v1, double v2, double sigma) {
        const auto rf = gaussian_rf(v1, v2, sigma, stim.grid, stim.extent_deg);
        return score(causal_convolve(rf_drive(rf, stim), kernel), series);
    };

    // Coarse lattice; strict improvement keeps the lowest-index winner on ties.
    double bv1 = 0.0, bv2 = 0.0, bsig = opts.sigma_fracs[0] * stim.extent_deg;
    Candidate best;
    for (int i = 0; i < opts.center_grid; ++i) {
        const double v1 = grid_coordinate(i, opts.center_grid, stim.extent_deg);
        for (int j = 0; j < opts.center_grid; ++j) {
            const double v2 = grid_coordinate(j, opts.center_grid, stim.extent_deg);
            for (double frac : opts.sigma_fracs) {
                const double sigma = frac * stim.extent_deg;
                const Candidate c = evaluate(v1, v2, sigma);
                if (c.sse < best.sse) {
                    best = c;
                    bv1 = v1, bv2 = v2, bsig = sigma;
                }
            }
        }
    }

    // Nelder-Mead over (v1, v2, log sigma) keeps the size positive.
    using Point = std::array<double, 3>;
    int evals = 0;
    auto f = [&](const Point& p) {
        ++evals;
        return evaluate(p[0], p[1], std::exp(p[2])).sse;
    };
    std::array<Point, 4> simplex;
    std::array<double, 4> fval;
    const Point seed = {bv1, bv2, std::log(bsig)};
    const std::array<double, 3> step = {0.25 * stim.extent_deg, 0.25 * stim.extent_deg, 0.35};
    simplex[0] = seed;
    for (int d = 0; d < 3; ++d) {
        simplex[size_t(d) + 1] = seed;
        simplex[size_t(d) + 1][size_t(d)] += step[size_t(d)];
    }
    for (int k = 0; k < 4; ++k) fval[size_t(k)] = f(simplex[size_t(k)]);

    auto order = [&] {
        std::array<int, 4> idx = {0, 1, 2, 3};
        std::sort(idx.begin(), idx.end(),
                  [&](int a, int b) { return fval[size_t(a)] < fval[size_t(b)]; });
        std::array<Point, 4> sp;
        std::array<double, 4> sf;
        for (int k = 0; k < 4; ++k) sp[size_t(k)] = simplex[size_t(idx[size_t(k)])],
                                    sf[size_t(k)] = fval[size_t(idx[size_t(k)])];
        simplex = sp;
        fval = sf;
    };
    order();
    while (evals < opts.max_evals && fval[3] - fval[0] > opts.sse_tol) {
        Point centroid = {0, 0, 0};
        for (int k = 0; k < 3; ++k)
            for (int d = 0; d < 3; ++d) centroid[size_t(d)] += simplex[size_t(k)][size_t(d)] / 3.0;
        auto blend = [&](double coeff) {
            Point p;
            for (int d = 0; d < 3; ++d)
                p[size_t(d)] = centroid[size_t(d)] + coeff * (centroid[size_t(d)] - simplex[3][size_t(d)]);
            return p;
        };
        const Point refl = blend(1.0);
        const double fr = f(refl);
        if (fr < fval[0]) {
            const Point expd = blend(2.0);
            const double fe = f(expd);
            if (fe < fr)
                simplex[3] = expd, fval[3] = fe;
            else
                simplex[3] = refl, fval[3] = fr;
        } else if (fr < fval[2]) {
            simplex[3] = refl, fval[3] = fr;
        } else {
            const Point contr = blend(fr < fval[3] ? 0.5 : -0.5);
            const double fc = f(contr);
            if (fc < std::min(fr, fval[3])) {
                simplex[3] = contr, fval[3] = fc;
            } else {
                for (int k = 1; k < 4; ++k) {
                    for (int d = 0; d < 3; ++d)
                        simplex[size_t(k)][size_t(d)] =
                            simplex[0][size_t(d)] +
                            0.5 * (simplex[size_t(k)][size_t(d)] - simplex[0][size_t(d)]);
                    fval[size_t(k)] = f(simplex[size_t(k)]);
                }
            }
        }
        order();
    }

    PrfParams out;
    out.v1_deg = simplex[0][0];
    out.v2_deg = simplex[0][1];
    out.sigma_deg = std::exp(simplex[0][2]);
    out.beta = evaluate(out.v1_deg, out.v2_deg, out.sigma_deg).beta;
    out.r2_percent = variance_explained(predict_timeseries(out, stim, hrf), series);
    return out;
}

std::vector<PrfParams> fit_all(const std::vector<std::vector<double>>& series,
                               const StimulusMovie& stim, const HrfModel& hrf,
                               const PrfFitOptions& opts) {
    std::vector<PrfParams> out(series.size());
    const int hw = int(std::thread::hardware_concurrency());
    const int threads = std::max(1, std::min<int>(opts.threads > 0 ? opts.threads : hw,
                                                  int(series.size())));
    std::vector<std::future<void>> work;
    for (int w = 0; w < threads; ++w)
        work.push_back(std::async(std::launch::async, [&, w] {
            for (size_t v = size_t(w); v < series.size(); v += size_t(threads))
                out[v] = fit_prf(series[v], stim, hrf, opts);
        }));
    for (auto& fut : work) fut.get();
    return out;
}

void write_stimulus(const StimulusMovie& stim, const std::string& path) {
    io::require_little_endian();
    validate_movie(stim);
    auto os = io::open_output(path);
    io::write_magic(os, "BSTM1");
    io::write_pod<uint32_t>(os, uint32_t(stim.t_frames));
    io::write_pod<uint32_t>(os, uint32_t(stim.grid));
    io::write_pod<double>(os, stim.extent_deg);
    io::write_pod<double>(os, stim.tr_seconds);
    std::vector<float> raw(stim.frames.begin(), stim.frames.end());
    io::write_array(os, raw);
    if (!os) throw io::IoError("failed writing " + path);
}

StimulusMovie read_stimulus(const std::string& path) {
    io::require_little_endian();
    auto is = io::open_input(path);
    io::check_magic(is, "BSTM1");
    StimulusMovie stim;
    stim.t_frames = int(io::read_pod<uint32_t>(is));
    stim.grid = int(io::read_pod<uint32_t>(is));
    stim.extent_deg = io::read_pod<double>(is);
    stim.tr_seconds = io::read_pod<double>(is);
    if (stim.t_frames < 1 || stim.grid < 1 || stim.grid > 4096)
        throw io::IoError("stimulus: implausible header in " + path);
    std::vector<float> raw;
    io::read_array(is, raw, size_t(stim.t_frames) * stim.grid * stim.grid);
    stim.frames.assign(raw.begin(), raw.end());
    try {
        validate_movie(stim);
    } catch (const std::invalid_argument& e) {
        throw io::IoError(std::string(e.what()) + " in " + path);
    }
    return stim;
}

void write_prf_csv(const std::vector<PrfParams>& params, const std::string& path) {
    auto os = io::open_output(path, false);
    os.precision(17);
    os << "index,v1,v2,sigma,beta,r2\n";
    for (size_t i = 0; i < params.size(); ++i)
        os << i << ',' << params[i].v1_deg << ',' << params[i].v2_deg << ','
           << params[i].sigma_deg << ',' << params[i].beta << ',' << params[i].r2_percent
           << '\n';
    if (!os) throw io::IoError("failed writing " + path);
}

}  // namespace cortexbridge::prf
