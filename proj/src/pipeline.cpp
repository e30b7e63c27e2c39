#include "cortexbridge/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cortexbridge/disk.hpp"
#include "cortexbridge/imageio.hpp"
#include "cortexbridge/io_util.hpp"
#include "cortexbridge/mesh.hpp"
#include "cortexbridge/meshgen.hpp"
#include "cortexbridge/metrics.hpp"

namespace cortexbridge::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::vector<std::string> kStages = {"synth",   "downsample", "param", "rasterize",
                                          "train",   "enhance",    "resample", "prf",
                                          "eval",    "report"};

namespace {

constexpr const char* kConditions[3] = {"gt", "degraded", "enhanced"};
const std::set<std::string> kQuadrants = {"quad_px", "quad_py", "quad_nx", "quad_ny"};

enum SeedTag : uint64_t {
    kSeedSynth = 1,
    kSeedDownsample = 2,
    kSeedSplit = 3,
    kSeedTrain = 4,
    kSeedValid = 5,
    kSeedEnhance = 6,
};

uint64_t sub_seed(uint64_t base, SeedTag tag, uint64_t k) {
    uint64_t x = base + 0x9E3779B97F4A7C15ULL * uint64_t(tag);
    x ^= 0xBF58476D1CE4E5B9ULL * (k + 1);
    x ^= x >> 31;
    return x * 0x94D049BB133111EBULL;
}

class Reader {
  public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigInvalid(path_ + ": expected an object");
    }
    template <class T>
    void opt(const char* key, T& v) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            v = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigInvalid(path_ + "." + key + ": wrong value type");
        }
    }
    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigInvalid(path_ + "." + it.key() + ": unknown key");
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

struct RunPaths {
    fs::path base;

    explicit RunPaths(const ExperimentConfig& cfg) : base(run_dir(cfg)) {}

    std::string lock() const { return (base / ".lock").string(); }
    std::string mesh_fine() const { return (base / "mesh" / "fine.bmesh").string(); }
    std::string mesh_coarse() const { return (base / "mesh" / "coarse.bmesh").string(); }
    std::string stimulus() const { return (base / "stim" / "stimulus.bstm").string(); }
    std::string truth_csv(int k) const {
        return (base / "truth" / ("subject_" + std::to_string(k) + "_params.csv")).string();
    }
    std::string signals(int k, const std::string& cond) const {
        return (base / "signals" / ("subject_" + std::to_string(k) + "_" + cond + ".bsig"))
            .string();
    }
    std::string param_uv() const { return (base / "param" / "fine.buv").string(); }
    std::string disks(int k, const std::string& cond) const {
        return (base / "disks" / ("subject_" + std::to_string(k) + "_" + cond + ".bdsk"))
            .string();
    }
    std::string generator() const { return (base / "model" / "generator.bgen").string(); }
    std::string critic() const { return (base / "model" / "critic.bgen").string(); }
    std::string history() const { return (base / "model" / "history.csv").string(); }
    std::string train_summary() const { return (base / "model" / "train_summary.json").string(); }
    std::string checkpoints() const { return (base / "model" / "checkpoints").string(); }
    std::string enhance_summary() const {
        return (base / "model" / "enhance_summary.json").string();
    }
    std::string prf_csv(int k, const std::string& cond) const {
        return (base / "prf" / ("subject_" + std::to_string(k) + "_" + cond + ".csv")).string();
    }
    std::string eval_json() const { return (base / "eval" / "eval.json").string(); }
    std::string report_json() const { return (base / "report" / "report.json").string(); }
    std::string report_csv() const { return (base / "report" / "report.csv").string(); }
    std::string scatter_csv() const { return (base / "report" / "r2_scatter.csv").string(); }
    std::string figure(int k, const std::string& cond) const {
        return (base / "report" / "figures" /
                ("subject_" + std::to_string(k) + "_" + cond + "_t0.png"))
            .string();
    }
    std::string synth_manifest() const { return (base / "manifest" / "synth.json").string(); }
    std::string access_manifest(const std::string& stage) const {
        return (base / "manifest" / (stage + "_access.json")).string();
    }

    void prepare() const {
        for (const char* sub : {"mesh", "stim", "truth", "signals", "param", "disks", "model",
                                "prf", "eval", "report", "manifest"})
            fs::create_directories(base / sub);
        fs::create_directories(base / "model" / "checkpoints");
        fs::create_directories(base / "report" / "figures");
    }
};

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw MissingUpstream("missing upstream artifact: " + path);
}

// Exclusive-create lock file; released (and removed) on scope exit.
class RunLock {
  public:
    explicit RunLock(const std::string& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw LockHeld("run directory is locked by another writer: " + path +
                           " (remove the stale .lock after a crash)");
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    std::string path_;
    int fd_ = -1;
};

class AccessRecorder {
  public:
    AccessRecorder() : prev_(io::access_hook()) {
        io::access_hook() = [this](const std::string& p, bool write) {
            (write ? writes_ : reads_).insert(p);
            if (prev_) prev_(p, write);
        };
    }
    ~AccessRecorder() { io::access_hook() = prev_; }
    AccessRecorder(const AccessRecorder&) = delete;
    AccessRecorder& operator=(const AccessRecorder&) = delete;

    json manifest(const std::string& stage, const fs::path& base) const {
        auto rel = [&](const std::set<std::string>& src) {
            std::vector<std::string> out;
            for (const auto& p : src) {
                const auto r = fs::path(p).lexically_relative(base);
                out.push_back(r.empty() || r.native().rfind("..", 0) == 0 ? p : r.string());
            }
            std::sort(out.begin(), out.end());
            return out;
        };
        json j;
        j["stage"] = stage;
        j["reads"] = rel(reads_);
        j["writes"] = rel(writes_);
        return j;
    }

  private:
    std::set<std::string> reads_, writes_;
    std::function<void(const std::string&, bool)> prev_;
};

uint32_t file_crc32(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io::IoError("cannot open for checksum: " + path);
    uLong crc = crc32(0L, Z_NULL, 0);
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0)
        crc = crc32(crc, reinterpret_cast<const Bytef*>(buf), uInt(is.gcount()));
    return uint32_t(crc);
}

void write_json_file(const json& j, const std::string& path) {
    auto os = io::open_output(path, false);
    os << j.dump(2) << '\n';
    if (!os) throw io::IoError("failed writing " + path);
}

json read_json_file(const std::string& path) {
    auto is = io::open_input(path, false);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw io::IoError("bad JSON in " + path + ": " + e.what());
    }
}

mesh::RoiPatch load_patch(const std::string& mesh_path) {
    const auto m = mesh::load_mesh(mesh_path);
    return mesh::extract_roi(m, kQuadrants);
}

// Eight bar-sweep directions back to back; leftover frames stay blank.
prf::StimulusMovie make_bar_stimulus(const SynthSpec& spec) {
    prf::StimulusMovie stim;
    stim.t_frames = spec.t_frames;
    stim.grid = spec.stim_grid;
    stim.extent_deg = spec.extent_deg;
    stim.tr_seconds = spec.tr_seconds;
    stim.frames.assign(size_t(spec.t_frames) * spec.stim_grid * spec.stim_grid, 0.0);
    const int per_dir = spec.t_frames / 8;
    if (per_dir < 1) return stim;
    const double width = spec.extent_deg / 3.0;
    for (int d = 0; d < 8; ++d) {
        const double theta = d * (3.14159265358979323846 / 4.0);
        const double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < per_dir; ++k) {
            const int t = d * per_dir + k;
            const double frac = per_dir == 1 ? 0.5 : double(k) / (per_dir - 1);
            const double pos = -0.9 * spec.extent_deg + 1.8 * spec.extent_deg * frac;
            for (int i = 0; i < spec.stim_grid; ++i) {
                const double x1 = prf::grid_coordinate(i, spec.stim_grid, spec.extent_deg);
                for (int j = 0; j < spec.stim_grid; ++j) {
                    const double x2 = prf::grid_coordinate(j, spec.stim_grid, spec.extent_deg);
                    if (std::abs(x1 * c + x2 * s - pos) <= width / 2.0) stim.at(t, i, j) = 1.0;
                }
            }
        }
    }
    return stim;
}

// Smooth retinotopy-like ground truth: eccentricity follows the polar angle
// of the vertex, size grows with eccentricity, amplitude varies smoothly.
std::vector<prf::PrfParams> draw_truth(const mesh::RoiPatch& patch, const SynthSpec& spec,
                                       std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double rot = 0.4 * (unif(rng) - 0.5);
    const double phase = 2.0 * 3.14159265358979323846 * unif(rng);
    std::vector<prf::PrfParams> out(size_t(patch.submesh.n_vertices()));
    for (int v = 0; v < patch.submesh.n_vertices(); ++v) {
        const auto& p = patch.submesh.vertices[size_t(v)];
        const double r = std::max(1e-12, std::hypot(p[0], std::hypot(p[1], p[2])));
        const double polar = std::acos(std::clamp(p[2] / r, -1.0, 1.0));
        const double ecc_frac = std::clamp(polar / (3.14159265358979323846 / 2.0), 0.0, 1.0);
        const double ang = std::atan2(p[1], p[0]) + rot;
        const double ecc = 0.85 * spec.extent_deg * ecc_frac;
        prf::PrfParams t;
        t.v1_deg = ecc * std::cos(ang) + spec.param_jitter * spec.extent_deg * normal(rng);
        t.v2_deg = ecc * std::sin(ang) + spec.param_jitter * spec.extent_deg * normal(rng);
        t.sigma_deg = std::max(0.1, spec.sigma_min + spec.sigma_slope * ecc +
                                         spec.param_jitter * normal(rng));
        t.beta = spec.beta_base + spec.beta_span * std::sin(2.0 * ang + phase) +
                 spec.beta_base * spec.param_jitter * normal(rng);
        t.r2_percent = 0.0;
        out[size_t(v)] = t;
    }
    return out;
}

std::vector<int> subject_list(const ExperimentConfig& cfg, bool train) {
    return train ? cfg.train_ids : cfg.test_ids;
}

std::vector<int> all_subjects(const ExperimentConfig& cfg) {
    auto ids = cfg.train_ids;
    ids.insert(ids.end(), cfg.test_ids.begin(), cfg.test_ids.end());
    std::sort(ids.begin(), ids.end());
    return ids;
}

bridge::BridgeConfig bridge_config(const ExperimentConfig& cfg) {
    auto b = cfg.bridge;
    b.grid = bridge::TimeGrid::uniform(cfg.bridge_steps);
    return b;
}

bridge::TrainOptions train_options(const ExperimentConfig& cfg, const RunPaths& paths) {
    auto opt = cfg.train;
    opt.gen.image_h = opt.gen.image_w = cfg.resolution;
    opt.critic.image_h = opt.critic.image_w = cfg.resolution;
    opt.checkpoint_dir = paths.checkpoints();
    return opt;
}

// Validation slice indices for one subject, sorted; the rest train.
std::vector<int> validation_slices(const ExperimentConfig& cfg, int subject) {
    const int t = cfg.synth.t_frames;
    const int n_valid = int(std::lround(cfg.validation_fraction * t));
    std::vector<int> idx(size_t(t), 0);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(sub_seed(cfg.seed, kSeedSplit, uint64_t(subject)));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<int> valid(idx.begin(), idx.begin() + n_valid);
    std::sort(valid.begin(), valid.end());
    return valid;
}

disk::DiskSeries select_slices(const disk::DiskSeries& s, const std::vector<int>& keep) {
    disk::DiskSeries out;
    out.norm_policy_id = s.norm_policy_id;
    for (int i : keep) out.disks.push_back(s.disks[size_t(i)]);
    return out;
}

disk::DiskSeries drop_slices(const disk::DiskSeries& s, const std::vector<int>& dropped) {
    std::set<int> skip(dropped.begin(), dropped.end());
    disk::DiskSeries out;
    out.norm_policy_id = s.norm_policy_id;
    for (size_t i = 0; i < s.disks.size(); ++i)
        if (!skip.count(int(i))) out.disks.push_back(s.disks[i]);
    return out;
}

std::vector<std::vector<double>> vertex_series(const mesh::SignalSeries& s) {
    std::vector<std::vector<double>> out(size_t(s.n_vertices));
    for (int v = 0; v < s.n_vertices; ++v) {
        out[size_t(v)].resize(size_t(s.n_samples));
        for (int t = 0; t < s.n_samples; ++t) out[size_t(v)][size_t(t)] = s.at(v, t);
    }
    return out;
}

bool has_variance(const std::vector<double>& y) {
    for (size_t i = 1; i < y.size(); ++i)
        if (y[i] != y[0]) return true;
    return false;
}

// Per-vertex fits with flat series mapped to an all-zero row instead of an error.
std::vector<prf::PrfParams> fit_vertices(const std::vector<std::vector<double>>& series,
                                         const prf::StimulusMovie& stim,
                                         const prf::HrfModel& hrf,
                                         const prf::PrfFitOptions& opts) {
    std::vector<std::vector<double>> live;
    std::vector<size_t> where;
    for (size_t v = 0; v < series.size(); ++v)
        if (has_variance(series[v])) {
            live.push_back(series[v]);
            where.push_back(v);
        }
    const auto fits = prf::fit_all(live, stim, hrf, opts);
    std::vector<prf::PrfParams> out(series.size());
    for (auto& p : out) p = prf::PrfParams{0.0, 0.0, 1.0, 0.0, 0.0};
    for (size_t i = 0; i < where.size(); ++i) out[where[i]] = fits[i];
    return out;
}

struct PrfTable {
    std::vector<prf::PrfParams> rows;
    double mean_r2 = 0.0;
};

PrfTable read_prf_csv(const std::string& path) {
    auto is = io::open_input(path, false);
    std::string line;
    if (!std::getline(is, line) || line != "index,v1,v2,sigma,beta,r2")
        throw io::IoError("unexpected header in " + path);
    PrfTable table;
    double acc = 0.0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<double> vals;
        while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
        if (vals.size() != 6) throw io::IoError("malformed row in " + path);
        prf::PrfParams p;
        p.v1_deg = vals[1];
        p.v2_deg = vals[2];
        p.sigma_deg = vals[3];
        p.beta = vals[4];
        p.r2_percent = vals[5];
        table.rows.push_back(p);
        acc += p.r2_percent;
    }
    if (table.rows.empty()) throw io::IoError("empty table in " + path);
    table.mean_r2 = acc / double(table.rows.size());
    return table;
}

json metric_block(const metrics::MetricReport& r) {
    json j;
    j["ssim"] = r.ssim;
    j["ms_ssim"] = r.ms_ssim;
    j["psnr_db"] = r.psnr_db;
    j["frechet_distance"] = r.frechet_distance;
    j["n_slices"] = r.n_slices;
    j["msssim_levels"] = r.msssim_levels;
    j["frechet_jittered"] = r.frechet_jittered;
    j["frechet_low_sample"] = r.frechet_low_sample;
    return j;
}

// ---------------------------------------------------------------------------
// Stages

void stage_synth(const ExperimentConfig& cfg, const RunPaths& paths) {
    const auto fine = mesh::make_hemisphere(cfg.synth.fine_rings, cfg.synth.fine_segments);
    const auto coarse = mesh::make_hemisphere(cfg.synth.coarse_rings, cfg.synth.coarse_segments);
    mesh::save_mesh(fine, paths.mesh_fine());
    mesh::save_mesh(coarse, paths.mesh_coarse());

    const auto stim = make_bar_stimulus(cfg.synth);
    prf::write_stimulus(stim, paths.stimulus());

    const auto patch = mesh::extract_roi(fine, kQuadrants);
    for (int k : all_subjects(cfg)) {
        std::mt19937_64 rng(sub_seed(cfg.seed, kSeedSynth, uint64_t(k)));
        const auto truth = draw_truth(patch, cfg.synth, rng);
        prf::write_prf_csv(truth, paths.truth_csv(k));

        mesh::SignalSeries s;
        s.n_vertices = patch.submesh.n_vertices();
        s.n_samples = cfg.synth.t_frames;
        s.tr_seconds = cfg.synth.tr_seconds;
        s.values.resize(size_t(s.n_vertices) * s.n_samples);
        std::normal_distribution<double> noise(0.0, 1.0);
        for (int v = 0; v < s.n_vertices; ++v) {
            const auto pred = prf::predict_timeseries(truth[size_t(v)], stim, cfg.hrf);
            for (int t = 0; t < s.n_samples; ++t)
                s.at(v, t) = pred[size_t(t)] + cfg.synth.noise_sd_fine * noise(rng);
        }
        mesh::save_signals(s, paths.signals(k, "gt"));
    }

    json manifest;
    manifest["spec"] = config_to_json(cfg)["synth"];
    manifest["seed"] = cfg.seed;
    manifest["train_ids"] = cfg.train_ids;
    manifest["test_ids"] = cfg.test_ids;
    manifest["patch_vertices"] = patch.submesh.n_vertices();
    json files = json::array();
    std::vector<std::string> written = {paths.mesh_fine(), paths.mesh_coarse(),
                                        paths.stimulus()};
    json truth_map;
    for (int k : all_subjects(cfg)) {
        written.push_back(paths.truth_csv(k));
        written.push_back(paths.signals(k, "gt"));
        truth_map["subject_" + std::to_string(k)] =
            fs::path(paths.truth_csv(k)).lexically_relative(paths.base).string();
    }
    std::sort(written.begin(), written.end());
    for (const auto& p : written) {
        json f;
        f["path"] = fs::path(p).lexically_relative(paths.base).string();
        f["bytes"] = uint64_t(fs::file_size(p));
        char hex[16];
        std::snprintf(hex, sizeof hex, "%08x", file_crc32(p));
        f["crc32"] = hex;
        files.push_back(f);
    }
    manifest["truth"] = truth_map;
    manifest["files"] = files;
    write_json_file(manifest, paths.synth_manifest());
}

void stage_downsample(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.mesh_fine());
    require_file(paths.mesh_coarse());
    const auto fine_patch = load_patch(paths.mesh_fine());
    const auto coarse_patch = load_patch(paths.mesh_coarse());
    for (int k : all_subjects(cfg)) {
        require_file(paths.signals(k, "gt"));
        const auto gt = mesh::load_signals(paths.signals(k, "gt"));
        const auto down =
            mesh::resample_between_meshes(fine_patch.submesh, gt, coarse_patch.submesh);
        auto degraded =
            mesh::resample_between_meshes(coarse_patch.submesh, down, fine_patch.submesh);
        std::mt19937_64 rng(sub_seed(cfg.seed, kSeedDownsample, uint64_t(k)));
        std::normal_distribution<double> noise(0.0, 1.0);
        if (cfg.synth.noise_sd > 0.0)
            for (auto& v : degraded.values) v += cfg.synth.noise_sd * noise(rng);
        mesh::save_signals(degraded, paths.signals(k, "degraded"));
    }
}

void stage_param(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.mesh_fine());
    const auto patch = load_patch(paths.mesh_fine());
    auto param = conformal::harmonic_disk_map(patch, cfg.conformal);
    param = conformal::refine_conformal(patch, param, cfg.conformal);
    if (param.mu_max > cfg.conformal.eps_mu || param.flipped_faces != 0)
        throw std::runtime_error("parameterization failed its quality gate: mu_max " +
                                 std::to_string(param.mu_max));
    conformal::save_parameterization(param, paths.param_uv());
}

void stage_rasterize(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.mesh_fine());
    require_file(paths.param_uv());
    const auto patch = load_patch(paths.mesh_fine());
    const auto param = conformal::load_parameterization(paths.param_uv());
    for (int k : all_subjects(cfg))
        for (const char* cond : {"gt", "degraded"}) {
            require_file(paths.signals(k, cond));
            const auto s = mesh::load_signals(paths.signals(k, cond));
            const auto series = disk::rasterize_series(patch, param, s, cfg.resolution);
            disk::save_disk_series(series, paths.disks(k, cond));
        }
}

void stage_train(const ExperimentConfig& cfg, const RunPaths& paths) {
    std::vector<disk::DiskSeries> source, target, valid_src, valid_tgt;
    for (int k : subject_list(cfg, true)) {
        require_file(paths.disks(k, "degraded"));
        require_file(paths.disks(k, "gt"));
        const auto degraded = disk::load_disk_series(paths.disks(k, "degraded"));
        const auto gt = disk::load_disk_series(paths.disks(k, "gt"));
        const auto valid = validation_slices(cfg, k);
        source.push_back(drop_slices(degraded, valid));
        target.push_back(drop_slices(gt, valid));
        valid_src.push_back(select_slices(degraded, valid));
        valid_tgt.push_back(select_slices(gt, valid));
    }

    const auto bcfg = bridge_config(cfg);
    const auto opts = train_options(cfg, paths);
    std::mt19937_64 rng(sub_seed(cfg.seed, kSeedTrain, 0));
    const auto result = bridge::train(bcfg, source, target, opts, rng);
    bridge::save_generator(paths.generator(), result.gen);
    bridge::save_critic(paths.critic(), result.critic);
    bridge::write_history_csv(paths.history(), result.history);

    json summary;
    summary["epochs"] = int(result.history.size());
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        json fin;
        fin["l_adv"] = last.l_adv;
        fin["l_sb"] = last.l_sb;
        fin["l_nce"] = last.l_nce;
        fin["l_msssim"] = last.l_msssim;
        fin["total"] = last.total;
        summary["final"] = fin;
    }
    int n_valid = 0;
    for (const auto& s : valid_src) n_valid += int(s.disks.size());
    summary["validation_slices"] = n_valid;
    if (n_valid > 0) {
        double ssim_deg = 0.0, ssim_enh = 0.0;
        int counted = 0;
        for (size_t si = 0; si < valid_src.size(); ++si) {
            if (valid_src[si].disks.empty()) continue;
            std::mt19937_64 erng(sub_seed(cfg.seed, kSeedValid, si));
            const auto enhanced = bridge::enhance(valid_src[si], result.gen, bcfg, erng);
            for (size_t t = 0; t < valid_src[si].disks.size(); ++t) {
                const auto& mask = valid_tgt[si].disks[t].mask;
                ssim_deg += metrics::ssim(valid_src[si].disks[t].image,
                                          valid_tgt[si].disks[t].image, mask);
                ssim_enh += metrics::ssim(enhanced.series.disks[t].image,
                                          valid_tgt[si].disks[t].image, mask);
                ++counted;
            }
        }
        summary["validation_ssim_degraded"] = ssim_deg / counted;
        summary["validation_ssim_enhanced"] = ssim_enh / counted;
    }
    write_json_file(summary, paths.train_summary());
}

void stage_enhance(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.generator());
    const auto gen = bridge::load_generator(paths.generator());
    const auto bcfg = bridge_config(cfg);
    json summary;
    for (int k : subject_list(cfg, false)) {
        require_file(paths.disks(k, "degraded"));
        const auto degraded = disk::load_disk_series(paths.disks(k, "degraded"));
        std::mt19937_64 rng(sub_seed(cfg.seed, kSeedEnhance, uint64_t(k)));
        const auto enhanced = bridge::enhance(degraded, gen, bcfg, rng);
        disk::save_disk_series(enhanced.series, paths.disks(k, "enhanced"));
        double mean_var = 0.0;
        for (double v : enhanced.trajectory_variance) mean_var += v;
        if (!enhanced.trajectory_variance.empty())
            mean_var /= double(enhanced.trajectory_variance.size());
        summary["subject_" + std::to_string(k)] = {{"trajectory_variance", mean_var}};
    }
    write_json_file(summary, paths.enhance_summary());
}

void stage_resample(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.param_uv());
    const auto param = conformal::load_parameterization(paths.param_uv());
    for (int k : subject_list(cfg, false)) {
        require_file(paths.disks(k, "enhanced"));
        const auto series = disk::load_disk_series(paths.disks(k, "enhanced"));
        mesh::SignalSeries s;
        s.n_vertices = int(param.uv.size());
        s.n_samples = int(series.disks.size());
        s.tr_seconds = cfg.synth.tr_seconds;
        s.values.resize(size_t(s.n_vertices) * s.n_samples);
        for (int t = 0; t < s.n_samples; ++t) {
            const auto res = disk::resample_to_vertices(series.disks[size_t(t)], param);
            for (int v = 0; v < s.n_vertices; ++v) s.at(v, t) = res.values[size_t(v)];
        }
        mesh::save_signals(s, paths.signals(k, "enhanced"));
    }
}

void stage_prf(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.stimulus());
    const auto stim = prf::read_stimulus(paths.stimulus());
    for (int k : subject_list(cfg, false))
        for (const char* cond : kConditions) {
            require_file(paths.signals(k, cond));
            const auto s = mesh::load_signals(paths.signals(k, cond));
            const auto fits = fit_vertices(vertex_series(s), stim, cfg.hrf, cfg.prf_fit);
            prf::write_prf_csv(fits, paths.prf_csv(k, cond));
        }
}

void stage_eval(const ExperimentConfig& cfg, const RunPaths& paths) {
    json subjects;
    double ssim_deg = 0.0, ssim_enh = 0.0, psnr_deg = 0.0, psnr_enh = 0.0;
    double fre_deg = 0.0, fre_enh = 0.0, ms_deg = 0.0, ms_enh = 0.0;
    double r2_gt = 0.0, r2_deg = 0.0, r2_enh = 0.0;
    int n = 0, slices = 0;
    for (int k : subject_list(cfg, false)) {
        for (const char* cond : kConditions) require_file(paths.disks(k, cond));
        const auto gt = disk::load_disk_series(paths.disks(k, "gt"));
        const auto degraded = disk::load_disk_series(paths.disks(k, "degraded"));
        const auto enhanced = disk::load_disk_series(paths.disks(k, "enhanced"));
        const auto rep_deg = metrics::evaluate_series(degraded, gt, cfg.feature_seed);
        const auto rep_enh = metrics::evaluate_series(enhanced, gt, cfg.feature_seed);

        json blk;
        blk["degraded"] = metric_block(rep_deg);
        blk["enhanced"] = metric_block(rep_enh);
        json r2;
        for (const char* cond : kConditions) {
            require_file(paths.prf_csv(k, cond));
            r2[cond] = read_prf_csv(paths.prf_csv(k, cond)).mean_r2;
        }
        blk["mean_r2"] = r2;
        subjects["subject_" + std::to_string(k)] = blk;

        ssim_deg += rep_deg.ssim;
        ssim_enh += rep_enh.ssim;
        ms_deg += rep_deg.ms_ssim;
        ms_enh += rep_enh.ms_ssim;
        psnr_deg += rep_deg.psnr_db;
        psnr_enh += rep_enh.psnr_db;
        fre_deg += rep_deg.frechet_distance;
        fre_enh += rep_enh.frechet_distance;
        r2_gt += r2["gt"].get<double>();
        r2_deg += r2["degraded"].get<double>();
        r2_enh += r2["enhanced"].get<double>();
        slices += rep_deg.n_slices;
        ++n;
    }
    if (n == 0) throw MissingUpstream("no test subjects evaluated");
    json agg;
    agg["degraded"] = {{"ssim", ssim_deg / n},
                       {"ms_ssim", ms_deg / n},
                       {"psnr_db", psnr_deg / n},
                       {"frechet_distance", fre_deg / n}};
    agg["enhanced"] = {{"ssim", ssim_enh / n},
                       {"ms_ssim", ms_enh / n},
                       {"psnr_db", psnr_enh / n},
                       {"frechet_distance", fre_enh / n}};
    agg["r2_mean"] = {{"gt", r2_gt / n}, {"degraded", r2_deg / n}, {"enhanced", r2_enh / n}};
    json improvement;
    improvement["ssim"] = ssim_enh > ssim_deg;
    improvement["psnr"] = psnr_enh > psnr_deg;
    improvement["frechet"] = fre_enh < fre_deg;
    improvement["mean_r2"] = r2_enh > r2_deg;
    improvement["ssim_margin"] = (ssim_enh - ssim_deg) / n;

    json out;
    out["subjects"] = subjects;
    out["aggregate"] = agg;
    out["improvement"] = improvement;
    out["n_slices"] = slices;
    write_json_file(out, paths.eval_json());
}

void stage_report(const ExperimentConfig& cfg, const RunPaths& paths) {
    require_file(paths.eval_json());
    const json eval = read_json_file(paths.eval_json());

    json report;
    json dataset;
    dataset["seed"] = cfg.seed;
    dataset["resolution"] = cfg.resolution;
    dataset["subjects"] = cfg.synth.subjects;
    dataset["train_ids"] = cfg.train_ids;
    dataset["test_ids"] = cfg.test_ids;
    dataset["t_frames"] = cfg.synth.t_frames;
    dataset["noise_sd"] = cfg.synth.noise_sd;
    report["dataset"] = dataset;
    report["metrics"] = eval["aggregate"];
    report["improvement"] = eval["improvement"];
    report["n_slices"] = eval["n_slices"];
    validate_report(report);
    write_json_file(report, paths.report_json());

    {
        auto os = io::open_output(paths.report_csv(), false);
        os.precision(17);
        os << "subject,condition,ssim,ms_ssim,psnr_db,frechet_distance,mean_r2\n";
        for (int k : subject_list(cfg, false)) {
            const auto& blk = eval["subjects"]["subject_" + std::to_string(k)];
            for (const char* cond : {"degraded", "enhanced"}) {
                const auto& m = blk[cond];
                os << k << ',' << cond << ',' << m["ssim"].get<double>() << ','
                   << m["ms_ssim"].get<double>() << ',' << m["psnr_db"].get<double>() << ','
                   << m["frechet_distance"].get<double>() << ','
                   << blk["mean_r2"][cond].get<double>() << '\n';
            }
        }
        if (!os) throw io::IoError("failed writing " + paths.report_csv());
    }

    {
        auto os = io::open_output(paths.scatter_csv(), false);
        os.precision(17);
        os << "subject,vertex,r2_gt,r2_degraded,r2_enhanced\n";
        for (int k : subject_list(cfg, false)) {
            PrfTable tables[3];
            for (int c = 0; c < 3; ++c) {
                require_file(paths.prf_csv(k, kConditions[c]));
                tables[c] = read_prf_csv(paths.prf_csv(k, kConditions[c]));
            }
            for (size_t v = 0; v < tables[0].rows.size(); ++v)
                os << k << ',' << v << ',' << tables[0].rows[v].r2_percent << ','
                   << tables[1].rows[v].r2_percent << ',' << tables[2].rows[v].r2_percent
                   << '\n';
        }
        if (!os) throw io::IoError("failed writing " + paths.scatter_csv());
    }

    for (int k : subject_list(cfg, false))
        for (const char* cond : kConditions) {
            require_file(paths.disks(k, cond));
            const auto series = disk::load_disk_series(paths.disks(k, cond));
            if (series.disks.empty()) continue;
            imageio::write_png(paths.figure(k, cond), series.disks[0].image,
                               series.disks[0].mask);
        }
}

void run_one(const std::string& stage, const ExperimentConfig& cfg, const RunPaths& paths) {
    json manifest;
    {
        AccessRecorder recorder;
        if (stage == "synth")
            stage_synth(cfg, paths);
        else if (stage == "downsample")
            stage_downsample(cfg, paths);
        else if (stage == "param")
            stage_param(cfg, paths);
        else if (stage == "rasterize")
            stage_rasterize(cfg, paths);
        else if (stage == "train")
            stage_train(cfg, paths);
        else if (stage == "enhance")
            stage_enhance(cfg, paths);
        else if (stage == "resample")
            stage_resample(cfg, paths);
        else if (stage == "prf")
            stage_prf(cfg, paths);
        else if (stage == "eval")
            stage_eval(cfg, paths);
        else if (stage == "report")
            stage_report(cfg, paths);
        else
            throw ConfigInvalid("unknown stage: " + stage);
        manifest = recorder.manifest(stage, paths.base);
    }
    write_json_file(manifest, paths.access_manifest(stage));
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    Reader r(j, "config");
    r.opt("run_root", cfg.run_root);
    r.opt("run_name", cfg.run_name);
    r.opt("seed", cfg.seed);
    r.opt("resolution", cfg.resolution);
    r.opt("validation_fraction", cfg.validation_fraction);
    r.opt("feature_seed", cfg.feature_seed);
    r.opt("train_ids", cfg.train_ids);
    r.opt("test_ids", cfg.test_ids);
    if (const json* s = r.child("synth")) {
        Reader rs(*s, "synth");
        rs.opt("subjects", cfg.synth.subjects);
        rs.opt("train_subjects", cfg.synth.train_subjects);
        rs.opt("fine_rings", cfg.synth.fine_rings);
        rs.opt("fine_segments", cfg.synth.fine_segments);
        rs.opt("coarse_rings", cfg.synth.coarse_rings);
        rs.opt("coarse_segments", cfg.synth.coarse_segments);
        rs.opt("t_frames", cfg.synth.t_frames);
        rs.opt("stim_grid", cfg.synth.stim_grid);
        rs.opt("extent_deg", cfg.synth.extent_deg);
        rs.opt("tr_seconds", cfg.synth.tr_seconds);
        rs.opt("noise_sd_fine", cfg.synth.noise_sd_fine);
        rs.opt("noise_sd", cfg.synth.noise_sd);
        rs.opt("beta_base", cfg.synth.beta_base);
        rs.opt("beta_span", cfg.synth.beta_span);
        rs.opt("sigma_min", cfg.synth.sigma_min);
        rs.opt("sigma_slope", cfg.synth.sigma_slope);
        rs.opt("param_jitter", cfg.synth.param_jitter);
        rs.finish();
    }
    if (const json* b = r.child("bridge")) {
        Reader rb(*b, "bridge");
        rb.opt("tau", cfg.bridge.tau);
        rb.opt("steps", cfg.bridge_steps);
        rb.opt("lambda_sb", cfg.bridge.lambda_sb);
        rb.opt("lambda_reg_patchnce", cfg.bridge.lambda_reg_patchnce);
        rb.opt("lambda_reg_msssim", cfg.bridge.lambda_reg_msssim);
        rb.opt("entropy_estimator", cfg.bridge.entropy_estimator);
        rb.finish();
    }
    if (const json* t = r.child("train")) {
        Reader rt(*t, "train");
        rt.opt("epochs", cfg.train.epochs);
        rt.opt("batch_size", cfg.train.batch_size);
        rt.opt("lr", cfg.train.lr);
        rt.opt("adam_beta1", cfg.train.adam_beta1);
        rt.opt("adam_beta2", cfg.train.adam_beta2);
        rt.opt("adam_eps", cfg.train.adam_eps);
        rt.opt("checkpoint_every", cfg.train.checkpoint_every);
        rt.opt("entropy_batch", cfg.train.entropy_batch);
        if (const json* g = rt.child("gen")) {
            Reader rg(*g, "train.gen");
            rg.opt("arch", cfg.train.gen.arch);
            rg.opt("base_channels", cfg.train.gen.base_channels);
            rg.opt("depth", cfg.train.gen.depth);
            rg.opt("max_channels", cfg.train.gen.max_channels);
            rg.opt("noise_channels", cfg.train.gen.noise_channels);
            rg.opt("time_embed_dim", cfg.train.gen.time_embed_dim);
            rg.opt("mlp_hidden", cfg.train.gen.mlp_hidden);
            rg.opt("mlp_noise_dim", cfg.train.gen.mlp_noise_dim);
            rg.opt("final_init_scale", cfg.train.gen.final_init_scale);
            rg.opt("seed", cfg.train.gen.seed);
            rg.finish();
        }
        if (const json* c = rt.child("critic")) {
            Reader rc(*c, "train.critic");
            rc.opt("arch", cfg.train.critic.arch);
            rc.opt("base_channels", cfg.train.critic.base_channels);
            rc.opt("blocks", cfg.train.critic.blocks);
            rc.opt("max_channels", cfg.train.critic.max_channels);
            rc.opt("mlp_hidden", cfg.train.critic.mlp_hidden);
            rc.opt("final_init_scale", cfg.train.critic.final_init_scale);
            rc.opt("seed", cfg.train.critic.seed);
            rc.finish();
        }
        if (const json* p = rt.child("patches")) {
            Reader rp(*p, "train.patches");
            rp.opt("patch_count", cfg.train.patches.patch_count);
            rp.opt("patch_size", cfg.train.patches.patch_size);
            rp.opt("embed_dim", cfg.train.patches.embed_dim);
            rp.opt("temperature", cfg.train.patches.temperature);
            rp.opt("seed", cfg.train.patches.seed);
            rp.finish();
        }
        rt.finish();
    }
    if (const json* c = r.child("conformal")) {
        Reader rc(*c, "conformal");
        rc.opt("eps_mu", cfg.conformal.eps_mu);
        rc.opt("max_refine_iters", cfg.conformal.max_refine_iters);
        rc.opt("solver_tol", cfg.conformal.solver_tol);
        rc.finish();
    }
    if (const json* p = r.child("prf")) {
        Reader rp(*p, "prf");
        rp.opt("center_grid", cfg.prf_fit.center_grid);
        rp.opt("max_evals", cfg.prf_fit.max_evals);
        rp.opt("sse_tol", cfg.prf_fit.sse_tol);
        rp.opt("threads", cfg.prf_fit.threads);
        rp.finish();
    }
    if (const json* h = r.child("hrf")) {
        Reader rh(*h, "hrf");
        rh.opt("peak_delay_s", cfg.hrf.peak_delay_s);
        rh.opt("undershoot_delay_s", cfg.hrf.undershoot_delay_s);
        rh.opt("peak_dispersion_s", cfg.hrf.peak_dispersion_s);
        rh.opt("undershoot_dispersion_s", cfg.hrf.undershoot_dispersion_s);
        rh.opt("undershoot_ratio", cfg.hrf.undershoot_ratio);
        rh.opt("kernel_length_s", cfg.hrf.kernel_length_s);
        rh.finish();
    }
    r.finish();
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["run_root"] = cfg.run_root;
    j["run_name"] = cfg.run_name;
    j["seed"] = cfg.seed;
    j["resolution"] = cfg.resolution;
    j["validation_fraction"] = cfg.validation_fraction;
    j["feature_seed"] = cfg.feature_seed;
    j["train_ids"] = cfg.train_ids;
    j["test_ids"] = cfg.test_ids;
    j["synth"] = {{"subjects", cfg.synth.subjects},
                  {"train_subjects", cfg.synth.train_subjects},
                  {"fine_rings", cfg.synth.fine_rings},
                  {"fine_segments", cfg.synth.fine_segments},
                  {"coarse_rings", cfg.synth.coarse_rings},
                  {"coarse_segments", cfg.synth.coarse_segments},
                  {"t_frames", cfg.synth.t_frames},
                  {"stim_grid", cfg.synth.stim_grid},
                  {"extent_deg", cfg.synth.extent_deg},
                  {"tr_seconds", cfg.synth.tr_seconds},
                  {"noise_sd_fine", cfg.synth.noise_sd_fine},
                  {"noise_sd", cfg.synth.noise_sd},
                  {"beta_base", cfg.synth.beta_base},
                  {"beta_span", cfg.synth.beta_span},
                  {"sigma_min", cfg.synth.sigma_min},
                  {"sigma_slope", cfg.synth.sigma_slope},
                  {"param_jitter", cfg.synth.param_jitter}};
    j["bridge"] = {{"tau", cfg.bridge.tau},
                   {"steps", cfg.bridge_steps},
                   {"lambda_sb", cfg.bridge.lambda_sb},
                   {"lambda_reg_patchnce", cfg.bridge.lambda_reg_patchnce},
                   {"lambda_reg_msssim", cfg.bridge.lambda_reg_msssim},
                   {"entropy_estimator", cfg.bridge.entropy_estimator}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"adam_beta1", cfg.train.adam_beta1},
                  {"adam_beta2", cfg.train.adam_beta2},
                  {"adam_eps", cfg.train.adam_eps},
                  {"checkpoint_every", cfg.train.checkpoint_every},
                  {"entropy_batch", cfg.train.entropy_batch},
                  {"gen",
                   {{"arch", cfg.train.gen.arch},
                    {"base_channels", cfg.train.gen.base_channels},
                    {"depth", cfg.train.gen.depth},
                    {"max_channels", cfg.train.gen.max_channels},
                    {"noise_channels", cfg.train.gen.noise_channels},
                    {"time_embed_dim", cfg.train.gen.time_embed_dim},
                    {"mlp_hidden", cfg.train.gen.mlp_hidden},
                    {"mlp_noise_dim", cfg.train.gen.mlp_noise_dim},
                    {"final_init_scale", cfg.train.gen.final_init_scale},
                    {"seed", cfg.train.gen.seed}}},
                  {"critic",
                   {{"arch", cfg.train.critic.arch},
                    {"base_channels", cfg.train.critic.base_channels},
                    {"blocks", cfg.train.critic.blocks},
                    {"max_channels", cfg.train.critic.max_channels},
                    {"mlp_hidden", cfg.train.critic.mlp_hidden},
                    {"final_init_scale", cfg.train.critic.final_init_scale},
                    {"seed", cfg.train.critic.seed}}},
                  {"patches",
                   {{"patch_count", cfg.train.patches.patch_count},
                    {"patch_size", cfg.train.patches.patch_size},
                    {"embed_dim", cfg.train.patches.embed_dim},
                    {"temperature", cfg.train.patches.temperature},
                    {"seed", cfg.train.patches.seed}}}};
    j["conformal"] = {{"eps_mu", cfg.conformal.eps_mu},
                      {"max_refine_iters", cfg.conformal.max_refine_iters},
                      {"solver_tol", cfg.conformal.solver_tol}};
    j["prf"] = {{"center_grid", cfg.prf_fit.center_grid},
                {"max_evals", cfg.prf_fit.max_evals},
                {"sse_tol", cfg.prf_fit.sse_tol},
                {"threads", cfg.prf_fit.threads}};
    j["hrf"] = {{"peak_delay_s", cfg.hrf.peak_delay_s},
                {"undershoot_delay_s", cfg.hrf.undershoot_delay_s},
                {"peak_dispersion_s", cfg.hrf.peak_dispersion_s},
                {"undershoot_dispersion_s", cfg.hrf.undershoot_dispersion_s},
                {"undershoot_ratio", cfg.hrf.undershoot_ratio},
                {"kernel_length_s", cfg.hrf.kernel_length_s}};
    return j;
}

void apply_override(json& j, const std::string& dotted, const std::string& value) {
    std::vector<std::string> parts;
    std::string seg;
    std::stringstream ss(dotted);
    while (std::getline(ss, seg, '.')) parts.push_back(seg);
    if (parts.empty() || dotted.back() == '.')
        throw ConfigInvalid("malformed override key: " + dotted);
    for (const auto& p : parts)
        if (p.empty()) throw ConfigInvalid("malformed override key: " + dotted);
    json* node = &j;
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;
    }
    (*node)[parts.back()] = parsed;
}

void validate(ExperimentConfig& cfg) {
    const auto& s = cfg.synth;
    if (s.subjects < 2) throw ConfigInvalid("synth.subjects: need at least 2");
    if (s.train_subjects < 1 || s.train_subjects >= s.subjects)
        throw ConfigInvalid("synth.train_subjects: need 1 <= train < subjects");
    if (cfg.train_ids.empty() && cfg.test_ids.empty()) {
        for (int k = 0; k < s.subjects; ++k)
            (k < s.train_subjects ? cfg.train_ids : cfg.test_ids).push_back(k);
    }
    if (cfg.train_ids.empty() || cfg.test_ids.empty())
        throw ConfigInvalid("train_ids/test_ids: both splits must be non-empty");
    std::set<int> seen;
    for (int k : cfg.train_ids)
        if (!seen.insert(k).second) throw ConfigInvalid("train_ids: duplicate subject");
    for (int k : cfg.test_ids)
        if (!seen.insert(k).second)
            throw ConfigInvalid("test subject also appears in the train split");
    for (int k : seen)
        if (k < 0 || k >= s.subjects) throw ConfigInvalid("subject id out of range");

    if (cfg.resolution < 8) throw ConfigInvalid("resolution: minimum is 8");
    if (cfg.validation_fraction < 0.0 || cfg.validation_fraction > 0.9)
        throw ConfigInvalid("validation_fraction: must lie in [0, 0.9]");
    if (s.fine_rings < s.coarse_rings || s.fine_segments < s.coarse_segments)
        throw ConfigInvalid("synth: fine mesh must be at least as fine as coarse");
    if (s.coarse_rings < 2 || s.coarse_segments < 3)
        throw ConfigInvalid("synth: coarse mesh too small");
    if (s.t_frames < 8) throw ConfigInvalid("synth.t_frames: minimum is 8");
    if (s.stim_grid < 4) throw ConfigInvalid("synth.stim_grid: minimum is 4");
    if (!(s.extent_deg > 0.0)) throw ConfigInvalid("synth.extent_deg: must be positive");
    if (!(s.tr_seconds > 0.0)) throw ConfigInvalid("synth.tr_seconds: must be positive");
    if (s.noise_sd < 0.0 || s.noise_sd_fine < 0.0)
        throw ConfigInvalid("synth noise: standard deviations must be nonnegative");

    if (cfg.bridge_steps < 1) throw ConfigInvalid("bridge.steps: minimum is 1");
    if (cfg.bridge.tau < 0.0) throw ConfigInvalid("bridge.tau: must be nonnegative");
    if (cfg.bridge.entropy_estimator != "off" &&
        cfg.bridge.entropy_estimator != "gaussian-proxy")
        throw ConfigInvalid("bridge.entropy_estimator: off or gaussian-proxy");
    if (cfg.train.epochs < 1 || cfg.train.batch_size < 1)
        throw ConfigInvalid("train: epochs and batch_size must be positive");
    if (!(cfg.train.lr > 0.0)) throw ConfigInvalid("train.lr: must be positive");
    if (cfg.train.gen.arch != "unet" && cfg.train.gen.arch != "mlp")
        throw ConfigInvalid("train.gen.arch: unet or mlp");
    if (cfg.train.critic.arch != "conv" && cfg.train.critic.arch != "mlp")
        throw ConfigInvalid("train.critic.arch: conv or mlp");
    if (cfg.train.patches.patch_size > cfg.resolution)
        throw ConfigInvalid("train.patches.patch_size: larger than the disk");
    if (cfg.prf_fit.center_grid < 2) throw ConfigInvalid("prf.center_grid: minimum is 2");
    if (cfg.prf_fit.max_evals < 0) throw ConfigInvalid("prf.max_evals: must be nonnegative");
}

void validate_report(const json& report) {
    auto need = [](const json& j, const char* key, const char* where) -> const json& {
        auto it = j.find(key);
        if (it == j.end())
            throw ConfigInvalid(std::string("report.") + where + ": missing " + key);
        return *it;
    };
    auto number = [&](const json& j, const char* key, const char* where) {
        if (!need(j, key, where).is_number())
            throw ConfigInvalid(std::string("report.") + where + "." + key + ": not a number");
    };
    const json& dataset = need(report, "dataset", "");
    for (const char* k : {"seed", "resolution", "subjects", "t_frames", "noise_sd"})
        number(dataset, k, "dataset");
    for (const char* k : {"train_ids", "test_ids"})
        if (!need(dataset, k, "dataset").is_array())
            throw ConfigInvalid(std::string("report.dataset.") + k + ": not an array");
    const json& metrics = need(report, "metrics", "");
    for (const char* cond : {"degraded", "enhanced"}) {
        const json& m = need(metrics, cond, "metrics");
        for (const char* k : {"ssim", "ms_ssim", "psnr_db", "frechet_distance"})
            number(m, k, cond);
    }
    const json& r2 = need(metrics, "r2_mean", "metrics");
    for (const char* k : {"gt", "degraded", "enhanced"}) number(r2, k, "r2_mean");
    const json& improvement = need(report, "improvement", "");
    for (const char* k : {"ssim", "psnr", "frechet", "mean_r2"})
        if (!need(improvement, k, "improvement").is_boolean())
            throw ConfigInvalid(std::string("report.improvement.") + k + ": not a boolean");
    number(improvement, "ssim_margin", "improvement");
    if (!need(report, "n_slices", "").is_number_integer() || report["n_slices"].get<int>() < 1)
        throw ConfigInvalid("report.n_slices: not a positive integer");
}

std::string run_dir(const ExperimentConfig& cfg) {
    const char* env = std::getenv("CORTEXBRIDGE_RUN_ROOT");
    const std::string root = env && *env ? env : cfg.run_root;
    return (fs::path(root) / cfg.run_name).string();
}

void run(const std::string& stage, const ExperimentConfig& cfg) {
    RunPaths paths(cfg);
    paths.prepare();
    RunLock lock(paths.lock());
    if (stage == "all")
        for (const auto& s : kStages) run_one(s, cfg, paths);
    else
        run_one(stage, cfg, paths);
}

int cli_main(int argc, const char* const* argv) {
    const std::string usage =
        "usage: cortexbridge <stage> [--config cfg.json] [--dotted.path value]...\n"
        "stages: synth downsample param rasterize train enhance resample prf eval report all\n";
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
        std::cout << usage;
        return args.empty() ? 1 : 0;
    }
    const std::string stage = args[0];
    try {
        if (stage != "all" &&
            std::find(kStages.begin(), kStages.end(), stage) == kStages.end())
            throw ConfigInvalid("unknown stage: " + stage);
        json j = json::object();
        size_t i = 1;
        while (i < args.size()) {
            if (args[i].rfind("--", 0) != 0)
                throw ConfigInvalid("unexpected argument: " + args[i]);
            const std::string key = args[i].substr(2);
            if (i + 1 >= args.size()) throw ConfigInvalid("missing value for --" + key);
            const std::string value = args[i + 1];
            i += 2;
            if (key == "config") {
                std::ifstream is(value);
                if (!is) throw ConfigInvalid("cannot open config file: " + value);
                json file;
                try {
                    file = json::parse(is);
                } catch (const json::exception& e) {
                    throw ConfigInvalid("bad config JSON: " + std::string(e.what()));
                }
                // File values underlay anything already overridden.
                file.update(j, true);
                j = std::move(file);
            } else {
                apply_override(j, key, value);
            }
        }
        ExperimentConfig cfg = config_from_json(j);
        validate(cfg);
        run(stage, cfg);
        return 0;
    } catch (const MissingUpstream& e) {
        std::cerr << "missing upstream: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace cortexbridge::pipeline
