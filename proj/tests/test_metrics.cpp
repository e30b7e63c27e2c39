#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "cortexbridge/metrics.hpp"
#include "json.hpp"

using namespace cortexbridge;

namespace {

GridMask circle_mask(int n) {
    GridMask mask(n, n);
    double c = (n - 1) / 2.0, r = n / 2.0 - 1.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if ((i - c) * (i - c) + (j - c) * (j - c) <= r * r) mask.m[size_t(i) * n + j] = 1;
    return mask;
}

GridImage uniform_texture(int n, uint32_t seed, double lo, double hi) {
    GridImage img(n, n);
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : img.v) v = dist(rng);
    return img;
}

GridImage add_noise(const GridImage& base, uint32_t seed, double sd) {
    GridImage out = base;
    std::mt19937 rng(seed);
    std::normal_distribution<double> gauss(0.0, sd);
    for (auto& v : out.v) v += gauss(rng);
    return out;
}

GridImage flat(int n, double value) {
    return GridImage(n, n, value);
}

std::vector<GridImage> noise_set(int count, int n, uint32_t seed, double shift) {
    std::vector<GridImage> set;
    std::mt19937 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.3);
    for (int s = 0; s < count; ++s) {
        GridImage img(n, n);
        for (auto& v : img.v) v = gauss(rng) + shift;
        set.push_back(std::move(img));
    }
    return set;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("identical images score a perfect structural similarity") {
    auto mask = circle_mask(48);
    auto a = uniform_texture(48, 11, -0.8, 0.8);
    CHECK(metrics::ssim(a, a, mask) == 1.0);
    CHECK(metrics::ms_ssim(a, a, mask).value == 1.0);
}

TEST_CASE("full-range inversion scores poorly on texture") {
    auto mask = circle_mask(64);
    auto a = uniform_texture(64, 29, 0.0, 1.0);
    GridImage b = a;
    for (auto& v : b.v) v = 1.0 - v;  // luminance preserved, structure inverted
    double s = metrics::ssim(a, b, mask);
    CHECK(s < 0.2);
    CHECK(s >= -1.0);
}

TEST_CASE("more noise means lower similarity in expectation") {
    auto mask = circle_mask(48);
    auto a = uniform_texture(48, 5, -0.5, 0.5);
    double mean_small = 0, mean_large = 0;
    const int draws = 20;
    for (int d = 0; d < draws; ++d) {
        mean_small += metrics::ssim(a, add_noise(a, 100 + uint32_t(d), 0.02), mask);
        mean_large += metrics::ssim(a, add_noise(a, 200 + uint32_t(d), 0.2), mask);
    }
    CHECK(mean_large / draws < mean_small / draws);
}

TEST_CASE("similarity is symmetric") {
    auto mask = circle_mask(40);
    auto a = uniform_texture(40, 3, -0.7, 0.7);
    auto b = uniform_texture(40, 4, -0.7, 0.7);
    CHECK(std::abs(metrics::ssim(a, b, mask) - metrics::ssim(b, a, mask)) <= 1e-10);
    CHECK(std::abs(metrics::ms_ssim(a, b, mask).value - metrics::ms_ssim(b, a, mask).value) <=
          1e-10);
}

TEST_CASE("multi-scale levels reduce to fit the image") {
    auto a32 = uniform_texture(32, 8, -0.5, 0.5);
    auto b32 = add_noise(a32, 9, 0.1);
    auto r32 = metrics::ms_ssim(a32, b32, circle_mask(32));
    CHECK(r32.levels_used == 3);

    auto r256 = metrics::make_msssim_plan(circle_mask(256), 5);
    CHECK(r256.levels == 5);
    double wsum = 0;
    for (double w : r256.weights) wsum += w;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("single level equals plain structural similarity") {
    auto mask = circle_mask(40);
    auto a = uniform_texture(40, 13, -0.6, 0.6);
    auto b = add_noise(a, 14, 0.15);
    double direct = metrics::ssim(a, b, mask);
    auto single = metrics::ms_ssim(a, b, mask, 1);
    CHECK(single.levels_used == 1);
    CHECK(std::abs(single.value - direct) <= 1e-12);
}

TEST_CASE("peak signal-to-noise follows the closed form") {
    auto mask = circle_mask(32);
    auto a = flat(32, 0.0);

    SUBCASE("one percent power gap is exactly 20 dB") {
        auto b = flat(32, 0.2);  // MSE = (L/10)^2 with L = 2
        auto r = metrics::psnr(a, b, mask);
        CHECK_FALSE(r.capped);
        CHECK(r.db == doctest::Approx(20.0).epsilon(1e-12));
    }
    SUBCASE("identical images report the capped sentinel") {
        auto r = metrics::psnr(a, a, mask);
        CHECK(r.capped);
        CHECK(r.db == 99.0);
    }
    SUBCASE("byte-range pair lands on the hand value") {
        auto r = metrics::psnr(flat(32, 100.0), flat(32, 110.0), mask, 255.0);  // MSE 100
        CHECK_FALSE(r.capped);
        CHECK(std::abs(r.db - 28.13) <= 0.01);
    }
}

TEST_CASE("metrics ignore everything outside the mask") {
    auto mask = circle_mask(32);
    auto a = uniform_texture(32, 17, -0.6, 0.6);
    auto b = add_noise(a, 18, 0.1);
    GridImage a2 = a, b2 = b;
    for (size_t px = 0; px < mask.m.size(); ++px)
        if (!mask.m[px]) {
            a2.v[px] = 123.0;
            b2.v[px] = -55.0;
        }
    CHECK(metrics::ssim(a, b, mask) == metrics::ssim(a2, b2, mask));
    CHECK(metrics::ms_ssim(a, b, mask).value == metrics::ms_ssim(a2, b2, mask).value);
    CHECK(metrics::psnr(a, b, mask).db == metrics::psnr(a2, b2, mask).db);

    std::vector<GridImage> sa = {a, b, add_noise(a, 1, 0.2), add_noise(a, 2, 0.2)};
    std::vector<GridImage> sb = {b, a, add_noise(a, 3, 0.2), add_noise(a, 4, 0.2)};
    std::vector<GridImage> sa2 = {a2, b2, sa[2], sa[3]};
    std::vector<GridImage> sb2 = {b2, a2, sb[2], sb[3]};
    auto f1 = metrics::frechet_feature_distance(sa, sb, mask, 99);
    auto f2 = metrics::frechet_feature_distance(sa2, sb2, mask, 99);
    CHECK(f1.distance == f2.distance);
}

TEST_CASE("perfect scores happen only when masked pixels agree") {
    auto mask = circle_mask(32);
    auto a = uniform_texture(32, 23, -0.5, 0.5);
    GridImage b = a;
    b.v[size_t(16) * 32 + 16] += 0.25;  // one masked pixel
    CHECK(metrics::ssim(a, b, mask) < 1.0);
    CHECK(metrics::ms_ssim(a, b, mask).value < 1.0);
    CHECK_FALSE(metrics::psnr(a, b, mask).capped);

    GridImage c = a;
    c.v[0] += 9.0;  // corner, outside the disk
    CHECK(metrics::ssim(a, c, mask) == 1.0);
    CHECK(metrics::psnr(a, c, mask).capped);
}

TEST_CASE("shape disagreement is rejected") {
    auto mask = circle_mask(16);
    GridImage a(16, 16), b(16, 8);
    CHECK_THROWS_AS(metrics::ssim(a, b, mask), metrics::ShapeMismatch);
    CHECK_THROWS_AS(metrics::psnr(b, b, mask), metrics::ShapeMismatch);
}

TEST_CASE("matrix square root matches the eigendecomposition oracle") {
    std::mt19937 rng(31);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        Eigen::MatrixXd m(64, 64);
        for (int i = 0; i < 64; ++i)
            for (int j = 0; j < 64; ++j) m(i, j) = gauss(rng);
        Eigen::MatrixXd a = m * m.transpose() + 0.5 * Eigen::MatrixXd::Identity(64, 64);

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
        Eigen::MatrixXd oracle = eig.eigenvectors() *
                                 eig.eigenvalues().cwiseSqrt().asDiagonal() *
                                 eig.eigenvectors().transpose();
        Eigen::MatrixXd got = metrics::sqrt_spd(a);
        CHECK((got - oracle).norm() <= 1e-8 * (1.0 + oracle.norm()));
    }
}

TEST_CASE("feature distance vanishes for identical sets") {
    auto mask = circle_mask(16);
    auto set = noise_set(140, 16, 77, 0.0);
    auto r = metrics::frechet_feature_distance(set, set, mask, 1234);
    CHECK(std::abs(r.distance) <= 1e-8);
    CHECK_FALSE(r.low_sample);
}

TEST_CASE("feature distance grows with the mean shift") {
    auto mask = circle_mask(16);
    auto base = noise_set(160, 16, 101, 0.0);
    auto d = [&](double shift, uint32_t seed) {
        return metrics::frechet_feature_distance(base, noise_set(160, 16, seed, shift), mask,
                                                 555)
            .distance;
    };
    double d01 = d(0.1, 201), d05 = d(0.5, 202), d10 = d(1.0, 203);
    CHECK(d01 > 0.0);
    CHECK(d01 < d05);
    CHECK(d05 < d10);
}

TEST_CASE("feature distance is symmetric") {
    auto mask = circle_mask(16);
    auto sa = noise_set(150, 16, 41, 0.0);
    auto sb = noise_set(150, 16, 42, 0.4);
    double ab = metrics::frechet_feature_distance(sa, sb, mask, 9).distance;
    double ba = metrics::frechet_feature_distance(sb, sa, mask, 9).distance;
    CHECK(std::abs(ab - ba) <= 1e-10 * (1.0 + std::abs(ab)));
}

TEST_CASE("rank-deficient covariances take the jitter path") {
    auto mask = circle_mask(16);
    auto base = uniform_texture(16, 59, -0.5, 0.5);
    std::vector<GridImage> set;
    for (int s = 0; s < 70; ++s) {
        GridImage img = base;
        for (auto& v : img.v) v *= 1.0 + 0.01 * s;  // rank-one family
        set.push_back(std::move(img));
    }
    auto r = metrics::frechet_feature_distance(set, set, mask, 7);
    CHECK(r.jittered);
    CHECK(r.low_sample);
    CHECK(std::abs(r.distance) <= 1e-6);
}

TEST_CASE("series evaluation aggregates slice metrics") {
    auto mask = circle_mask(24);
    disk::DiskSeries sa, sb;
    for (int t = 0; t < 4; ++t) {
        disk::BrainDisk da, db;
        da.image = uniform_texture(24, 300 + uint32_t(t), -0.6, 0.6);
        db.image = add_noise(da.image, 400 + uint32_t(t), 0.1);
        for (size_t px = 0; px < mask.m.size(); ++px)
            if (!mask.m[px]) da.image.v[px] = db.image.v[px] = 0.0;
        da.mask = db.mask = mask;
        da.time_index = db.time_index = t;
        sa.disks.push_back(da);
        sb.disks.push_back(db);
    }

    auto rep = metrics::evaluate_series(sa, sb, 2024);
    REQUIRE(rep.n_slices == 4);
    REQUIRE(rep.slices.size() == 4);
    CHECK(rep.msssim_levels == 2);  // 24 halves once to 12
    CHECK(rep.frechet_low_sample);

    double mean_ssim = 0;
    for (const auto& s : rep.slices) {
        CHECK(s.ssim == metrics::ssim(sa.disks[size_t(s.time_index)].image,
                                      sb.disks[size_t(s.time_index)].image, mask));
        mean_ssim += s.ssim;
    }
    CHECK(rep.ssim == doctest::Approx(mean_ssim / 4).epsilon(1e-14));

    auto j = nlohmann::json::parse(metrics::to_json(rep));
    CHECK(j["n_slices"] == 4);
    CHECK(j["slices"].size() == 4);
    CHECK(j["ssim"].get<double>() == doctest::Approx(rep.ssim).epsilon(1e-15));

    auto csv = metrics::to_csv(rep);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 4 slices + mean
}

}  // TEST_SUITE
