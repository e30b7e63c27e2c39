#include <cmath>
#include <stdexcept>

#include "cortexbridge/generator.hpp"

namespace cortexbridge::bridge {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

int channel_at(int base, int max_channels, int i) {
    long long c = (long long)base << i;
    return int(std::min<long long>(c, max_channels));
}

std::vector<double> time_features(double t, int e) {
    std::vector<double> f(size_t(e), 0.0);
    for (int k = 0; k < e / 2; ++k) {
        double freq = double(1 << k);
        f[size_t(2 * k)] = std::sin(2.0 * M_PI * freq * t);
        f[size_t(2 * k) + 1] = std::cos(2.0 * M_PI * freq * t);
    }
    return f;
}

void validate_generator(const GeneratorConfig& cfg) {
    require(cfg.arch == "unet" || cfg.arch == "mlp", "unknown generator arch");
    require(cfg.image_h >= 1 && cfg.image_w >= 1, "image size must be positive");
    require(cfg.time_embed_dim >= 2 && cfg.time_embed_dim % 2 == 0,
            "time embedding size must be even and at least 2");
    if (cfg.arch == "unet") {
        require(cfg.depth >= 1, "unet depth must be at least 1");
        require(cfg.base_channels >= 1 && cfg.max_channels >= cfg.base_channels,
                "invalid channel configuration");
        require(cfg.noise_channels >= 1, "noise channels must be positive");
        require(cfg.image_h % (1 << cfg.depth) == 0 && cfg.image_w % (1 << cfg.depth) == 0,
                "image sides must be divisible by 2^depth");
    } else {
        require(cfg.mlp_hidden >= 1 && cfg.mlp_noise_dim >= 1, "invalid mlp configuration");
    }
}

void validate_critic(const CriticConfig& cfg) {
    require(cfg.arch == "conv" || cfg.arch == "mlp", "unknown critic arch");
    require(cfg.image_h >= 1 && cfg.image_w >= 1, "image size must be positive");
    if (cfg.arch == "conv")
        require(cfg.blocks >= 1 && cfg.base_channels >= 1 &&
                    cfg.max_channels >= cfg.base_channels,
                "invalid critic configuration");
    else
        require(cfg.mlp_hidden >= 1, "invalid critic configuration");
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

size_t conv_fan_in(const std::vector<int>& shape) {
    return size_t(shape[1]) * shape[2] * shape[3];
}

}  // namespace

size_t ParamLayout::add(std::string name, std::vector<int> shape) {
    ParamEntry e;
    e.name = std::move(name);
    e.shape = std::move(shape);
    e.offset = total;
    total += size_t(ad::numel(e.shape));
    entries.push_back(std::move(e));
    return entries.back().offset;
}

ParamLayout generator_layout(const GeneratorConfig& cfg) {
    validate_generator(cfg);
    ParamLayout L;
    const int e = cfg.time_embed_dim;
    if (cfg.arch == "unet") {
        int in = 1;
        for (int i = 0; i < cfg.depth; ++i) {
            const int c = channel_at(cfg.base_channels, cfg.max_channels, i);
            const std::string p = "enc" + std::to_string(i);
            L.add(p + ".conv.w", {c, in, 3, 3});
            L.add(p + ".conv.b", {c});
            L.add(p + ".time.w", {c, e});
            L.add(p + ".time.b", {c});
            L.add(p + ".down.w", {c, c, 3, 3});
            L.add(p + ".down.b", {c});
            in = c;
        }
        const int cb = channel_at(cfg.base_channels, cfg.max_channels, cfg.depth - 1);
        L.add("bottleneck.conv.w", {cb, cb + cfg.noise_channels, 3, 3});
        L.add("bottleneck.conv.b", {cb});
        L.add("bottleneck.time.w", {cb, e});
        L.add("bottleneck.time.b", {cb});
        for (int i = cfg.depth - 1; i >= 0; --i) {
            const int ci = channel_at(cfg.base_channels, cfg.max_channels, i);
            const int out = channel_at(cfg.base_channels, cfg.max_channels, std::max(i - 1, 0));
            const std::string p = "dec" + std::to_string(i);
            L.add(p + ".conv.w", {out, 2 * ci, 3, 3});
            L.add(p + ".conv.b", {out});
            L.add(p + ".time.w", {out, e});
            L.add(p + ".time.b", {out});
        }
        L.add("final.w", {1, cfg.base_channels, 3, 3});
        L.add("final.b", {1});
    } else {
        const int d = cfg.image_h * cfg.image_w;
        const int din = d + e + cfg.mlp_noise_dim;
        L.add("l1.w", {din, cfg.mlp_hidden});
        L.add("l1.b", {cfg.mlp_hidden});
        L.add("l2.w", {cfg.mlp_hidden, cfg.mlp_hidden});
        L.add("l2.b", {cfg.mlp_hidden});
        L.add("out.w", {cfg.mlp_hidden, d});
        L.add("out.b", {d});
    }
    return L;
}

ParamLayout critic_layout(const CriticConfig& cfg) {
    validate_critic(cfg);
    ParamLayout L;
    if (cfg.arch == "conv") {
        int in = 1, hc = cfg.image_h, wc = cfg.image_w;
        for (int i = 0; i < cfg.blocks; ++i) {
            const int c = channel_at(cfg.base_channels, cfg.max_channels, i);
            const std::string p = "blk" + std::to_string(i);
            L.add(p + ".w", {c, in, 3, 3});
            L.add(p + ".b", {c});
            in = c;
            hc = (hc - 1) / 2 + 1;
            wc = (wc - 1) / 2 + 1;
        }
        L.add("fc.w", {in * hc * wc, 1});
        L.add("fc.b", {1});
    } else {
        const int d = cfg.image_h * cfg.image_w;
        L.add("l1.w", {d, cfg.mlp_hidden});
        L.add("l1.b", {cfg.mlp_hidden});
        L.add("l2.w", {cfg.mlp_hidden, cfg.mlp_hidden});
        L.add("l2.b", {cfg.mlp_hidden});
        L.add("fc.w", {cfg.mlp_hidden, 1});
        L.add("fc.b", {1});
    }
    return L;
}

namespace {

void init_entries(const ParamLayout& layout, std::vector<double>& flat, uint64_t seed,
                  double final_init_scale, const std::string& final_name) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& e : layout.entries) {
        if (ends_with(e.name, ".b")) continue;  // biases stay zero
        if (ends_with(e.name, ".time.w")) {
            // Constant fill keeps the time signal's initial effect seed-independent.
            const size_t n = size_t(ad::numel(e.shape));
            for (size_t q = 0; q < n; ++q) flat[e.offset + q] = 0.05;
            continue;
        }
        double scale;
        if (e.shape.size() == 4)
            scale = std::sqrt(2.0 / double(conv_fan_in(e.shape)));
        else
            scale = std::sqrt(2.0 / double(e.shape[0]));
        if (e.name == final_name)
            scale *= final_init_scale;
        const size_t n = size_t(ad::numel(e.shape));
        for (size_t q = 0; q < n; ++q) flat[e.offset + q] = scale * normal(rng);
    }
}

}  // namespace

GeneratorModel make_generator(const GeneratorConfig& cfg) {
    GeneratorModel g;
    g.cfg = cfg;
    g.layout = generator_layout(cfg);
    g.phi.assign(g.layout.total, 0.0);
    init_entries(g.layout, g.phi, cfg.seed, cfg.final_init_scale,
                 cfg.arch == "unet" ? "final.w" : "out.w");
    return g;
}

CriticModel make_critic(const CriticConfig& cfg) {
    CriticModel c;
    c.cfg = cfg;
    c.layout = critic_layout(cfg);
    c.theta.assign(c.layout.total, 0.0);
    init_entries(c.layout, c.theta, cfg.seed, cfg.final_init_scale, "fc.w");
    return c;
}

int noise_len(const GeneratorConfig& cfg) {
    if (cfg.arch == "unet")
        return cfg.noise_channels * (cfg.image_h >> cfg.depth) * (cfg.image_w >> cfg.depth);
    return cfg.mlp_noise_dim;
}

std::vector<int> noise_shape(const GeneratorConfig& cfg, int batch) {
    if (cfg.arch == "unet")
        return {batch, cfg.noise_channels, cfg.image_h >> cfg.depth, cfg.image_w >> cfg.depth};
    return {batch, cfg.mlp_noise_dim};
}

ParamBinding bind_params(ad::Tape& t, const ParamLayout& layout, const double* flat,
                         bool needs_grad) {
    ParamBinding b;
    b.id.reserve(layout.entries.size());
    for (const auto& e : layout.entries)
        b.id.push_back(t.input(e.shape, flat + e.offset, needs_grad));
    return b;
}

void collect_param_grads(const ad::Tape& t, const ParamLayout& layout, const ParamBinding& bind,
                         double* grad_out) {
    for (size_t k = 0; k < layout.entries.size(); ++k) {
        const auto& e = layout.entries[k];
        const auto& g = t.grad(bind.id[k]);
        for (size_t q = 0; q < g.size(); ++q) grad_out[e.offset + q] += g[q];
    }
}

int generator_graph(ad::Tape& t, const GeneratorConfig& cfg, const ParamBinding& p, int x,
                    double t_i, int noise) {
    validate_generator(cfg);
    size_t next = 0;
    auto take = [&] { return p.id[next++]; };

    const auto feats = time_features(t_i, cfg.time_embed_dim);
    const int fnode = t.constant({cfg.time_embed_dim, 1}, feats.data());
    auto time_bias = [&](int w, int b) {
        const int c = t.shape(w)[0];
        return t.add(t.reshape(t.matmul(w, fnode), {c}), b);
    };
    auto linear = [&](int in, int w, int b) {
        const int batch = t.shape(in)[0], dout = t.shape(w)[1];
        int y = t.reshape(t.matmul(in, w), {batch, dout, 1, 1});
        return t.reshape(t.add_bias(y, b), {batch, dout});
    };

    if (cfg.arch == "unet") {
        std::vector<int> skips;
        int h = x;
        for (int i = 0; i < cfg.depth; ++i) {
            int wc = take(), bc = take(), tw = take(), tb = take(), wd = take(), bd = take();
            int a = t.silu(t.add_bias(t.conv2d(h, wc, bc, 1, 1), time_bias(tw, tb)));
            skips.push_back(a);
            h = t.silu(t.conv2d(a, wd, bd, 2, 1));
        }
        {
            int wb = take(), bb = take(), tw = take(), tb = take();
            h = t.concat_channels(h, noise);
            h = t.silu(t.add_bias(t.conv2d(h, wb, bb, 1, 1), time_bias(tw, tb)));
        }
        for (int i = cfg.depth - 1; i >= 0; --i) {
            int wc = take(), bc = take(), tw = take(), tb = take();
            h = t.upsample2(h);
            h = t.concat_channels(h, skips[size_t(i)]);
            h = t.silu(t.add_bias(t.conv2d(h, wc, bc, 1, 1), time_bias(tw, tb)));
        }
        int wf = take(), bf = take();
        return t.add(x, t.conv2d(h, wf, bf, 1, 1));
    }

    const int batch = t.shape(x)[0];
    const int d = cfg.image_h * cfg.image_w;
    int xf = t.reshape(x, {batch, d});
    std::vector<double> frep(size_t(batch) * cfg.time_embed_dim);
    for (int s = 0; s < batch; ++s)
        std::copy(feats.begin(), feats.end(), frep.begin() + size_t(s) * cfg.time_embed_dim);
    int f4 = t.constant({batch, cfg.time_embed_dim, 1, 1}, frep.data());
    int a4 = t.reshape(xf, {batch, d, 1, 1});
    int n4 = t.reshape(noise, {batch, cfg.mlp_noise_dim, 1, 1});
    int cat = t.reshape(t.concat_channels(t.concat_channels(a4, f4), n4),
                        {batch, d + cfg.time_embed_dim + cfg.mlp_noise_dim});
    int l1w = take(), l1b = take(), l2w = take(), l2b = take(), ow = take(), ob = take();
    int h1 = t.silu(linear(cat, l1w, l1b));
    int h2 = t.silu(linear(h1, l2w, l2b));
    int out = linear(h2, ow, ob);
    return t.reshape(t.add(xf, out), {batch, 1, cfg.image_h, cfg.image_w});
}

int critic_graph(ad::Tape& t, const CriticConfig& cfg, const ParamBinding& p, int x) {
    validate_critic(cfg);
    size_t next = 0;
    auto take = [&] { return p.id[next++]; };
    auto linear = [&](int in, int w, int b) {
        const int batch = t.shape(in)[0], dout = t.shape(w)[1];
        int y = t.reshape(t.matmul(in, w), {batch, dout, 1, 1});
        return t.reshape(t.add_bias(y, b), {batch, dout});
    };

    const int batch = t.shape(x)[0];
    if (cfg.arch == "conv") {
        int h = x;
        for (int i = 0; i < cfg.blocks; ++i) {
            int w = take(), b = take();
            h = t.silu(t.conv2d(h, w, b, 2, 1));
        }
        const auto& s = t.shape(h);
        int flat = t.reshape(h, {batch, s[1] * s[2] * s[3]});
        int fw = take(), fb = take();
        return linear(flat, fw, fb);
    }
    int xf = t.reshape(x, {batch, cfg.image_h * cfg.image_w});
    int l1w = take(), l1b = take(), l2w = take(), l2b = take(), ow = take(), ob = take();
    int h1 = t.silu(linear(xf, l1w, l1b));
    int h2 = t.silu(linear(h1, l2w, l2b));
    return linear(h2, ow, ob);
}

GridImage predict(const GeneratorModel& gen, const GridImage& x, const GridMask& mask,
                  double t_i, std::mt19937_64& rng) {
    if (x.h != gen.cfg.image_h || x.w != gen.cfg.image_w || mask.h != x.h || mask.w != x.w)
        throw ShapeMismatch("input shape does not match the generator");
    const int nl = noise_len(gen.cfg);
    std::vector<double> noise(size_t(nl), 0.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& z : noise) z = normal(rng);

    ad::Tape t;
    ParamBinding p = bind_params(t, gen.layout, gen.phi.data(), false);
    int xin = t.constant({1, 1, x.h, x.w}, x.v.data());
    int nnode = t.constant(noise_shape(gen.cfg, 1), noise.data());
    int out = generator_graph(t, gen.cfg, p, xin, t_i, nnode);

    GridImage y(x.h, x.w);
    const auto& v = t.val(out);
    for (size_t q = 0; q < y.v.size(); ++q) y.v[q] = mask.m[q] ? v[q] : 0.0;
    return y;
}

GridImage ModelSampler::predict(const GridImage& x, double t_i, std::mt19937_64& rng) const {
    return bridge::predict(*gen, x, *mask, t_i, rng);
}

}  // namespace cortexbridge::bridge
