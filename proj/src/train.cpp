#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cortexbridge/generator.hpp"
#include "cortexbridge/io_util.hpp"
#include "json.hpp"

namespace cortexbridge::bridge {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

struct Adam {
    std::vector<double> m, v;
    int step = 0;

    explicit Adam(size_t n) : m(n, 0.0), v(n, 0.0) {}

    void update(std::vector<double>& p, const std::vector<double>& g, double lr, double b1,
                double b2, double eps) {
        ++step;
        const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

std::vector<double> draw_noise(int count, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> z(size_t(count), 0.0);
    for (auto& x : z) x = normal(rng);
    return z;
}

GridImage simulate_to(const GridImage& x0, int level, const GeneratorModel& gen,
                      const GridMask& mask, const BridgeConfig& cfg, std::mt19937_64& rng) {
    GridImage x = x0;
    for (int j = 0; j < level; ++j) {
        const double tj = cfg.grid.steps[size_t(j)];
        const double tnext = cfg.grid.steps[size_t(j) + 1];
        GridImage endpoint = predict(gen, x, mask, tj, rng);
        x = sample_bridge(x, endpoint, mask, tj, 1.0, tnext, cfg.tau, rng);
    }
    return x;
}

std::string epoch_tag(int epoch) {
    std::ostringstream os;
    os << "epoch_";
    os.width(3);
    os.fill('0');
    os << epoch;
    return os.str();
}

nlohmann::ordered_json generator_json(const GeneratorConfig& c) {
    nlohmann::ordered_json j;
    j["kind"] = "generator";
    j["arch"] = c.arch;
    j["image_h"] = c.image_h;
    j["image_w"] = c.image_w;
    j["base_channels"] = c.base_channels;
    j["depth"] = c.depth;
    j["max_channels"] = c.max_channels;
    j["noise_channels"] = c.noise_channels;
    j["time_embed_dim"] = c.time_embed_dim;
    j["mlp_hidden"] = c.mlp_hidden;
    j["mlp_noise_dim"] = c.mlp_noise_dim;
    j["final_init_scale"] = c.final_init_scale;
    j["seed"] = c.seed;
    return j;
}

nlohmann::ordered_json critic_json(const CriticConfig& c) {
    nlohmann::ordered_json j;
    j["kind"] = "critic";
    j["arch"] = c.arch;
    j["image_h"] = c.image_h;
    j["image_w"] = c.image_w;
    j["base_channels"] = c.base_channels;
    j["blocks"] = c.blocks;
    j["max_channels"] = c.max_channels;
    j["mlp_hidden"] = c.mlp_hidden;
    j["final_init_scale"] = c.final_init_scale;
    j["seed"] = c.seed;
    return j;
}

void save_checkpoint(const std::string& path, const nlohmann::ordered_json& cfg,
                     const std::vector<double>& params) {
    auto os = io::open_output(path);
    io::write_magic(os, "BGEN1");
    const std::string js = cfg.dump();
    io::write_pod(os, uint32_t(js.size()));
    os.write(js.data(), std::streamsize(js.size()));
    io::write_pod(os, uint32_t(params.size()));
    std::vector<float> f32(params.begin(), params.end());
    io::write_array(os, f32);
    os.flush();
}

nlohmann::json load_checkpoint(const std::string& path, const char* kind,
                               std::vector<double>& params) {
    auto is = io::open_input(path);
    io::check_magic(is, "BGEN1");
    const auto len = io::read_pod<uint32_t>(is);
    std::string js(len, '\0');
    is.read(js.data(), std::streamsize(len));
    if (!is) throw io::IoError("truncated checkpoint config block");
    nlohmann::json j = nlohmann::json::parse(js);
    if (j.value("kind", "") != kind) throw io::IoError("checkpoint holds a different model kind");
    const auto count = io::read_pod<uint32_t>(is);
    std::vector<float> f32;
    io::read_array(is, f32, count);
    params.assign(f32.begin(), f32.end());
    return j;
}

}  // namespace

void save_generator(const std::string& path, const GeneratorModel& gen) {
    save_checkpoint(path, generator_json(gen.cfg), gen.phi);
}

GeneratorModel load_generator(const std::string& path) {
    std::vector<double> params;
    nlohmann::json j = load_checkpoint(path, "generator", params);
    GeneratorConfig c;
    c.arch = j.at("arch").get<std::string>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.depth = j.at("depth").get<int>();
    c.max_channels = j.at("max_channels").get<int>();
    c.noise_channels = j.at("noise_channels").get<int>();
    c.time_embed_dim = j.at("time_embed_dim").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.mlp_noise_dim = j.at("mlp_noise_dim").get<int>();
    c.final_init_scale = j.at("final_init_scale").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    GeneratorModel g;
    g.cfg = c;
    g.layout = generator_layout(c);
    if (params.size() != g.layout.total) throw io::IoError("checkpoint parameter count mismatch");
    g.phi = std::move(params);
    return g;
}

void save_critic(const std::string& path, const CriticModel& critic) {
    save_checkpoint(path, critic_json(critic.cfg), critic.theta);
}

CriticModel load_critic(const std::string& path) {
    std::vector<double> params;
    nlohmann::json j = load_checkpoint(path, "critic", params);
    CriticConfig c;
    c.arch = j.at("arch").get<std::string>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.blocks = j.at("blocks").get<int>();
    c.max_channels = j.at("max_channels").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.final_init_scale = j.at("final_init_scale").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    CriticModel m;
    m.cfg = c;
    m.layout = critic_layout(c);
    if (params.size() != m.layout.total) throw io::IoError("checkpoint parameter count mismatch");
    m.theta = std::move(params);
    return m;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    auto os = io::open_output(path, false);
    os.precision(17);
    os << "epoch,L_Adv,L_SB,L_NCE,L_MSSSIM,total\n";
    for (const auto& e : history)
        os << e.epoch << "," << e.l_adv << "," << e.l_sb << "," << e.l_nce << "," << e.l_msssim
           << "," << e.total << "\n";
    os.flush();
}

TrainResult train(const BridgeConfig& cfg, const std::vector<disk::DiskSeries>& source,
                  const std::vector<disk::DiskSeries>& target, const TrainOptions& opt,
                  std::mt19937_64& rng) {
    cfg.grid.validate();
    require(cfg.tau > 0, "tau must be positive");
    require(opt.epochs >= 1 && opt.batch_size >= 1, "invalid training options");

    std::vector<const GridImage*> src, tgt;
    const GridMask* mask = nullptr;
    auto gather = [&](const std::vector<disk::DiskSeries>& set, std::vector<const GridImage*>& out) {
        for (const auto& series : set)
            for (const auto& d : series.disks) {
                if (!mask) mask = &d.mask;
                if (!(d.mask == *mask)) throw ShapeMismatch("training disks must share one mask");
                out.push_back(&d.image);
            }
    };
    gather(source, src);
    gather(target, tgt);
    require(!src.empty() && !tgt.empty(), "source and target sets must be nonempty");
    if (mask->h != opt.gen.image_h || mask->w != opt.gen.image_w ||
        mask->h != opt.critic.image_h || mask->w != opt.critic.image_w)
        throw ShapeMismatch("disk shape does not match the model configuration");

    TrainResult res;
    res.gen = make_generator(opt.gen);
    res.critic = make_critic(opt.critic);

    const PatchPlan patches = make_patch_plan(*mask, opt.patches);
    const MsssimGraph msgraph = cfg.lambda_reg_msssim > 0
                                    ? make_msssim_graph(metrics::make_msssim_plan(*mask, 5))
                                    : MsssimGraph{};

    Adam adam_g(res.gen.layout.total), adam_c(res.critic.layout.total);
    std::vector<double> grad_g, grad_c;

    const int n_levels = cfg.grid.n_steps();
    const int batch = std::min<int>(opt.batch_size, int(std::min(src.size(), tgt.size())));
    const int steps = std::max<int>(1, int(std::min(src.size(), tgt.size())) / batch);
    const int half = opt.epochs / 2;
    const int nl = noise_len(opt.gen);
    const bool entropy_on = cfg.entropy_estimator == "gaussian-proxy" && opt.entropy_batch >= 2;

    std::vector<double> phi_good = res.gen.phi, theta_good = res.critic.theta;
    int epoch_good = 0;

    std::vector<size_t> sperm(src.size()), tperm(tgt.size());
    for (size_t i = 0; i < sperm.size(); ++i) sperm[i] = i;
    for (size_t i = 0; i < tperm.size(); ++i) tperm[i] = i;

    auto abort_diverged = [&](int epoch) {
        res.gen.phi = phi_good;
        res.critic.theta = theta_good;
        if (!opt.checkpoint_dir.empty()) {
            save_generator(opt.checkpoint_dir + "/generator_last_good.bgen", res.gen);
            save_critic(opt.checkpoint_dir + "/critic_last_good.bgen", res.critic);
        }
        std::ostringstream msg;
        msg << "loss became non-finite at epoch " << epoch << "; parameters rolled back to epoch "
            << epoch_good;
        throw NumericalDivergence(msg.str());
    };

    for (int e = 0; e < opt.epochs; ++e) {
        const double lr =
            e < half ? opt.lr : opt.lr * double(opt.epochs - e) / double(opt.epochs - half);
        std::shuffle(sperm.begin(), sperm.end(), rng);
        std::shuffle(tperm.begin(), tperm.end(), rng);
        std::uniform_int_distribution<int> pick_level(0, n_levels - 1);

        EpochStats stats;
        stats.epoch = e + 1;
        for (int s = 0; s < steps; ++s) {
            const int level = pick_level(rng);
            const double t_i = cfg.grid.steps[size_t(level)];

            StepBatch sb;
            sb.t_i = t_i;
            sb.mask = *mask;
            std::vector<GridImage> real, fake;
            for (int q = 0; q < batch; ++q) {
                const GridImage& x0 = *src[sperm[size_t(s) * batch + q]];
                sb.x0.push_back(x0);
                sb.x_t.push_back(simulate_to(x0, level, res.gen, *mask, cfg, rng));
                real.push_back(*tgt[tperm[size_t(s) * batch + q]]);
            }

            for (int q = 0; q < batch; ++q)
                fake.push_back(predict(res.gen, sb.x_t[size_t(q)], *mask, t_i, rng));
            const double closs = critic_loss(res.critic, real, fake, *mask, &grad_c);
            if (!std::isfinite(closs)) abort_diverged(e + 1);
            adam_c.update(res.critic.theta, grad_c, lr, opt.adam_beta1, opt.adam_beta2,
                          opt.adam_eps);

            sb.noise = draw_noise(batch * nl, rng);
            if (entropy_on) sb.entropy_noise = draw_noise(opt.entropy_batch * nl, rng);
            const LossParts parts =
                generator_loss(res.gen, res.critic, sb, cfg, patches, msgraph, &grad_g);
            if (!std::isfinite(parts.total) || !std::isfinite(parts.adv) ||
                !std::isfinite(parts.sb) || !std::isfinite(parts.nce) ||
                !std::isfinite(parts.msssim))
                abort_diverged(e + 1);
            adam_g.update(res.gen.phi, grad_g, lr, opt.adam_beta1, opt.adam_beta2, opt.adam_eps);

            stats.l_adv += parts.adv;
            stats.l_sb += parts.sb;
            stats.l_nce += parts.nce;
            stats.l_msssim += parts.msssim;
            stats.total += parts.total;
        }
        stats.l_adv /= steps;
        stats.l_sb /= steps;
        stats.l_nce /= steps;
        stats.l_msssim /= steps;
        stats.total /= steps;
        res.history.push_back(stats);

        phi_good = res.gen.phi;
        theta_good = res.critic.theta;
        epoch_good = e + 1;
        if (!opt.checkpoint_dir.empty() && opt.checkpoint_every >= 1 &&
            (e + 1) % opt.checkpoint_every == 0) {
            save_generator(opt.checkpoint_dir + "/generator_" + epoch_tag(e + 1) + ".bgen",
                           res.gen);
            save_critic(opt.checkpoint_dir + "/critic_" + epoch_tag(e + 1) + ".bgen", res.critic);
        }
    }
    return res;
}

EnhanceResult enhance(const disk::DiskSeries& input, const GeneratorModel& gen,
                      const BridgeConfig& cfg, std::mt19937_64& rng) {
    EnhanceResult out;
    out.series.norm_policy_id = input.norm_policy_id;
    for (const auto& d : input.disks) {
        if (d.image.h != gen.cfg.image_h || d.image.w != gen.cfg.image_w)
            throw ShapeMismatch("disk shape does not match the generator");
        ModelSampler sampler(gen, d.mask);
        const auto traj = simulate_trajectory(d.image, d.mask, sampler, cfg, rng);

        double var_acc = 0.0;
        int nmask = 0;
        for (size_t p = 0; p < d.image.v.size(); ++p) {
            if (!d.mask.m[p]) continue;
            ++nmask;
            double mu = 0;
            for (const auto& st : traj) mu += st.v[p];
            mu /= double(traj.size());
            double var = 0;
            for (const auto& st : traj) {
                const double dev = st.v[p] - mu;
                var += dev * dev;
            }
            var_acc += var / double(traj.size());
        }
        out.trajectory_variance.push_back(nmask > 0 ? var_acc / nmask : 0.0);

        disk::BrainDisk enhanced;
        enhanced.image = traj.back();
        enhanced.mask = d.mask;
        enhanced.norm = d.norm;
        enhanced.time_index = d.time_index;
        out.series.disks.push_back(std::move(enhanced));
    }
    return out;
}

}  // namespace cortexbridge::bridge
