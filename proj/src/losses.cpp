#include <cmath>
#include <stdexcept>

#include "cortexbridge/generator.hpp"

namespace cortexbridge::bridge {

namespace {

constexpr double kEntropyFloor = 1e-8;

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Batch of images as one [B,1,H,W] constant, optionally zeroed off the mask.
int batch_input(ad::Tape& t, const std::vector<GridImage>& imgs, const GridMask* mask,
                std::vector<double>& buf) {
    const int b = int(imgs.size()), h = imgs[0].h, w = imgs[0].w;
    const size_t npix = size_t(h) * w;
    buf.assign(size_t(b) * npix, 0.0);
    for (int s = 0; s < b; ++s) {
        require(imgs[size_t(s)].h == h && imgs[size_t(s)].w == w, "batch shapes disagree");
        for (size_t p = 0; p < npix; ++p)
            buf[size_t(s) * npix + p] = (mask && !mask->m[p]) ? 0.0 : imgs[size_t(s)].v[p];
    }
    return t.constant({b, 1, h, w}, buf.data());
}

std::shared_ptr<ad::SparseMat> sample_slicer(int npix, int batch, int which) {
    auto s = std::make_shared<ad::SparseMat>();
    s->rows = npix;
    s->cols = batch * npix;
    s->row_ptr.push_back(0);
    for (int p = 0; p < npix; ++p) {
        s->col.push_back(which * npix + p);
        s->w.push_back(1.0);
        s->row_ptr.push_back(int(s->col.size()));
    }
    return s;
}

}  // namespace

MsssimGraph make_msssim_graph(const metrics::MsssimPlan& plan, double data_range) {
    MsssimGraph g;
    g.levels = plan.levels;
    g.weights = plan.weights;
    double c1 = 0.01 * data_range, c2 = 0.03 * data_range;
    g.c1 = c1 * c1;
    g.c2 = c2 * c2;
    for (int l = 0; l < plan.levels; ++l) {
        const auto& lp = plan.level[size_t(l)];
        auto win = std::make_shared<ad::SparseMat>();
        win->rows = int(lp.windows.size());
        win->cols = lp.h * lp.w;
        win->row_ptr.push_back(0);
        for (const auto& sw : lp.windows) {
            win->col.insert(win->col.end(), sw.px.begin(), sw.px.end());
            win->w.insert(win->w.end(), sw.wgt.begin(), sw.wgt.end());
            win->row_ptr.push_back(int(win->col.size()));
        }
        g.n_windows.push_back(win->rows);
        g.win.push_back(std::move(win));
        if (l + 1 < plan.levels) {
            auto pool = std::make_shared<ad::SparseMat>();
            pool->rows = (lp.h / 2) * (lp.w / 2);
            pool->cols = lp.h * lp.w;
            std::vector<std::vector<std::pair<int, double>>> rows(size_t(pool->rows));
            for (const auto& cell : lp.pool)
                for (size_t k = 0; k < cell.px.size(); ++k)
                    rows[size_t(cell.center)].emplace_back(cell.px[k], cell.wgt[k]);
            pool->row_ptr.push_back(0);
            for (const auto& r : rows) {
                for (const auto& [c, wv] : r) {
                    pool->col.push_back(c);
                    pool->w.push_back(wv);
                }
                pool->row_ptr.push_back(int(pool->col.size()));
            }
            g.pool.push_back(std::move(pool));
        }
    }
    return g;
}

int msssim_loss_graph(ad::Tape& t, const MsssimGraph& g, int x0, int x1_hat) {
    if (g.levels == 0) return t.zeros({1}, false);
    int a = x0, b = x1_hat;
    int prod = -1;
    for (int l = 0; l < g.levels; ++l) {
        const auto& win = g.win[size_t(l)];
        int ma = t.sparse_apply(win, a);
        int mb = t.sparse_apply(win, b);
        int eaa = t.sparse_apply(win, t.mul(a, a));
        int ebb = t.sparse_apply(win, t.mul(b, b));
        int eab = t.sparse_apply(win, t.mul(a, b));
        int va = t.sub(eaa, t.mul(ma, ma));
        int vb = t.sub(ebb, t.mul(mb, mb));
        int cov = t.sub(eab, t.mul(ma, mb));
        int cs = t.div(t.add_scalar(t.mul_scalar(cov, 2.0), g.c2),
                       t.add_scalar(t.add(va, vb), g.c2));
        int m;
        if (l + 1 == g.levels) {
            int lum = t.div(t.add_scalar(t.mul_scalar(t.mul(ma, mb), 2.0), g.c1),
                            t.add_scalar(t.add(t.mul(ma, ma), t.mul(mb, mb)), g.c1));
            m = t.mean(t.mul(lum, cs));
        } else {
            m = t.mean(cs);
        }
        int term = t.signed_pow(m, g.weights[size_t(l)]);
        prod = (l == 0) ? term : t.mul(prod, term);
        if (l + 1 < g.levels) {
            a = t.sparse_apply(g.pool[size_t(l)], a);
            b = t.sparse_apply(g.pool[size_t(l)], b);
        }
    }
    return t.add_scalar(t.mul_scalar(prod, -1.0), 1.0);
}

double msssim_loss(const GridImage& x0, const GridImage& x1_hat, const GridMask& mask) {
    require_same_shape(x0, x1_hat);
    if (x0.h != mask.h || x0.w != mask.w) throw ShapeMismatch("mask shape mismatch");
    MsssimGraph g = make_msssim_graph(metrics::make_msssim_plan(mask, 5));
    ad::Tape t;
    int a = t.constant({x0.h * x0.w}, x0.v.data());
    int b = t.constant({x0.h * x0.w}, x1_hat.v.data());
    return t.scalar(msssim_loss_graph(t, g, a, b));
}

namespace {

struct AdvGraph {
    int critic_term = -1;
    int gen_term = -1;
};

AdvGraph adv_graph(ad::Tape& t, const CriticConfig& cfg, const ParamBinding& p, int real,
                   int fake) {
    AdvGraph g;
    int dr = critic_graph(t, cfg, p, real);
    int df = critic_graph(t, cfg, p, fake);
    int term_real = t.mean(t.softplus(t.mul_scalar(dr, -1.0)));
    int term_fake = t.mean(t.softplus(df));
    g.critic_term = t.add(t.mul_scalar(term_real, 0.5), t.mul_scalar(term_fake, 0.5));
    g.gen_term = t.mean(t.softplus(t.mul_scalar(df, -1.0)));
    return g;
}

}  // namespace

std::pair<double, double> adv_loss(const CriticModel& critic, const std::vector<GridImage>& real,
                                   const std::vector<GridImage>& fake, const GridMask& mask) {
    require(!real.empty() && !fake.empty(), "batches must be nonempty");
    ad::Tape t;
    ParamBinding p = bind_params(t, critic.layout, critic.theta.data(), false);
    std::vector<double> rbuf, fbuf;
    int rn = batch_input(t, real, &mask, rbuf);
    int fn = batch_input(t, fake, &mask, fbuf);
    AdvGraph g = adv_graph(t, critic.cfg, p, rn, fn);
    return {t.scalar(g.gen_term), t.scalar(g.critic_term)};
}

double critic_loss(const CriticModel& critic, const std::vector<GridImage>& real,
                   const std::vector<GridImage>& fake, const GridMask& mask,
                   std::vector<double>* grad_theta) {
    require(!real.empty() && !fake.empty(), "batches must be nonempty");
    ad::Tape t;
    ParamBinding p = bind_params(t, critic.layout, critic.theta.data(), grad_theta != nullptr);
    std::vector<double> rbuf, fbuf;
    int rn = batch_input(t, real, &mask, rbuf);
    int fn = batch_input(t, fake, &mask, fbuf);
    AdvGraph g = adv_graph(t, critic.cfg, p, rn, fn);
    if (grad_theta) {
        t.backward(g.critic_term);
        grad_theta->assign(critic.layout.total, 0.0);
        collect_param_grads(t, critic.layout, p, grad_theta->data());
    }
    return t.scalar(g.critic_term);
}

LossParts generator_loss(const GeneratorModel& gen, const CriticModel& critic,
                         const StepBatch& b, const BridgeConfig& cfg, const PatchPlan& patches,
                         const MsssimGraph& msgraph, std::vector<double>* grad_phi) {
    const int batch = int(b.x_t.size());
    require(batch >= 1, "batch must be nonempty");
    require(int(b.x0.size()) == batch, "x0/x_t batch sizes disagree");
    const int h = gen.cfg.image_h, w = gen.cfg.image_w;
    const int npix = h * w;
    require(b.mask.h == h && b.mask.w == w, "mask shape mismatch");
    const int nl = noise_len(gen.cfg);
    require(int(b.noise.size()) == batch * nl, "noise length mismatch");

    ad::Tape t;
    ParamBinding pg = bind_params(t, gen.layout, gen.phi.data(), grad_phi != nullptr);
    ParamBinding pc = bind_params(t, critic.layout, critic.theta.data(), false);

    std::vector<double> xbuf;
    int xt = batch_input(t, b.x_t, nullptr, xbuf);
    int noise = t.constant(noise_shape(gen.cfg, batch), b.noise.data());
    int xhat = generator_graph(t, gen.cfg, pg, xt, b.t_i, noise);

    // Adversarial term on the masked prediction.
    std::vector<double> mrep(size_t(batch) * npix, 0.0);
    for (int s = 0; s < batch; ++s)
        for (int p = 0; p < npix; ++p) mrep[size_t(s) * npix + p] = b.mask.m[size_t(p)] ? 1.0 : 0.0;
    int mnode = t.constant({batch, 1, h, w}, mrep.data());
    int adv = t.mean(t.softplus(t.mul_scalar(critic_graph(t, critic.cfg, pc, t.mul(xhat, mnode)), -1.0)));

    // Transport cost: per-sample squared distance summed over masked pixels,
    // averaged over the batch.
    int diff = t.sub(xhat, xt);
    std::vector<double> wts(size_t(batch) * npix, 0.0);
    for (int s = 0; s < batch; ++s)
        for (int p = 0; p < npix; ++p)
            if (b.mask.m[size_t(p)]) wts[size_t(s) * npix + p] = 1.0 / batch;
    int sb = t.dot_const(t.mul(diff, diff), wts);

    const int nmask = b.mask.count();
    if (cfg.entropy_estimator == "gaussian-proxy" && !b.entropy_noise.empty()) {
        const int m = int(b.entropy_noise.size()) / nl;
        require(m >= 2 && int(b.entropy_noise.size()) == m * nl, "entropy noise length mismatch");
        require(b.entropy_anchor >= 0 && b.entropy_anchor < batch, "entropy anchor out of range");
        std::vector<GridImage> rep(size_t(m), b.x_t[size_t(b.entropy_anchor)]);
        std::vector<double> ebuf;
        int xe_in = batch_input(t, rep, nullptr, ebuf);
        int enoise = t.constant(noise_shape(gen.cfg, m), b.entropy_noise.data());
        int xe = generator_graph(t, gen.cfg, pg, xe_in, b.t_i, enoise);
        int bm = t.batch_mean(xe);
        int dev = t.sub(xe, bm);
        int var = t.batch_mean(t.mul(dev, dev));
        int lv = t.log_op(t.add_scalar(var, kEntropyFloor));
        std::vector<double> ewts(size_t(m) * npix, 0.0);
        for (int p = 0; p < npix; ++p)
            if (b.mask.m[size_t(p)]) ewts[size_t(p)] = 0.5;
        int hent = t.add_scalar(t.dot_const(lv, ewts),
                                0.5 * std::log(2.0 * M_PI * M_E) * nmask);
        sb = t.sub(sb, t.mul_scalar(hent, 2.0 * cfg.tau * (1.0 - b.t_i)));
    }

    // Structural regularizers anchor each prediction to its source original.
    int xflat = t.reshape(xhat, {batch * npix});
    int nce_sum = -1, ms_sum = -1;
    for (int s = 0; s < batch; ++s) {
        int xs = t.sparse_apply(sample_slicer(npix, batch, s), xflat);
        int x0s = t.constant({npix}, b.x0[size_t(s)].v.data());
        int nce_s = patch_loss_graph(t, patches, x0s, xs);
        int ms_s = msssim_loss_graph(t, msgraph, x0s, xs);
        nce_sum = (s == 0) ? nce_s : t.add(nce_sum, nce_s);
        ms_sum = (s == 0) ? ms_s : t.add(ms_sum, ms_s);
    }
    int nce = t.mul_scalar(nce_sum, 1.0 / batch);
    int ms = t.mul_scalar(ms_sum, 1.0 / batch);

    int total = t.add(adv, t.add(t.mul_scalar(sb, cfg.lambda_sb),
                                 t.add(t.mul_scalar(nce, cfg.lambda_reg_patchnce),
                                       t.mul_scalar(ms, cfg.lambda_reg_msssim))));

    LossParts parts;
    parts.adv = t.scalar(adv);
    parts.sb = t.scalar(sb);
    parts.nce = t.scalar(nce);
    parts.msssim = t.scalar(ms);
    parts.total = t.scalar(total);
    if (grad_phi) {
        t.backward(total);
        grad_phi->assign(gen.layout.total, 0.0);
        collect_param_grads(t, gen.layout, pg, grad_phi->data());
    }
    return parts;
}

}  // namespace cortexbridge::bridge
