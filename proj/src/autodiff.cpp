#include "cortexbridge/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace cortexbridge::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Patch layout: rows (c, ki, kj), columns (oh, ow).
void im2col(const double* x, int c_in, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, double* cols) {
    for (int c = 0; c < c_in; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + size_t((c * kh + ki) * kw + kj) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    int ii = i * stride - pad + ki;
                    for (int j = 0; j < ow; ++j) {
                        int jj = j * stride - pad + kj;
                        row[i * ow + j] = (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                              ? x[size_t(c) * h * w + size_t(ii) * w + jj]
                                              : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int c_in, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, double* dx) {
    for (int c = 0; c < c_in; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + size_t((c * kh + ki) * kw + kj) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    int ii = i * stride - pad + ki;
                    if (ii < 0 || ii >= h) continue;
                    for (int j = 0; j < ow; ++j) {
                        int jj = j * stride - pad + kj;
                        if (jj < 0 || jj >= w) continue;
                        dx[size_t(c) * h * w + size_t(ii) * w + jj] += row[i * ow + j];
                    }
                }
            }
        }
    }
}

}  // namespace

int numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

int Tape::input(std::vector<int> shape, const double* data, bool needs_grad) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(data, data + numel(n.shape));
    n.grad.assign(n.val.size(), 0.0);
    n.needs = needs_grad;
    return push(std::move(n));
}

int Tape::constant(std::vector<int> shape, const double* data) {
    return input(std::move(shape), data, false);
}

int Tape::zeros(std::vector<int> shape, bool needs_grad) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(size_t(numel(n.shape)), 0.0);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = needs_grad;
    return push(std::move(n));
}

double Tape::scalar(int id) const {
    require(numel(nodes_[size_t(id)].shape) == 1, "scalar() needs a one-element node");
    return nodes_[size_t(id)].val[0];
}

int Tape::add(int a, int b) {
    require(shape(a) == shape(b), "add: shape mismatch");
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] + val(b)[i];
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id] {
            const auto& g = nodes_[size_t(id)].grad;
            if (nodes_[size_t(a)].needs)
                for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i];
            if (nodes_[size_t(b)].needs)
                for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(b)].grad[i] += g[i];
        };
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    require(shape(a) == shape(b), "sub: shape mismatch");
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] - val(b)[i];
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id] {
            const auto& g = nodes_[size_t(id)].grad;
            if (nodes_[size_t(a)].needs)
                for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i];
            if (nodes_[size_t(b)].needs)
                for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(b)].grad[i] -= g[i];
        };
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    require(shape(a) == shape(b), "mul: shape mismatch");
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] * val(b)[i];
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id] {
            const auto& g = nodes_[size_t(id)].grad;
            if (nodes_[size_t(a)].needs)
                for (size_t i = 0; i < g.size(); ++i)
                    nodes_[size_t(a)].grad[i] += g[i] * nodes_[size_t(b)].val[i];
            if (nodes_[size_t(b)].needs)
                for (size_t i = 0; i < g.size(); ++i)
                    nodes_[size_t(b)].grad[i] += g[i] * nodes_[size_t(a)].val[i];
        };
    return push(std::move(n));
}

int Tape::div(int a, int b) {
    require(shape(a) == shape(b), "div: shape mismatch");
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] / val(b)[i];
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id] {
            const auto& g = nodes_[size_t(id)].grad;
            const auto& out = nodes_[size_t(id)].val;
            for (size_t i = 0; i < g.size(); ++i) {
                double inv_b = 1.0 / nodes_[size_t(b)].val[i];
                if (nodes_[size_t(a)].needs) nodes_[size_t(a)].grad[i] += g[i] * inv_b;
                if (nodes_[size_t(b)].needs)
                    nodes_[size_t(b)].grad[i] -= g[i] * out[i] * inv_b;
            }
        };
    return push(std::move(n));
}

int Tape::add_scalar(int a, double c) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] + c;
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i];
        };
    return push(std::move(n));
}

int Tape::mul_scalar(int a, double c) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] * c;
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id, c] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i] * c;
        };
    return push(std::move(n));
}

namespace {
double sigmoid_of(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
}  // namespace

int Tape::silu(int a) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = val(a)[i] * sigmoid_of(val(a)[i]);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i) {
                double x = nodes_[size_t(a)].val[i], s = sigmoid_of(x);
                nodes_[size_t(a)].grad[i] += g[i] * s * (1.0 + x * (1.0 - s));
            }
        };
    return push(std::move(n));
}

int Tape::sigmoid(int a) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = sigmoid_of(val(a)[i]);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            const auto& y = nodes_[size_t(id)].val;
            for (size_t i = 0; i < g.size(); ++i)
                nodes_[size_t(a)].grad[i] += g[i] * y[i] * (1.0 - y[i]);
        };
    return push(std::move(n));
}

int Tape::exp_op(int a) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::exp(val(a)[i]);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            const auto& y = nodes_[size_t(id)].val;
            for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i] * y[i];
        };
    return push(std::move(n));
}

int Tape::log_op(int a) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::log(val(a)[i]);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i)
                nodes_[size_t(a)].grad[i] += g[i] / nodes_[size_t(a)].val[i];
        };
    return push(std::move(n));
}

int Tape::softplus(int a) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) {
        double x = val(a)[i];
        n.val[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i)
                nodes_[size_t(a)].grad[i] += g[i] * sigmoid_of(nodes_[size_t(a)].val[i]);
        };
    return push(std::move(n));
}

int Tape::signed_pow(int a, double e) {
    Node n;
    n.shape = shape(a);
    n.val.resize(val(a).size());
    for (size_t i = 0; i < n.val.size(); ++i) {
        double x = val(a)[i];
        n.val[i] = x == 0.0 ? 0.0 : std::copysign(std::pow(std::abs(x), e), x);
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id, e] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i) {
                double x = nodes_[size_t(a)].val[i];
                double d = x == 0.0 ? 0.0 : e * std::pow(std::abs(x), e - 1.0);
                nodes_[size_t(a)].grad[i] += g[i] * d;
            }
        };
    return push(std::move(n));
}

int Tape::reshape(int a, std::vector<int> new_shape) {
    require(numel(new_shape) == numel(shape(a)), "reshape: element count mismatch");
    Node n;
    n.shape = std::move(new_shape);
    n.val = val(a);
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            const auto& g = nodes_[size_t(id)].grad;
            for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i];
        };
    return push(std::move(n));
}

int Tape::transpose2(int a) {
    const auto& s = shape(a);
    require(s.size() == 2, "transpose2: matrix expected");
    int m = s[0], p = s[1];
    Node n;
    n.shape = {p, m};
    n.val.resize(val(a).size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) n.val[size_t(j) * m + i] = val(a)[size_t(i) * p + j];
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id, m, p] {
            const auto& g = nodes_[size_t(id)].grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < p; ++j)
                    nodes_[size_t(a)].grad[size_t(i) * p + j] += g[size_t(j) * m + i];
        };
    return push(std::move(n));
}

int Tape::row_scale(int a, int s) {
    const auto& sa = shape(a);
    require(sa.size() == 2, "row_scale: matrix expected");
    require(shape(s) == std::vector<int>{sa[0]}, "row_scale: scale must have one entry per row");
    int m = sa[0], p = sa[1];
    Node n;
    n.shape = sa;
    n.val.resize(val(a).size());
    for (int i = 0; i < m; ++i) {
        double f = val(s)[size_t(i)];
        for (int j = 0; j < p; ++j) n.val[size_t(i) * p + j] = val(a)[size_t(i) * p + j] * f;
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(s).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, s, id, m, p] {
            const auto& g = nodes_[size_t(id)].grad;
            for (int i = 0; i < m; ++i) {
                double f = nodes_[size_t(s)].val[size_t(i)];
                double acc = 0;
                for (int j = 0; j < p; ++j) {
                    double gij = g[size_t(i) * p + j];
                    if (nodes_[size_t(a)].needs) nodes_[size_t(a)].grad[size_t(i) * p + j] += gij * f;
                    acc += gij * nodes_[size_t(a)].val[size_t(i) * p + j];
                }
                if (nodes_[size_t(s)].needs) nodes_[size_t(s)].grad[size_t(i)] += acc;
            }
        };
    return push(std::move(n));
}

int Tape::concat_channels(int a, int b) {
    const auto& sa = shape(a);
    const auto& sb = shape(b);
    require(sa.size() == 4 && sb.size() == 4, "concat_channels: NCHW only");
    require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat_channels: incompatible shapes");
    int nn = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Node n;
    n.shape = {nn, ca + cb, sa[2], sa[3]};
    n.val.resize(size_t(nn) * (ca + cb) * hw);
    for (int s = 0; s < nn; ++s) {
        std::copy_n(val(a).begin() + size_t(s) * ca * hw, size_t(ca) * hw,
                    n.val.begin() + size_t(s) * (ca + cb) * hw);
        std::copy_n(val(b).begin() + size_t(s) * cb * hw, size_t(cb) * hw,
                    n.val.begin() + size_t(s) * (ca + cb) * hw + size_t(ca) * hw);
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id, nn, ca, cb, hw] {
            const auto& g = nodes_[size_t(id)].grad;
            for (int s = 0; s < nn; ++s) {
                const double* gs = g.data() + size_t(s) * (ca + cb) * hw;
                if (nodes_[size_t(a)].needs) {
                    double* da = nodes_[size_t(a)].grad.data() + size_t(s) * ca * hw;
                    for (int i = 0; i < ca * hw; ++i) da[i] += gs[i];
                }
                if (nodes_[size_t(b)].needs) {
                    double* db = nodes_[size_t(b)].grad.data() + size_t(s) * cb * hw;
                    for (int i = 0; i < cb * hw; ++i) db[i] += gs[size_t(ca) * hw + i];
                }
            }
        };
    return push(std::move(n));
}

int Tape::upsample2(int a) {
    const auto& s = shape(a);
    require(s.size() == 4, "upsample2: NCHW only");
    int nn = s[0], c = s[1], h = s[2], w = s[3];
    Node n;
    n.shape = {nn, c, 2 * h, 2 * w};
    n.val.resize(size_t(numel(n.shape)));
    for (int sc = 0; sc < nn * c; ++sc) {
        const double* in = val(a).data() + size_t(sc) * h * w;
        double* out = n.val.data() + size_t(sc) * 4 * h * w;
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j) out[i * 2 * w + j] = in[(i / 2) * w + j / 2];
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id, nn, c, h, w] {
            const auto& g = nodes_[size_t(id)].grad;
            for (int sc = 0; sc < nn * c; ++sc) {
                const double* gs = g.data() + size_t(sc) * 4 * h * w;
                double* da = nodes_[size_t(a)].grad.data() + size_t(sc) * h * w;
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j) da[(i / 2) * w + j / 2] += gs[i * 2 * w + j];
            }
        };
    return push(std::move(n));
}

int Tape::add_bias(int a, int bias) {
    const auto& s = shape(a);
    require(s.size() == 4, "add_bias: NCHW only");
    require(shape(bias) == std::vector<int>{s[1]}, "add_bias: bias must be per channel");
    int nn = s[0], c = s[1], hw = s[2] * s[3];
    Node n;
    n.shape = s;
    n.val.resize(val(a).size());
    for (int sn = 0; sn < nn; ++sn)
        for (int sc = 0; sc < c; ++sc) {
            double off = val(bias)[size_t(sc)];
            const double* in = val(a).data() + (size_t(sn) * c + sc) * hw;
            double* out = n.val.data() + (size_t(sn) * c + sc) * hw;
            for (int i = 0; i < hw; ++i) out[i] = in[i] + off;
        }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(bias).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, bias, id, nn, c, hw] {
            const auto& g = nodes_[size_t(id)].grad;
            if (nodes_[size_t(a)].needs)
                for (size_t i = 0; i < g.size(); ++i) nodes_[size_t(a)].grad[i] += g[i];
            if (nodes_[size_t(bias)].needs)
                for (int sn = 0; sn < nn; ++sn)
                    for (int sc = 0; sc < c; ++sc) {
                        const double* gs = g.data() + (size_t(sn) * c + sc) * hw;
                        double acc = 0;
                        for (int i = 0; i < hw; ++i) acc += gs[i];
                        nodes_[size_t(bias)].grad[size_t(sc)] += acc;
                    }
        };
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const auto& sa = shape(a);
    const auto& sb = shape(b);
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul: incompatible shapes");
    int m = sa[0], k = sa[1], p = sb[1];
    Node n;
    n.shape = {m, p};
    n.val.resize(size_t(m) * p);
    {
        ConstMapMat ma(val(a).data(), m, k), mb(val(b).data(), k, p);
        MapMat mo(n.val.data(), m, p);
        mo.noalias() = ma * mb;
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs || node(b).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, b, id, m, k, p] {
            ConstMapMat g(nodes_[size_t(id)].grad.data(), m, p);
            if (nodes_[size_t(a)].needs) {
                ConstMapMat mb(nodes_[size_t(b)].val.data(), k, p);
                MapMat da(nodes_[size_t(a)].grad.data(), m, k);
                da.noalias() += g * mb.transpose();
            }
            if (nodes_[size_t(b)].needs) {
                ConstMapMat ma(nodes_[size_t(a)].val.data(), m, k);
                MapMat db(nodes_[size_t(b)].grad.data(), k, p);
                db.noalias() += ma.transpose() * g;
            }
        };
    return push(std::move(n));
}

int Tape::conv2d(int x, int w, int bias, int stride, int pad) {
    const auto& sx = shape(x);
    const auto& sw = shape(w);
    require(sx.size() == 4 && sw.size() == 4, "conv2d: x NCHW, w FCkk");
    require(sx[1] == sw[1], "conv2d: channel mismatch");
    require(stride >= 1, "conv2d: stride must be positive");
    int nn = sx[0], c = sx[1], h = sx[2], ww = sx[3];
    int f = sw[0], kh = sw[2], kw = sw[3];
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (ww + 2 * pad - kw) / stride + 1;
    require(oh >= 1 && ow >= 1, "conv2d: kernel larger than padded input");
    const int kdim = c * kh * kw, pdim = oh * ow;

    Node n;
    n.shape = {nn, f, oh, ow};
    n.val.resize(size_t(nn) * f * pdim);
    std::vector<double> cols(size_t(kdim) * pdim);
    {
        ConstMapMat wm(val(w).data(), f, kdim);
        for (int s = 0; s < nn; ++s) {
            im2col(val(x).data() + size_t(s) * c * h * ww, c, h, ww, kh, kw, stride, pad, oh,
                   ow, cols.data());
            ConstMapMat cm(cols.data(), kdim, pdim);
            MapMat om(n.val.data() + size_t(s) * f * pdim, f, pdim);
            om.noalias() = wm * cm;
        }
    }
    if (bias >= 0) {
        require(shape(bias) == std::vector<int>{f}, "conv2d: bias must be per filter");
        for (int s = 0; s < nn; ++s)
            for (int fi = 0; fi < f; ++fi) {
                double off = val(bias)[size_t(fi)];
                double* out = n.val.data() + (size_t(s) * f + fi) * pdim;
                for (int i = 0; i < pdim; ++i) out[i] += off;
            }
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(x).needs || node(w).needs || (bias >= 0 && node(bias).needs);
    int id = n_nodes();
    if (n.needs)
        n.back = [this, x, w, bias, id, stride, pad, nn, c, h, ww, f, kh, kw, oh, ow] {
            const int kdim = c * kh * kw, pdim = oh * ow;
            const auto& g = nodes_[size_t(id)].grad;
            std::vector<double> cols(size_t(kdim) * pdim), dcols(size_t(kdim) * pdim);
            for (int s = 0; s < nn; ++s) {
                ConstMapMat gm(g.data() + size_t(s) * f * pdim, f, pdim);
                if (nodes_[size_t(w)].needs) {
                    im2col(nodes_[size_t(x)].val.data() + size_t(s) * c * h * ww, c, h, ww, kh,
                           kw, stride, pad, oh, ow, cols.data());
                    ConstMapMat cm(cols.data(), kdim, pdim);
                    MapMat dw(nodes_[size_t(w)].grad.data(), f, kdim);
                    dw.noalias() += gm * cm.transpose();
                }
                if (nodes_[size_t(x)].needs) {
                    ConstMapMat wm(nodes_[size_t(w)].val.data(), f, kdim);
                    MapMat dc(dcols.data(), kdim, pdim);
                    dc.noalias() = wm.transpose() * gm;
                    col2im_add(dcols.data(), c, h, ww, kh, kw, stride, pad, oh, ow,
                               nodes_[size_t(x)].grad.data() + size_t(s) * c * h * ww);
                }
                if (bias >= 0 && nodes_[size_t(bias)].needs)
                    for (int fi = 0; fi < f; ++fi) {
                        const double* gs = g.data() + (size_t(s) * f + fi) * pdim;
                        double acc = 0;
                        for (int i = 0; i < pdim; ++i) acc += gs[i];
                        nodes_[size_t(bias)].grad[size_t(fi)] += acc;
                    }
            }
        };
    return push(std::move(n));
}

int Tape::sparse_apply(std::shared_ptr<const SparseMat> s, int x) {
    require(numel(shape(x)) == s->cols, "sparse_apply: size mismatch");
    Node n;
    n.shape = {s->rows};
    n.val.assign(size_t(s->rows), 0.0);
    for (int r = 0; r < s->rows; ++r) {
        double acc = 0;
        for (int k = s->row_ptr[size_t(r)]; k < s->row_ptr[size_t(r) + 1]; ++k)
            acc += s->w[size_t(k)] * val(x)[size_t(s->col[size_t(k)])];
        n.val[size_t(r)] = acc;
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(x).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, s, x, id] {
            const auto& g = nodes_[size_t(id)].grad;
            auto& dx = nodes_[size_t(x)].grad;
            for (int r = 0; r < s->rows; ++r) {
                if (g[size_t(r)] == 0.0) continue;
                for (int k = s->row_ptr[size_t(r)]; k < s->row_ptr[size_t(r) + 1]; ++k)
                    dx[size_t(s->col[size_t(k)])] += s->w[size_t(k)] * g[size_t(r)];
            }
        };
    return push(std::move(n));
}

int Tape::dot_const(int x, std::vector<double> weights) {
    require(val(x).size() == weights.size(), "dot_const: size mismatch");
    Node n;
    n.shape = {1};
    double acc = 0;
    for (size_t i = 0; i < weights.size(); ++i) acc += weights[i] * val(x)[i];
    n.val = {acc};
    n.grad = {0.0};
    n.needs = node(x).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, x, id, w = std::move(weights)] {
            double g = nodes_[size_t(id)].grad[0];
            if (g == 0.0) return;
            for (size_t i = 0; i < w.size(); ++i) nodes_[size_t(x)].grad[i] += w[i] * g;
        };
    return push(std::move(n));
}

int Tape::sum(int a) {
    Node n;
    n.shape = {1};
    double acc = 0;
    for (double v : val(a)) acc += v;
    n.val = {acc};
    n.grad = {0.0};
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id] {
            double g = nodes_[size_t(id)].grad[0];
            for (auto& d : nodes_[size_t(a)].grad) d += g;
        };
    return push(std::move(n));
}

int Tape::mean(int a) {
    int n_el = numel(shape(a));
    return mul_scalar(sum(a), 1.0 / n_el);
}

int Tape::batch_mean(int a) {
    const auto& s = shape(a);
    require(!s.empty() && s[0] >= 1, "batch_mean: needs a leading batch dim");
    int nn = s[0], rest = numel(s) / nn;
    Node n;
    n.shape = s;
    n.val.resize(val(a).size());
    for (int r = 0; r < rest; ++r) {
        double acc = 0;
        for (int b = 0; b < nn; ++b) acc += val(a)[size_t(b) * rest + r];
        acc /= nn;
        for (int b = 0; b < nn; ++b) n.val[size_t(b) * rest + r] = acc;
    }
    n.grad.assign(n.val.size(), 0.0);
    n.needs = node(a).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, a, id, nn, rest] {
            const auto& g = nodes_[size_t(id)].grad;
            for (int r = 0; r < rest; ++r) {
                double acc = 0;
                for (int b = 0; b < nn; ++b) acc += g[size_t(b) * rest + r];
                acc /= nn;
                for (int b = 0; b < nn; ++b) nodes_[size_t(a)].grad[size_t(b) * rest + r] += acc;
            }
        };
    return push(std::move(n));
}

int Tape::cross_entropy_rows(int logits) {
    const auto& s = shape(logits);
    require(s.size() == 2 && s[0] == s[1], "cross_entropy_rows: square logits expected");
    int k = s[0];
    Node n;
    n.shape = {1};
    double loss = 0;
    for (int i = 0; i < k; ++i) {
        const double* row = val(logits).data() + size_t(i) * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
        loss += m + std::log(z) - row[i];
    }
    n.val = {loss / k};
    n.grad = {0.0};
    n.needs = node(logits).needs;
    int id = n_nodes();
    if (n.needs)
        n.back = [this, logits, id, k] {
            double g = nodes_[size_t(id)].grad[0] / k;
            if (g == 0.0) return;
            for (int i = 0; i < k; ++i) {
                const double* row = nodes_[size_t(logits)].val.data() + size_t(i) * k;
                double* drow = nodes_[size_t(logits)].grad.data() + size_t(i) * k;
                double m = row[0];
                for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
                double z = 0;
                for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
                for (int j = 0; j < k; ++j)
                    drow[j] += g * (std::exp(row[j] - m) / z - (i == j ? 1.0 : 0.0));
            }
        };
    return push(std::move(n));
}

void Tape::backward(int loss) {
    require(numel(shape(loss)) == 1, "backward: loss must be scalar");
    nodes_[size_t(loss)].grad[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
        auto& nd = nodes_[size_t(id)];
        if (nd.needs && nd.back) nd.back();
    }
}

}  // namespace cortexbridge::ad
