#pragma once

#include "cortexbridge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <utility>
#include <vector>

namespace gradcheck {

// Rebuilds the graph from scratch for every probe. The builder receives the
// current parameter values and returns the scalar loss id plus the input ids
// in the same order as the value vectors.
using Builder = std::function<std::pair<int, std::vector<int>>(
    cortexbridge::ad::Tape&, const std::vector<std::vector<double>>&)>;

inline double loss_value(const Builder& build, const std::vector<std::vector<double>>& params) {
    cortexbridge::ad::Tape t;
    return t.scalar(build(t, params).first);
}

inline double max_rel_error(const Builder& build, std::vector<std::vector<double>> params,
                            double step = 1e-5, double floor = 1e-6) {
    cortexbridge::ad::Tape t;
    auto [loss, ids] = build(t, params);
    t.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(ids.size());
    for (int id : ids) analytic.push_back(t.grad(id));

    double worst = 0;
    for (size_t k = 0; k < params.size(); ++k) {
        for (size_t i = 0; i < params[k].size(); ++i) {
            double keep = params[k][i];
            params[k][i] = keep + step;
            double up = loss_value(build, params);
            params[k][i] = keep - step;
            double dn = loss_value(build, params);
            params[k][i] = keep;
            double num = (up - dn) / (2.0 * step);
            double ana = analytic[k][i];
            double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline std::vector<double> uniform_vec(int n, unsigned seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(size_t(n), 0.0);
    for (auto& x : v) x = dist(rng);
    return v;
}

}  // namespace gradcheck
