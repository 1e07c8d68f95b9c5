#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedseq/model.hpp"
#include "fedseq/rng.hpp"

namespace testing {

using namespace fedseq;

inline ModelShape tiny_shape(Variant v, std::size_t items = 10, std::size_t dim = 8, std::size_t max_len = 3) {
    ModelShape s;
    s.num_items = items;
    s.dim = dim;
    s.ffn_dim = 2 * dim;
    s.max_len = max_len;
    s.variant = v;
    return s;
}

/// Params with every tensor (LN gains and biases included) randomised so no
/// gradient block is trivially zero.
inline ModelParams random_params(const ModelShape& shape, std::uint64_t seed) {
    ModelParams p = init_params(shape, seed);
    Rng rng(derive_seed({seed, 99}));
    for (auto& m : p.dense)
        for (double& v : m.values()) v = rng.uniform(-0.6, 0.6);
    for (double& v : p[kLn1Gamma].values()) v += 1.0;
    for (double& v : p[kLn2Gamma].values()) v += 1.0;
    for (double& v : p.item_emb.values()) v = rng.uniform(-0.6, 0.6);
    std::fill(p.item_emb.row(0).begin(), p.item_emb.row(0).end(), 0.0);
    return p;
}

inline double loss_value(const ModelParams& params, const LossBuilder& build) {
    Graph g;
    BoundParams bp = bind_params(g, params, false);
    return g.scalar(build(g, bp));
}

struct FdReport {
    double worst = 0.0;
    std::string where;
};

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every tensor (item row 0 excluded). Relative error
/// is |a - n| / max(|a|, |n|, floor).
inline FdReport finite_difference_check(const ModelParams& params, const LossBuilder& build, double h = 1e-4,
                                        double floor = 1e-6) {
    const GradientResult analytic = grad_params(params, build);
    const Matrix item_grad = densify_item_grad(analytic.grad, params.shape);
    FdReport report;
    auto check = [&](const std::string& name, auto&& slot, double a) {
        ModelParams plus = params;
        ModelParams minus = params;
        slot(plus) += h;
        slot(minus) -= h;
        const double numeric = (loss_value(plus, build) - loss_value(minus, build)) / (2.0 * h);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > report.worst) {
            report.worst = rel;
            report.where = name;
        }
    };
    for (std::size_t r = 1; r < params.item_emb.rows(); ++r)
        for (std::size_t c = 0; c < params.item_emb.cols(); ++c)
            check("item_emb[" + std::to_string(r) + "," + std::to_string(c) + "]",
                  [&](ModelParams& p) -> double& { return p.item_emb(r, c); }, item_grad(r, c));
    const auto names = dense_tensor_names(params.shape.variant);
    for (std::size_t t = 0; t < params.dense.size(); ++t)
        for (std::size_t i = 0; i < params.dense[t].size(); ++i)
            check(names[t] + "[" + std::to_string(i) + "]",
                  [&](ModelParams& p) -> double& { return p.dense[t].values()[i]; },
                  analytic.grad.dense[t].values()[i]);
    return report;
}

}  // namespace testing
