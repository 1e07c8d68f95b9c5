#include "fedseq/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fedseq/error.hpp"

namespace fedseq {
namespace {

/// How an update is cut into flat segments: segment 0 is the union of
/// touched item rows, segments 1..n the dense tensors.
struct Layout {
    std::vector<std::size_t> rows;
    std::size_t row_dim = 0;
    std::vector<std::pair<std::size_t, std::size_t>> dense_shapes;

    std::size_t segments() const { return 1 + dense_shapes.size(); }
};

Layout layout_of(std::span<const GradientUpdate> grads) {
    if (grads.empty()) throw AggregationError("no gradients to aggregate");
    Layout layout;
    for (const Matrix& m : grads.front().dense) layout.dense_shapes.emplace_back(m.rows(), m.cols());
    std::set<std::size_t> rows;
    for (const GradientUpdate& g : grads) {
        if (g.dense.size() != layout.dense_shapes.size()) throw AggregationError("gradient tensor count mismatch");
        for (std::size_t i = 0; i < g.dense.size(); ++i)
            if (g.dense[i].rows() != layout.dense_shapes[i].first || g.dense[i].cols() != layout.dense_shapes[i].second)
                throw AggregationError("gradient tensor shape mismatch");
        for (const auto& [row, values] : g.item_emb) {
            if (layout.row_dim == 0) layout.row_dim = values.size();
            if (values.size() != layout.row_dim) throw AggregationError("embedding row width mismatch");
            rows.insert(row);
        }
    }
    layout.rows.assign(rows.begin(), rows.end());
    return layout;
}

std::vector<double> extract(const GradientUpdate& g, const Layout& layout, std::size_t segment) {
    if (segment > 0) return g.dense[segment - 1].values();
    std::vector<double> out(layout.rows.size() * layout.row_dim, 0.0);
    for (std::size_t i = 0; i < layout.rows.size(); ++i) {
        auto it = g.item_emb.find(layout.rows[i]);
        if (it != g.item_emb.end()) std::copy(it->second.begin(), it->second.end(), out.begin() + static_cast<std::ptrdiff_t>(i * layout.row_dim));
    }
    return out;
}

void insert(GradientUpdate& g, const Layout& layout, std::size_t segment, std::span<const double> values) {
    if (segment > 0) {
        std::copy(values.begin(), values.end(), g.dense[segment - 1].values().begin());
        return;
    }
    for (std::size_t i = 0; i < layout.rows.size(); ++i) {
        auto first = values.begin() + static_cast<std::ptrdiff_t>(i * layout.row_dim);
        g.item_emb[layout.rows[i]].assign(first, first + static_cast<std::ptrdiff_t>(layout.row_dim));
    }
}

GradientUpdate empty_like(const Layout& layout) {
    GradientUpdate g;
    for (const auto& [r, c] : layout.dense_shapes) g.dense.emplace_back(r, c);
    return g;
}

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Returns `c` when it satisfies the optimality condition of the weighted
/// distance sum: |sum over other points a_i (c - w_i)/|c - w_i|| <= weight at c.
bool data_point_is_optimal(std::span<const std::vector<double>> pts, std::span<const double> w,
                           std::span<const double> c) {
    std::vector<double> pull(c.size(), 0.0);
    double weight_at_c = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double d = distance(c, pts[i]);
        if (d == 0.0) {
            weight_at_c += w[i];
            continue;
        }
        for (std::size_t j = 0; j < c.size(); ++j) pull[j] += w[i] * (c[j] - pts[i][j]) / d;
    }
    return weight_at_c > 0.0 && norm(pull) <= weight_at_c;
}

}  // namespace

AggregationRule parse_aggregation_rule(std::string_view name) {
    if (name == "fedavg") return AggregationRule::fedavg;
    if (name == "mixed_rfa") return AggregationRule::mixed_rfa;
    throw ConfigError("unknown defense rule '" + std::string(name) + "' (expected fedavg, mixed_rfa)");
}

std::string_view to_string(AggregationRule r) { return r == AggregationRule::fedavg ? "fedavg" : "mixed_rfa"; }

GmGranularity parse_gm_granularity(std::string_view name) {
    if (name == "per_tensor") return GmGranularity::per_tensor;
    if (name == "full") return GmGranularity::full;
    throw ConfigError("unknown gm granularity '" + std::string(name) + "' (expected per_tensor, full)");
}

std::string_view to_string(GmGranularity g) { return g == GmGranularity::per_tensor ? "per_tensor" : "full"; }

void DefenseConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("defense.lambda must lie in [0, 1]");
    if (!(gm_tolerance > 0.0)) throw ConfigError("defense.gm_tolerance must be positive");
    if (!(gm_smoothing > 0.0)) throw ConfigError("defense.gm_smoothing must be positive");
    if (gm_max_iters == 0) throw ConfigError("defense.gm_max_iters must be positive");
}

double gm_objective(std::span<const std::vector<double>> points, std::span<const double> weights,
                    std::span<const double> v) {
    double g = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) g += weights[i] * distance(v, points[i]);
    return g;
}

GeometricMedian geometric_median(std::span<const std::vector<double>> points, std::span<const double> weights,
                                 const DefenseConfig& cfg) {
    if (points.empty()) throw AggregationError("geometric median of an empty set");
    if (points.size() != weights.size()) throw AggregationError("points/weights length mismatch");
    const std::size_t dim = points.front().size();
    for (const auto& p : points)
        if (p.size() != dim) throw AggregationError("geometric median: dimension mismatch");
    for (double w : weights)
        if (!(w > 0.0)) throw AggregationError("geometric median weights must be positive");

    // Canonical order makes every floating-point sum independent of the
    // caller's ordering.
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (points[a] != points[b]) return points[a] < points[b];
        return weights[a] < weights[b];
    });
    std::vector<std::vector<double>> pts;
    std::vector<double> w;
    pts.reserve(order.size());
    for (std::size_t i : order) {
        pts.push_back(points[i]);
        w.push_back(weights[i]);
    }

    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    GeometricMedian out;
    std::vector<double> v(dim, 0.0);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j) v[j] += w[i] * pts[i][j];
    for (double& x : v) x /= total;
    double obj = gm_objective(pts, w, v);
    out.objective_trace.push_back(obj);

    std::vector<double> next(dim);
    for (std::size_t it = 0; it < cfg.gm_max_iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        double denom = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double beta = w[i] / std::max(distance(v, pts[i]), cfg.gm_smoothing);
            denom += beta;
            for (std::size_t j = 0; j < dim; ++j) next[j] += beta * pts[i][j];
        }
        for (double& x : next) x /= denom;
        const double next_obj = gm_objective(pts, w, next);
        if (next_obj > obj) break;
        const double step = distance(next, v);
        const double scale = 1.0 + norm(v);
        v.swap(next);
        obj = next_obj;
        out.objective_trace.push_back(obj);
        ++out.iterations;
        if (step <= cfg.gm_tolerance * scale) break;
    }

    // Weiszfeld only approaches a median that sits on a data point; snap to
    // the nearest data point when it is provably optimal.
    std::size_t nearest = 0;
    double best = INFINITY;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double d = distance(v, pts[i]);
        if (d < best) {
            best = d;
            nearest = i;
        }
    }
    if (data_point_is_optimal(pts, w, pts[nearest])) {
        const double snapped = gm_objective(pts, w, pts[nearest]);
        if (snapped <= obj) {
            v = pts[nearest];
            out.objective_trace.push_back(snapped);
        }
    }
    out.point = std::move(v);
    return out;
}

std::vector<double> normalized_weights(std::span<const double> weights) {
    if (weights.empty()) throw AggregationError("no weights");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw AggregationError("weights must be finite and non-negative");
        total += w;
    }
    if (!(total > 0.0)) throw AggregationError("weights sum to zero");
    std::vector<double> out(weights.begin(), weights.end());
    for (double& w : out) w /= total;
    return out;
}

GradientUpdate weighted_mean(std::span<const GradientUpdate> grads, std::span<const double> weights) {
    if (grads.size() != weights.size()) throw AggregationError("gradients/weights length mismatch");
    const Layout layout = layout_of(grads);
    const auto w = normalized_weights(weights);
    GradientUpdate out = empty_like(layout);
    for (std::size_t row : layout.rows) out.item_emb[row].assign(layout.row_dim, 0.0);
    for (std::size_t c = 0; c < grads.size(); ++c) {
        if (w[c] == 0.0) continue;
        for (const auto& [row, values] : grads[c].item_emb) {
            auto& acc = out.item_emb[row];
            for (std::size_t j = 0; j < values.size(); ++j) acc[j] += w[c] * values[j];
        }
        for (std::size_t t = 0; t < out.dense.size(); ++t) {
            auto& acc = out.dense[t].values();
            const auto& src = grads[c].dense[t].values();
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w[c] * src[j];
        }
    }
    return out;
}

GradientUpdate geometric_median_update(std::span<const GradientUpdate> grads, std::span<const double> weights,
                                       const DefenseConfig& cfg) {
    if (grads.size() != weights.size()) throw AggregationError("gradients/weights length mismatch");
    const Layout layout = layout_of(grads);
    const auto w = normalized_weights(weights);
    // Zero-weight clients do not take part in the median.
    std::vector<std::size_t> active;
    std::vector<double> active_w;
    for (std::size_t c = 0; c < grads.size(); ++c)
        if (w[c] > 0.0) {
            active.push_back(c);
            active_w.push_back(w[c]);
        }

    GradientUpdate out = empty_like(layout);
    auto median_of = [&](auto&& extract_fn) {
        std::vector<std::vector<double>> pts;
        pts.reserve(active.size());
        for (std::size_t c : active) pts.push_back(extract_fn(grads[c]));
        return geometric_median(pts, active_w, cfg).point;
    };

    if (cfg.granularity == GmGranularity::per_tensor) {
        for (std::size_t s = 0; s < layout.segments(); ++s)
            insert(out, layout, s, median_of([&](const GradientUpdate& g) { return extract(g, layout, s); }));
        return out;
    }
    const auto full = median_of([&](const GradientUpdate& g) {
        std::vector<double> flat;
        for (std::size_t s = 0; s < layout.segments(); ++s) {
            const auto part = extract(g, layout, s);
            flat.insert(flat.end(), part.begin(), part.end());
        }
        return flat;
    });
    std::size_t offset = 0;
    for (std::size_t s = 0; s < layout.segments(); ++s) {
        const std::size_t n = s == 0 ? layout.rows.size() * layout.row_dim
                                     : layout.dense_shapes[s - 1].first * layout.dense_shapes[s - 1].second;
        insert(out, layout, s, std::span<const double>(full).subspan(offset, n));
        offset += n;
    }
    return out;
}

GradientUpdate mixed_rfa(std::span<const GradientUpdate> grads, std::span<const double> weights,
                         const DefenseConfig& cfg) {
    cfg.validate();
    if (cfg.lambda == 1.0) return weighted_mean(grads, weights);
    if (cfg.lambda == 0.0) return geometric_median_update(grads, weights, cfg);
    const GradientUpdate mean = weighted_mean(grads, weights);
    const GradientUpdate gm = geometric_median_update(grads, weights, cfg);
    GradientUpdate out = gm;
    const double a = cfg.lambda;
    const double b = 1.0 - cfg.lambda;
    for (auto& [row, values] : out.item_emb) {
        const auto& m = mean.item_emb.at(row);
        for (std::size_t j = 0; j < values.size(); ++j) values[j] = a * m[j] + b * values[j];
    }
    for (std::size_t t = 0; t < out.dense.size(); ++t) {
        auto& o = out.dense[t].values();
        const auto& m = mean.dense[t].values();
        for (std::size_t j = 0; j < o.size(); ++j) o[j] = a * m[j] + b * o[j];
    }
    return out;
}

}  // namespace fedseq
