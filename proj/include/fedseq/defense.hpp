#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "fedseq/model.hpp"

namespace fedseq {

enum class AggregationRule { fedavg, mixed_rfa };
enum class GmGranularity { per_tensor, full };

AggregationRule parse_aggregation_rule(std::string_view name);
std::string_view to_string(AggregationRule r);
GmGranularity parse_gm_granularity(std::string_view name);
std::string_view to_string(GmGranularity g);

struct DefenseConfig {
    AggregationRule rule = AggregationRule::fedavg;
    /// Share of the weighted mean in the mixed-RFA blend.
    double lambda = 0.3;
    double gm_tolerance = 1e-6;
    std::size_t gm_max_iters = 100;
    double gm_smoothing = 1e-8;
    GmGranularity granularity = GmGranularity::per_tensor;

    void validate() const;
};

struct GeometricMedian {
    std::vector<double> point;
    std::size_t iterations = 0;
    /// Objective value at the start point and after every accepted step.
    std::vector<double> objective_trace;
};

/// Weighted sum of Euclidean distances from v to the points.
double gm_objective(std::span<const std::vector<double>> points, std::span<const double> weights,
                    std::span<const double> v);

/// Smoothed Weiszfeld iteration started at the weighted mean. A step that
/// would raise the objective is rejected and ends the iteration. When a
/// data point satisfies the subgradient optimality condition it is
/// returned exactly. Input order does not affect the result.
GeometricMedian geometric_median(std::span<const std::vector<double>> points, std::span<const double> weights,
                                 const DefenseConfig& cfg);

/// Weights normalised to sum to one. Throws AggregationError on empty,
/// negative or all-zero weights.
std::vector<double> normalized_weights(std::span<const double> weights);

/// FedAvg: sum_i w_i g_i with normalised weights.
GradientUpdate weighted_mean(std::span<const GradientUpdate> grads, std::span<const double> weights);

/// lambda * weighted mean + (1 - lambda) * geometric median, per tensor
/// (or over the whole flattened update with GmGranularity::full).
GradientUpdate mixed_rfa(std::span<const GradientUpdate> grads, std::span<const double> weights,
                         const DefenseConfig& cfg);

/// Geometric-median component of mixed_rfa alone.
GradientUpdate geometric_median_update(std::span<const GradientUpdate> grads, std::span<const double> weights,
                                       const DefenseConfig& cfg);

}  // namespace fedseq
