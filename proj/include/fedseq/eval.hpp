#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/model.hpp"

namespace fedseq {

class Rng;

struct EvalConfig {
    std::vector<std::size_t> hr_ks{10};
    std::vector<std::size_t> er_ks{5, 10, 20, 30};
    /// Sampled negatives per ranked item; capped by the items available.
    std::size_t negatives = 1000;
    std::uint64_t seed = 0;
};

struct MetricsReport {
    std::map<std::size_t, double> hr;
    std::map<std::size_t, double> ndcg;
    std::map<std::size_t, double> er;
    /// Eligible (user, target) pairs behind the ER averages.
    std::size_t eligible_users_er = 0;
    std::size_t evaluated_users = 0;

    /// Range, ndcg <= hr and ER monotonicity in K. Throws MetricError.
    void check_invariants() const;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Rank of `item` among {item} and `negatives` by score, 1-based; ties
/// count against the item.
std::size_t rank_from_scores(std::span<const double> scores, ItemId item, std::span<const ItemId> negatives);
std::size_t rank_item(const ModelParams& params, std::span<const ItemId> seq, ItemId item,
                      std::span<const ItemId> negatives);

/// Up to `count` distinct items outside `history` and different from `item`.
std::vector<ItemId> sample_eval_negatives(std::size_t num_items, std::span<const ItemId> history, ItemId item,
                                          std::size_t count, Rng& rng);

struct HitNdcg {
    double hr;
    double ndcg;
};
HitNdcg hit_ndcg(std::size_t rank, std::size_t k);

/// ER@K for one target over users whose history lacks it. Throws
/// MetricError when no user is eligible.
std::map<std::size_t, double> exposure_ratio(const ModelParams& params, std::span<const ClientDataset> clients,
                                             ItemId target, const EvalConfig& cfg);

/// HR/NDCG on every user's test item, ER averaged over targets.
MetricsReport evaluate(const ModelParams& params, std::span<const ClientDataset> clients,
                       std::span<const ItemId> targets, const EvalConfig& cfg);

}  // namespace fedseq
