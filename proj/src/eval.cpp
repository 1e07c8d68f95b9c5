#include "fedseq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedseq/error.hpp"
#include "fedseq/parallel.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

enum Purpose : std::uint64_t { kHitRatio = 0, kExposure = 1 };

bool contains(std::span<const ItemId> seq, ItemId item) { return std::find(seq.begin(), seq.end(), item) != seq.end(); }

std::vector<ItemId> negatives_for(const EvalConfig& cfg, std::size_t num_items, const ClientDataset& c, ItemId item,
                                  Purpose purpose) {
    Rng rng(derive_seed({cfg.seed, c.user, purpose, item}));
    return sample_eval_negatives(num_items, c.train_seq, item, cfg.negatives, rng);
}

}  // namespace

void MetricsReport::check_invariants() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    for (const auto& [k, v] : hr)
        if (!in_unit(v)) throw MetricError("HR@" + std::to_string(k) + " outside [0, 1]");
    for (const auto& [k, v] : ndcg) {
        if (!in_unit(v)) throw MetricError("NDCG@" + std::to_string(k) + " outside [0, 1]");
        auto it = hr.find(k);
        if (it != hr.end() && v > it->second + 1e-12) throw MetricError("NDCG@" + std::to_string(k) + " exceeds HR");
    }
    double prev = 0.0;
    for (const auto& [k, v] : er) {
        if (!in_unit(v)) throw MetricError("ER@" + std::to_string(k) + " outside [0, 1]");
        if (v + 1e-12 < prev) throw MetricError("ER is not monotone in K at K=" + std::to_string(k));
        prev = v;
    }
}

std::size_t rank_from_scores(std::span<const double> scores, ItemId item, std::span<const ItemId> negatives) {
    const double s = scores[item];
    std::size_t rank = 1;
    for (ItemId n : negatives)
        if (scores[n] >= s) ++rank;
    return rank;
}

std::size_t rank_item(const ModelParams& params, std::span<const ItemId> seq, ItemId item,
                      std::span<const ItemId> negatives) {
    if (contains(negatives, item)) throw std::invalid_argument("rank_item: item is among its negatives");
    const auto scores = forward_scores(params, seq);
    return rank_from_scores(scores, item, negatives);
}

std::vector<ItemId> sample_eval_negatives(std::size_t num_items, std::span<const ItemId> history, ItemId item,
                                          std::size_t count, Rng& rng) {
    std::vector<bool> blocked(num_items + 1, false);
    blocked[kPaddingItem] = true;
    if (item <= num_items) blocked[item] = true;
    for (ItemId h : history)
        if (h <= num_items) blocked[h] = true;
    std::vector<ItemId> pool;
    for (ItemId i = 1; i <= num_items; ++i)
        if (!blocked[i]) pool.push_back(i);
    if (count >= pool.size()) return pool;
    std::vector<ItemId> out;
    out.reserve(count);
    for (std::uint64_t idx : rng.sample_without_replacement(pool.size(), count)) out.push_back(pool[idx]);
    return out;
}

HitNdcg hit_ndcg(std::size_t rank, std::size_t k) {
    if (rank == 0) throw std::invalid_argument("rank is 1-based");
    if (rank > k) return {0.0, 0.0};
    return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

std::map<std::size_t, double> exposure_ratio(const ModelParams& params, std::span<const ClientDataset> clients,
                                             ItemId target, const EvalConfig& cfg) {
    if (cfg.er_ks.empty()) throw MetricError("no K values for ER");
    std::vector<std::size_t> ranks(clients.size(), 0);
    parallel_for(clients.size(), [&](std::size_t u) {
        const ClientDataset& c = clients[u];
        if (contains(c.train_seq, target)) return;
        const auto scores = forward_scores(params, c.train_seq);
        ranks[u] = rank_from_scores(scores, target, negatives_for(cfg, params.shape.num_items, c, target, kExposure));
    });
    std::size_t eligible = 0;
    std::map<std::size_t, double> er;
    for (std::size_t k : cfg.er_ks) er[k] = 0.0;
    for (std::size_t r : ranks) {
        if (r == 0) continue;
        ++eligible;
        for (auto& [k, v] : er) v += r <= k ? 1.0 : 0.0;
    }
    if (eligible == 0) throw MetricError("no user is eligible for ER of item " + std::to_string(target));
    for (auto& [k, v] : er) v /= static_cast<double>(eligible);
    return er;
}

MetricsReport evaluate(const ModelParams& params, std::span<const ClientDataset> clients,
                       std::span<const ItemId> targets, const EvalConfig& cfg) {
    if (clients.empty()) throw MetricError("no users to evaluate");
    const std::size_t M = params.shape.num_items;
    struct UserRanks {
        std::size_t test_rank = 0;
        std::vector<std::size_t> target_ranks;  // 0 = ineligible
    };
    std::vector<UserRanks> per_user(clients.size());
    parallel_for(clients.size(), [&](std::size_t u) {
        const ClientDataset& c = clients[u];
        const auto scores = forward_scores(params, c.train_seq);
        UserRanks& r = per_user[u];
        r.test_rank = rank_from_scores(scores, c.test_item, negatives_for(cfg, M, c, c.test_item, kHitRatio));
        r.target_ranks.assign(targets.size(), 0);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            if (contains(c.train_seq, targets[t])) continue;
            r.target_ranks[t] =
                rank_from_scores(scores, targets[t], negatives_for(cfg, M, c, targets[t], kExposure));
        }
    });

    MetricsReport report;
    report.evaluated_users = clients.size();
    for (std::size_t k : cfg.hr_ks) {
        double hr = 0.0;
        double nd = 0.0;
        for (const auto& r : per_user) {
            const auto h = hit_ndcg(r.test_rank, k);
            hr += h.hr;
            nd += h.ndcg;
        }
        report.hr[k] = hr / static_cast<double>(clients.size());
        report.ndcg[k] = nd / static_cast<double>(clients.size());
    }
    if (!targets.empty()) {
        for (std::size_t k : cfg.er_ks) report.er[k] = 0.0;
        for (std::size_t t = 0; t < targets.size(); ++t) {
            std::size_t eligible = 0;
            std::map<std::size_t, double> hits;
            for (const auto& r : per_user) {
                const std::size_t rank = r.target_ranks[t];
                if (rank == 0) continue;
                ++eligible;
                for (std::size_t k : cfg.er_ks) hits[k] += rank <= k ? 1.0 : 0.0;
            }
            if (eligible == 0) throw MetricError("no user is eligible for ER of item " + std::to_string(targets[t]));
            report.eligible_users_er += eligible;
            for (std::size_t k : cfg.er_ks)
                report.er[k] += hits[k] / static_cast<double>(eligible) / static_cast<double>(targets.size());
        }
    }
    report.check_invariants();
    return report;
}

}  // namespace fedseq
