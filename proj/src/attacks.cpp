#include "fedseq/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedseq/error.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

bool contains(std::span<const ItemId> seq, ItemId item) { return std::find(seq.begin(), seq.end(), item) != seq.end(); }

/// Up to n distinct items outside `blocked`, in draw order.
std::vector<ItemId> sample_distinct(std::size_t num_items, const std::vector<bool>& blocked, std::size_t n, Rng& rng) {
    std::vector<ItemId> pool;
    for (ItemId i = 1; i <= num_items; ++i)
        if (!blocked[i]) pool.push_back(i);
    if (pool.empty()) throw SamplingError("no non-interacted item available");
    std::vector<ItemId> out;
    for (std::uint64_t idx : rng.sample_without_replacement(pool.size(), n)) out.push_back(pool[idx]);
    return out;
}

GradientUpdate scaled(GradientResult r, double s) {
    if (s != 1.0) scale_update(r.grad, s);
    return std::move(r.grad);
}

}  // namespace

AttackMethod parse_attack_method(std::string_view name) {
    static constexpr std::pair<std::string_view, AttackMethod> kNames[] = {
        {"none", AttackMethod::none}, {"ra", AttackMethod::ra},       {"eb", AttackMethod::eb},
        {"ara", AttackMethod::ara},   {"darts", AttackMethod::darts}, {"c_fsr", AttackMethod::c_fsr},
        {"s_fsr", AttackMethod::s_fsr}};
    for (const auto& [n, m] : kNames)
        if (n == name) return m;
    throw ConfigError("unknown attack method '" + std::string(name) +
                      "' (expected none, ra, eb, ara, darts, c_fsr, s_fsr)");
}

std::string_view to_string(AttackMethod m) {
    switch (m) {
        case AttackMethod::none: return "none";
        case AttackMethod::ra: return "ra";
        case AttackMethod::eb: return "eb";
        case AttackMethod::ara: return "ara";
        case AttackMethod::darts: return "darts";
        case AttackMethod::c_fsr: return "c_fsr";
        case AttackMethod::s_fsr: return "s_fsr";
    }
    return "?";
}

void AttackConfig::validate() const {
    if (method != AttackMethod::none) {
        if (target_items.empty()) throw ConfigError("attack.targets must name at least one item");
        if (!(malicious_fraction > 0.0 && malicious_fraction < 1.0))
            throw ConfigError("attack.malicious_fraction must lie in (0, 1)");
    }
    if (search_time == 0) throw ConfigError("attack.search_time must be at least 1");
    if (contrastive_negatives == 0) throw ConfigError("attack.contrastive_negatives must be at least 1");
    if (!(similarity_threshold >= -1.0 && similarity_threshold <= 1.0))
        throw ConfigError("attack.tau must lie in [-1, 1]");
    if (!(attack_scale > 0.0)) throw ConfigError("attack.scale must be positive");
    for (ItemId t : target_items)
        if (t == kPaddingItem) throw ConfigError("target item 0 is the padding item");
}

bool MaliciousAssignment::contains(UserId u) const { return std::binary_search(users.begin(), users.end(), u); }

std::size_t MaliciousAssignment::index_of(UserId u) const {
    auto it = std::lower_bound(users.begin(), users.end(), u);
    if (it == users.end() || *it != u) throw std::out_of_range("user is not malicious");
    return static_cast<std::size_t>(it - users.begin());
}

MaliciousAssignment assign_malicious(std::size_t num_users, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("malicious fraction must lie in (0, 1)");
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_users)));
    if (count == 0)
        throw ConfigError("malicious fraction " + std::to_string(fraction) + " of " + std::to_string(num_users) +
                          " users rounds to zero clients");
    Rng rng(derive_seed({seed, 0x3a1}));
    MaliciousAssignment out;
    for (std::uint64_t idx : rng.sample_without_replacement(num_users, count)) out.users.push_back(idx + 1);
    std::sort(out.users.begin(), out.users.end());
    return out;
}

SubstitutionResult substitute_detailed(const ModelParams& params, std::span<const ItemId> seq, ItemId target,
                                       std::size_t search_time, double similarity_threshold) {
    const std::size_t M = params.shape.num_items;
    if (seq.size() < 2) throw std::invalid_argument("substitution needs at least two items");
    if (target == kPaddingItem || target > M) throw IndexError("target outside [1, M]");

    // Work on the window the model actually reads for next-item prediction.
    const std::size_t room =
        params.shape.variant == Variant::causal ? params.shape.max_len : params.shape.max_len - 1;
    const std::size_t offset = seq.size() > room ? seq.size() - room : 0;
    const auto window = seq.subspan(offset);

    const Matrix embedded = embed(params, window);
    const Matrix grad = grad_wrt_input_embeddings(params, window, embedded, target);

    std::size_t pos = window.size();
    double best_norm = -1.0;
    for (std::size_t i = 0; i < window.size(); ++i) {
        if (window[i] == kPaddingItem) continue;
        const double n = norm(grad.row(i));
        if (n > best_norm) {
            best_norm = n;
            pos = i;
        }
    }
    if (pos == window.size()) throw std::invalid_argument("substitution: sequence has no real item");

    SubstitutionResult out;
    out.position = offset + pos;
    out.original = window[pos];

    // Fast-gradient-sign step on the item's embedding, away from the loss.
    const auto orig = params.item_emb.row(out.original);
    std::vector<double> perturbed(orig.begin(), orig.end());
    for (std::size_t j = 0; j < perturbed.size(); ++j) perturbed[j] -= sign(grad(pos, j));

    struct Candidate {
        ItemId item;
        double sim;
    };
    std::vector<Candidate> constrained;
    std::vector<Candidate> all;
    for (ItemId c = 1; c <= M; ++c) {
        if (c == target || c == out.original) continue;
        const auto emb = params.item_emb.row(c);
        const Candidate cand{c, cosine(perturbed, emb, kCosineEps)};
        all.push_back(cand);
        if (cosine(orig, emb, kCosineEps) >= similarity_threshold) constrained.push_back(cand);
    }
    if (all.empty()) throw SamplingError("substitution: no candidate item");
    out.constraint_relaxed = constrained.empty();
    auto& pool = constrained.empty() ? all : constrained;
    std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) { return a.sim > b.sim; });
    if (pool.size() > search_time) pool.resize(search_time);

    std::vector<ItemId> trial(seq.begin(), seq.end());
    out.target_score = -INFINITY;
    // Candidates are visited in descending similarity and only a strictly
    // higher score replaces the incumbent, so ties favour similarity.
    for (const Candidate& c : pool) {
        trial[out.position] = c.item;
        const double s = forward_scores(params, trial)[target];
        if (s > out.target_score) {
            out.target_score = s;
            out.replacement = c.item;
        }
    }
    if (out.replacement == kPaddingItem) out.replacement = pool.front().item;  // every score was NaN
    out.seq.assign(seq.begin(), seq.end());
    out.seq[out.position] = out.replacement;
    return out;
}

std::vector<ItemId> substitution(const ModelParams& params, std::span<const ItemId> seq, ItemId target,
                                 std::size_t search_time, double similarity_threshold) {
    return substitute_detailed(params, seq, target, search_time, similarity_threshold).seq;
}

double contrastive_loss(std::span<const double> anchor, std::span<const double> positive,
                        std::span<const std::vector<double>> negatives) {
    Graph g;
    Matrix a(1, anchor.size());
    std::copy(anchor.begin(), anchor.end(), a.values().begin());
    Matrix p(1, positive.size());
    std::copy(positive.begin(), positive.end(), p.values().begin());
    Matrix n(negatives.size(), anchor.size());
    for (std::size_t i = 0; i < negatives.size(); ++i) {
        if (negatives[i].size() != anchor.size()) throw std::invalid_argument("contrastive_loss: width mismatch");
        std::copy(negatives[i].begin(), negatives[i].end(), n.row(i).begin());
    }
    return g.scalar(g.contrastive(g.constant(a), g.constant(p), g.constant(n), kCosineEps));
}

Var build_boost_loss(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                     ItemId target, std::span<const ItemId> negatives) {
    Var h = next_item_hidden(g, params, bp, seq, 0.0, nullptr);
    std::vector<std::size_t> ids{target};
    std::vector<double> labels{1.0};
    for (ItemId n : negatives) {
        ids.push_back(n);
        labels.push_back(0.0);
    }
    const std::vector<std::size_t> rows(ids.size(), 0);
    return g.bce_with_logits(g.table_scores(h, bp.item, rows, ids), labels);
}

DartsPlan plan_darts(const ModelParams& params, const ClientDataset& client, ItemId target,
                     const AttackConfig& cfg, Rng& rng) {
    DartsPlan plan;
    const bool substitute = cfg.method == AttackMethod::darts || cfg.method == AttackMethod::s_fsr;
    plan.contrast = cfg.method == AttackMethod::darts || cfg.method == AttackMethod::c_fsr;
    if (!substitute && !plan.contrast) throw std::invalid_argument("plan_darts: method is not darts, c_fsr or s_fsr");
    const std::size_t M = params.shape.num_items;

    plan.seq = client.train_seq;
    // A history that already holds the target is used as-is.
    if (substitute && !contains(plan.seq, target))
        plan.seq = substitution(params, plan.seq, target, cfg.search_time, cfg.similarity_threshold);

    if (plan.contrast) {
        std::vector<bool> blocked(M + 1, false);
        blocked[kPaddingItem] = blocked[target] = true;
        for (ItemId i : client.train_seq) blocked[i] = true;
        for (ItemId i : plan.seq) blocked[i] = true;
        plan.negatives = sample_distinct(M, blocked, cfg.contrastive_negatives, rng);
        for (ItemId i : plan.seq)
            if (i != kPaddingItem) plan.history.push_back(i);
    }
    return plan;
}

Var build_darts_loss(Graph& g, const ModelParams& params, const BoundParams& bp, const DartsPlan& plan,
                     ItemId target) {
    Var total = build_boost_loss(g, params, bp, plan.seq, target, {});
    if (plan.contrast) {
        const std::vector<std::size_t> anchor_id{target};
        Var anchor = g.gather(bp.item, anchor_id);
        Var positive = g.mean_rows(g.gather(bp.item, plan.history));
        Var negs = g.gather(bp.item, plan.negatives);
        total = g.add(total, g.contrastive(anchor, positive, negs, kCosineEps));
    }
    return total;
}

GradientUpdate darts_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                              const AttackConfig& cfg, Rng& rng) {
    const DartsPlan plan = plan_darts(params, client, target, cfg, rng);
    auto loss = [&](Graph& g, const BoundParams& bp) { return build_darts_loss(g, params, bp, plan, target); };
    return scaled(grad_params(params, loss), cfg.attack_scale);
}

GradientUpdate ra_gradient(const ModelParams& params, std::size_t fake_seq_len, ItemId target,
                           const TrainOptions& local, Rng& rng) {
    if (fake_seq_len < 2) throw std::invalid_argument("fake sequence needs at least two items");
    const std::size_t M = params.shape.num_items;
    if (M < 2) throw SamplingError("RA needs at least one non-target item");
    std::vector<ItemId> fake;
    fake.reserve(fake_seq_len);
    while (fake.size() + 1 < fake_seq_len) {
        const ItemId c = rng.below(M) + 1;
        if (c != target) fake.push_back(c);
    }
    fake.insert(fake.begin() + static_cast<std::ptrdiff_t>(rng.below(fake.size() + 1)), target);
    auto loss = [&](Graph& g, const BoundParams& bp) { return build_bce_local_loss(g, params, bp, fake, local, rng); };
    return grad_params(params, loss).grad;
}

GradientUpdate eb_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                           const AttackConfig& cfg) {
    auto loss = [&](Graph& g, const BoundParams& bp) {
        return build_boost_loss(g, params, bp, client.train_seq, target, {});
    };
    return scaled(grad_params(params, loss), cfg.attack_scale);
}

GradientUpdate ara_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                            const AttackConfig& cfg, Rng& rng) {
    const std::size_t M = params.shape.num_items;
    std::vector<bool> blocked(M + 1, false);
    blocked[target] = true;
    for (ItemId i : client.train_seq) blocked[i] = true;
    std::vector<ItemId> negatives;
    for (std::size_t k = 0; k < cfg.ara_negatives; ++k) negatives.push_back(sample_negative(rng, M, blocked));
    auto loss = [&](Graph& g, const BoundParams& bp) {
        return build_boost_loss(g, params, bp, client.train_seq, target, negatives);
    };
    return scaled(grad_params(params, loss), cfg.attack_scale);
}

GradientUpdate attack_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                               const AttackConfig& cfg, const TrainOptions& local, Rng& rng) {
    switch (cfg.method) {
        case AttackMethod::ra: {
            const std::size_t len = cfg.fake_seq_len ? cfg.fake_seq_len : std::max<std::size_t>(2, client.train_seq.size());
            return ra_gradient(params, len, target, local, rng);
        }
        case AttackMethod::eb: return eb_gradient(params, client, target, cfg);
        case AttackMethod::ara: return ara_gradient(params, client, target, cfg, rng);
        case AttackMethod::darts:
        case AttackMethod::c_fsr:
        case AttackMethod::s_fsr: return darts_gradient(params, client, target, cfg, rng);
        case AttackMethod::none: break;
    }
    throw std::invalid_argument("attack_gradient called without an attack method");
}

}  // namespace fedseq
