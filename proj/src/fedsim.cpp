#include "fedseq/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "fedseq/error.hpp"
#include "fedseq/parallel.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

using nlohmann::json;

enum StreamPurpose : std::uint64_t { kSelect = 0x5e1, kBenign = 0xb3, kMalicious = 0xa7 };

json metrics_json(const MetricsReport& m) {
    auto keyed = [](const std::map<std::size_t, double>& values) {
        json o = json::object();
        for (const auto& [k, v] : values) o[std::to_string(k)] = v;
        return o;
    };
    return json{{"hr", keyed(m.hr)},
                {"ndcg", keyed(m.ndcg)},
                {"er", keyed(m.er)},
                {"eligible_users_er", m.eligible_users_er},
                {"evaluated_users", m.evaluated_users}};
}

MetricsReport metrics_from_json(const json& j) {
    auto keyed = [](const json& o) {
        std::map<std::size_t, double> out;
        for (const auto& [k, v] : o.items()) out[std::stoul(k)] = v.get<double>();
        return out;
    };
    MetricsReport m;
    m.hr = keyed(j.at("hr"));
    m.ndcg = keyed(j.at("ndcg"));
    m.er = keyed(j.at("er"));
    m.eligible_users_er = j.at("eligible_users_er").get<std::size_t>();
    m.evaluated_users = j.at("evaluated_users").get<std::size_t>();
    return m;
}

}  // namespace

void FederationConfig::validate() const {
    if (rounds == 0) throw ConfigError("fed.rounds must be at least 1");
    if (clients_per_round == 0) throw ConfigError("fed.clients_per_round must be at least 1");
    if (!(server_lr > 0.0)) throw ConfigError("fed.server_lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("fed.weight_decay must be non-negative");
    if (!(local.dropout >= 0.0 && local.dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
    if (!(local.mask_prob > 0.0 && local.mask_prob <= 1.0)) throw ConfigError("model.mask_prob must lie in (0, 1]");
}

std::string to_jsonl(const RoundReport& r) {
    json j{{"round", r.round},
           {"selected_clients", r.selected_clients},
           {"num_malicious_selected", r.num_malicious_selected},
           {"train_loss_mean", r.train_loss_mean}};
    if (r.metrics) j["metrics"] = metrics_json(*r.metrics);
    return j.dump();
}

RoundReport round_report_from_json(std::string_view line) {
    const json j = json::parse(line);
    RoundReport r;
    r.round = j.at("round").get<std::size_t>();
    r.selected_clients = j.at("selected_clients").get<std::vector<UserId>>();
    r.num_malicious_selected = j.at("num_malicious_selected").get<std::size_t>();
    r.train_loss_mean = j.at("train_loss_mean").get<double>();
    if (j.contains("metrics")) r.metrics = metrics_from_json(j.at("metrics"));
    return r;
}

std::vector<UserId> select_clients(std::size_t round, const FederationConfig& cfg, std::span<const UserId> population) {
    if (population.empty()) throw std::invalid_argument("select_clients: empty population");
    std::vector<UserId> out;
    if (cfg.clients_per_round >= population.size()) {
        out.assign(population.begin(), population.end());
    } else {
        Rng rng(derive_seed({cfg.seed, round, kSelect}));
        for (std::uint64_t idx : rng.sample_without_replacement(population.size(), cfg.clients_per_round))
            out.push_back(population[idx]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

GradientResult client_step(const ClientDataset& client, const ModelParams& params, const TrainOptions& local,
                           Rng& rng) {
    return grad_params(params, [&](Graph& g, const BoundParams& bp) {
        return build_bce_local_loss(g, params, bp, client.train_seq, local, rng);
    });
}

GradientUpdate aggregate(std::span<const GradientUpdate> grads, std::span<const double> weights,
                         const DefenseConfig& defense) {
    if (grads.empty() || grads.size() != weights.size())
        throw AggregationError("aggregate needs one weight per gradient and at least one gradient");
    switch (defense.rule) {
        case AggregationRule::fedavg: return weighted_mean(grads, weights);
        case AggregationRule::mixed_rfa: return mixed_rfa(grads, weights, defense);
    }
    throw AggregationError("unknown aggregation rule");
}

ModelParams apply_update(const ModelParams& params, const GradientUpdate& agg, const FederationConfig& cfg) {
    if (agg.dense.size() != params.dense.size()) throw AggregationError("update does not match model tensors");
    ModelParams out = params;
    const double decay = 1.0 - cfg.server_lr * cfg.weight_decay;
    const double lr = cfg.server_lr;
    if (decay != 1.0)
        for (double& v : out.item_emb.values()) v *= decay;
    for (const auto& [row, values] : agg.item_emb) {
        if (row >= out.item_emb.rows() || values.size() != out.item_emb.cols())
            throw AggregationError("embedding update row out of range");
        auto dst = out.item_emb.row(row);
        for (std::size_t j = 0; j < values.size(); ++j) dst[j] -= lr * values[j];
    }
    std::fill(out.item_emb.row(0).begin(), out.item_emb.row(0).end(), 0.0);
    if (!all_finite(out.item_emb.values())) throw NumericError("non-finite value in item_emb after update");

    const auto names = dense_tensor_names(params.shape.variant);
    for (std::size_t t = 0; t < out.dense.size(); ++t) {
        auto& p = out.dense[t].values();
        const auto& g = agg.dense[t].values();
        if (p.size() != g.size()) throw AggregationError("update shape mismatch in " + names[t]);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = decay * p[j] - lr * g[j];
        if (!all_finite(p)) throw NumericError("non-finite value in " + names[t] + " after update");
    }
    return out;
}

TrainingResult run_training(std::span<const ClientDataset> clients, const TrainingSetup& setup,
                            const RoundObserver& observer) {
    const FederationConfig& fed = setup.federation;
    fed.validate();
    setup.attack.validate();
    setup.defense.validate();
    if (clients.empty()) throw ConfigError("no clients");

    std::vector<UserId> population;
    std::map<UserId, std::size_t> slot_of;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        population.push_back(clients[i].user);
        slot_of[clients[i].user] = i;
    }
    std::sort(population.begin(), population.end());

    TrainingResult result;
    const bool attacking = setup.attack.method != AttackMethod::none;
    if (attacking) {
        // Malicious users are drawn over population ranks so non-dense ids work too.
        const auto ranks = assign_malicious(population.size(), setup.attack.malicious_fraction, setup.attack.seed);
        for (UserId r : ranks.users) result.malicious.users.push_back(population[r - 1]);
        std::sort(result.malicious.users.begin(), result.malicious.users.end());
    }
    const auto& targets = setup.eval_targets.empty() ? setup.attack.target_items : setup.eval_targets;

    result.params = init_params(setup.shape, fed.seed);
    for (std::size_t round = 1; round <= fed.rounds; ++round) {
        RoundReport report;
        report.round = round;
        report.selected_clients = select_clients(round, fed, population);
        const std::size_t n = report.selected_clients.size();

        std::vector<GradientUpdate> grads(n);
        std::vector<double> losses(n, 0.0);
        std::vector<char> malicious(n, 0);
        const ModelParams& params = result.params;
        parallel_for(n, [&](std::size_t i) {
            const UserId user = report.selected_clients[i];
            const ClientDataset& client = clients[slot_of.at(user)];
            if (attacking && result.malicious.contains(user)) {
                malicious[i] = 1;
                const auto& tg = setup.attack.target_items;
                const ItemId target = tg[result.malicious.index_of(user) % tg.size()];
                Rng rng(derive_seed({fed.seed, round, user, kMalicious}));
                grads[i] = attack_gradient(params, client, target, setup.attack, fed.local, rng);
            } else {
                Rng rng(derive_seed({fed.seed, round, user, kBenign}));
                GradientResult r = client_step(client, params, fed.local, rng);
                losses[i] = r.loss;
                grads[i] = std::move(r.grad);
            }
        });

        double loss_sum = 0.0;
        std::size_t benign = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (malicious[i]) {
                ++report.num_malicious_selected;
            } else {
                loss_sum += losses[i];
                ++benign;
            }
        }
        report.train_loss_mean = benign ? loss_sum / static_cast<double>(benign) : 0.0;

        const std::vector<double> weights(n, 1.0);
        result.params = apply_update(result.params, aggregate(grads, weights, setup.defense), fed);

        const bool eval_round = round == fed.rounds || (fed.eval_every > 0 && round % fed.eval_every == 0);
        if (eval_round) report.metrics = evaluate(result.params, clients, targets, setup.eval);
        if (observer) observer(report);
        result.reports.push_back(std::move(report));
    }
    return result;
}

}  // namespace fedseq
