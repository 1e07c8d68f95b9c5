#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedseq/attacks.hpp"
#include "fedseq/data.hpp"
#include "fedseq/defense.hpp"
#include "fedseq/eval.hpp"
#include "fedseq/model.hpp"

namespace fedseq {

class Rng;

struct FederationConfig {
    std::size_t rounds = 30;
    std::size_t clients_per_round = 256;
    double server_lr = 0.01;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    TrainOptions local;
    /// Evaluate every this many rounds (and always after the last); 0 only
    /// evaluates after the last round.
    std::size_t eval_every = 0;

    void validate() const;
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<UserId> selected_clients;
    std::size_t num_malicious_selected = 0;
    double train_loss_mean = 0.0;
    std::optional<MetricsReport> metrics;

    friend bool operator==(const RoundReport&, const RoundReport&) = default;
};

/// One JSON object on a single line, no trailing newline.
std::string to_jsonl(const RoundReport& report);
RoundReport round_report_from_json(std::string_view line);

/// Uniform sample without replacement of min(clients_per_round, N) users,
/// seeded by (seed, round), returned in ascending order.
std::vector<UserId> select_clients(std::size_t round, const FederationConfig& cfg, std::span<const UserId> population);

/// Benign local gradient; only the gradient leaves the client.
GradientResult client_step(const ClientDataset& client, const ModelParams& params, const TrainOptions& local,
                           Rng& rng);

/// FedAvg weighted mean or mixed-RFA, per the defense rule.
GradientUpdate aggregate(std::span<const GradientUpdate> grads, std::span<const double> weights,
                         const DefenseConfig& defense);

/// params <- (1 - lr * wd) * params - lr * agg, padding row re-zeroed.
ModelParams apply_update(const ModelParams& params, const GradientUpdate& agg, const FederationConfig& cfg);

struct TrainingResult {
    ModelParams params;
    std::vector<RoundReport> reports;
    MaliciousAssignment malicious;
};

struct TrainingSetup {
    ModelShape shape;
    FederationConfig federation;
    AttackConfig attack;
    DefenseConfig defense;
    EvalConfig eval;
    /// Items whose exposure is reported; defaults to attack.target_items.
    std::vector<ItemId> eval_targets;
};

using RoundObserver = std::function<void(const RoundReport&)>;

/// Runs the federated protocol; fully determined by the setup and seeds.
TrainingResult run_training(std::span<const ClientDataset> clients, const TrainingSetup& setup,
                            const RoundObserver& observer = {});

}  // namespace fedseq
