#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/model.hpp"

namespace fedseq {

class Rng;

enum class AttackMethod { none, ra, eb, ara, darts, c_fsr, s_fsr };

AttackMethod parse_attack_method(std::string_view name);
std::string_view to_string(AttackMethod m);

struct AttackConfig {
    AttackMethod method = AttackMethod::none;
    std::vector<ItemId> target_items;
    double malicious_fraction = 0.001;
    /// Candidates tried by the substitution search.
    std::size_t search_time = 9;
    /// Minimum cosine similarity between the replaced item and its substitute.
    double similarity_threshold = 0.5;
    std::size_t contrastive_negatives = 100;
    /// Multiplier on uploaded malicious gradients.
    double attack_scale = 1.0;
    /// Sampled negatives in the A-ra boosting loss.
    std::size_t ara_negatives = 1;
    /// Length of RA fake sequences; 0 reuses the malicious user's own length.
    std::size_t fake_seq_len = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct MaliciousAssignment {
    /// Ascending user ids.
    std::vector<UserId> users;

    bool contains(UserId u) const;
    /// Position of u in `users`; used for round-robin target assignment.
    std::size_t index_of(UserId u) const;
};

/// round(m * N) users drawn without replacement from [1, N].
MaliciousAssignment assign_malicious(std::size_t num_users, double fraction, std::uint64_t seed);

struct SubstitutionResult {
    std::vector<ItemId> seq;
    std::size_t position = 0;
    ItemId original = kPaddingItem;
    ItemId replacement = kPaddingItem;
    double target_score = 0.0;
    /// True when the similarity constraint removed every candidate.
    bool constraint_relaxed = false;
};

/// Replaces the single most gradient-sensitive item of `seq` by the
/// candidate, among the `search_time` items closest to its sign-perturbed
/// embedding, that maximises the target's score.
SubstitutionResult substitute_detailed(const ModelParams& params, std::span<const ItemId> seq, ItemId target,
                                       std::size_t search_time, double similarity_threshold);
std::vector<ItemId> substitution(const ModelParams& params, std::span<const ItemId> seq, ItemId target,
                                 std::size_t search_time, double similarity_threshold);

inline constexpr double kCosineEps = 1e-8;

/// Softmax cross-entropy over cosine similarities with the positive at index 0.
double contrastive_loss(std::span<const double> anchor, std::span<const double> positive,
                        std::span<const std::vector<double>> negatives);

/// -mean log-likelihood of `target` as the next item (label 1) and of each
/// negative (label 0), read at the prediction position of `seq` in eval mode.
Var build_boost_loss(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                     ItemId target, std::span<const ItemId> negatives);

/// Inputs of the DARTS objective after the random and discrete choices.
struct DartsPlan {
    /// Client sequence after substitution (unchanged for c_fsr).
    std::vector<ItemId> seq;
    bool contrast = false;
    /// Items whose mean embedding is the contrastive positive.
    std::vector<ItemId> history;
    std::vector<ItemId> negatives;
};

DartsPlan plan_darts(const ModelParams& params, const ClientDataset& client, ItemId target, const AttackConfig& cfg,
                     Rng& rng);

/// Boosting BCE on plan.seq plus, unless disabled, the contrastive loss.
Var build_darts_loss(Graph& g, const ModelParams& params, const BoundParams& bp, const DartsPlan& plan,
                     ItemId target);

/// DARTS and its ablations (method darts, c_fsr or s_fsr): substitution
/// (skipped by c_fsr), target-boosting BCE, contrastive pull of the
/// target embedding toward the history mean (skipped by s_fsr).
GradientUpdate darts_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                              const AttackConfig& cfg, Rng& rng);

/// Benign local gradient on a fake sequence of random items containing the target.
GradientUpdate ra_gradient(const ModelParams& params, std::size_t fake_seq_len, ItemId target,
                           const TrainOptions& local, Rng& rng);

/// Target-boosting BCE on the client's unmodified sequence.
GradientUpdate eb_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                           const AttackConfig& cfg);

/// EB plus `cfg.ara_negatives` sampled negatives in the same BCE.
GradientUpdate ara_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                            const AttackConfig& cfg, Rng& rng);

/// Dispatches on cfg.method.
GradientUpdate attack_gradient(const ModelParams& params, const ClientDataset& client, ItemId target,
                               const AttackConfig& cfg, const TrainOptions& local, Rng& rng);

}  // namespace fedseq
