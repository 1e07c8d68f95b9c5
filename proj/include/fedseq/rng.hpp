#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace fedseq {

/// Mixes a list of integers into one 64-bit seed (splitmix64 chaining).
/// Streams are keyed by tuples such as (seed, round, client, purpose) so
/// that results do not depend on execution order.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// xoshiro256** generator. Bounded draws are implemented here rather than
/// through <random> distributions so that streams are identical across
/// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform double in [0, 1).
    double uniform();
    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }

    /// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
    std::vector<std::uint64_t> sample_without_replacement(std::uint64_t n, std::uint64_t k);

private:
    std::uint64_t s_[4];
};

}  // namespace fedseq
