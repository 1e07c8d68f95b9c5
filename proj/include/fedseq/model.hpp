#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/graph.hpp"
#include "fedseq/matrix.hpp"

namespace fedseq {

class Rng;

enum class Variant { causal, bidirectional };

Variant parse_variant(std::string_view name);
std::string_view to_string(Variant v);

struct ModelShape {
    std::size_t num_items = 0;  // M; the item table has M + 1 rows
    std::size_t max_len = 200;
    std::size_t dim = 64;
    std::size_t ffn_dim = 256;
    Variant variant = Variant::causal;

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Indices into ModelParams::dense and GradientUpdate::dense.
enum DenseTensor : std::size_t {
    kPosEmb = 0,
    kWq,
    kWk,
    kWv,
    kWo,
    kFfnW1,
    kFfnB1,
    kFfnW2,
    kFfnB2,
    kLn1Gamma,
    kLn1Beta,
    kLn2Gamma,
    kLn2Beta,
    kMaskEmb,  // bidirectional variant only
};

/// Names of the dense tensors of a variant, in DenseTensor order.
std::vector<std::string> dense_tensor_names(Variant v);
inline constexpr std::string_view kItemEmbName = "item_emb";

/// Global federated state: a one-block transformer over tied item embeddings.
struct ModelParams {
    ModelShape shape;
    /// (M + 1) x d; row 0 is the padding item and is always zero.
    Matrix item_emb;
    std::vector<Matrix> dense;

    const Matrix& operator[](DenseTensor t) const { return dense[t]; }
    Matrix& operator[](DenseTensor t) { return dense[t]; }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams init_params(const ModelShape& shape, std::uint64_t seed);

/// Parameter-shaped delta; item embedding rows are stored sparsely.
struct GradientUpdate {
    SparseRows item_emb;
    std::vector<Matrix> dense;

    friend bool operator==(const GradientUpdate&, const GradientUpdate&) = default;
};

GradientUpdate zero_update(const ModelParams& params);
/// (M + 1) x d matrix of the item-embedding gradient.
Matrix densify_item_grad(const GradientUpdate& g, const ModelShape& shape);
void scale_update(GradientUpdate& g, double s);
/// Flattened view with the item table densified; order is item_emb then dense.
std::vector<double> flatten(const GradientUpdate& g, const ModelShape& shape);

/// Token fed to the encoder: an item id, or the [MASK] token.
using Token = std::size_t;
inline constexpr Token kMaskToken = std::numeric_limits<Token>::max();

/// Training-time knobs that do not change parameter shapes.
struct TrainOptions {
    double dropout = 0.1;
    std::size_t negatives = 1;
    double mask_prob = 0.15;
};

/// Graph handles for one ModelParams.
struct BoundParams {
    TableRef item;
    std::vector<Var> dense;
};

BoundParams bind_params(Graph& g, const ModelParams& params, bool track_grad);

/// Encoder input: embedded rows for tokens (item row + position row; the
/// [MASK] row for mask tokens). Padding ids embed to their position row only.
Var embed_tokens(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const Token> tokens);

/// One transformer block. Returns L x d hidden states. Pass an Rng to
/// enable dropout (training mode).
Var encode(Graph& g, const ModelParams& params, const BoundParams& bp, Var embedded,
           std::span<const Token> tokens, double dropout, Rng* rng);

/// Tokens used for next-item prediction from `seq`; the prediction is read
/// at the last position.
std::vector<Token> prediction_tokens(const ModelShape& shape, std::span<const ItemId> seq);

/// Hidden state (1 x d) used to score the item following `seq`.
Var next_item_hidden(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                     double dropout, Rng* rng);

/// Row i = item_emb[seq[i]] + pos_emb[i].
Matrix embed(const ModelParams& params, std::span<const ItemId> seq);

/// Eval-mode scores over all M + 1 ids; score[0] is -infinity.
std::vector<double> forward_scores(const ModelParams& params, std::span<const ItemId> seq);

/// Draws an item in [1, M] not flagged in `excluded`. Throws SamplingError
/// when every item is excluded.
ItemId sample_negative(Rng& rng, std::size_t num_items, const std::vector<bool>& excluded);

/// Local BCE objective on one sequence (next-item for causal, cloze for
/// bidirectional) with `opts.negatives` sampled negatives per positive.
Var build_bce_local_loss(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                         const TrainOptions& opts, Rng& rng);
double bce_local_loss(const ModelParams& params, std::span<const ItemId> seq, const TrainOptions& opts, Rng& rng);

using LossBuilder = std::function<Var(Graph&, const BoundParams&)>;

struct GradientResult {
    double loss = 0.0;
    GradientUpdate grad;
};

/// Exact gradient of the scalar built by `loss_fn`. Throws NumericError
/// naming the first non-finite tensor.
GradientResult grad_params(const ModelParams& params, const LossBuilder& loss_fn);

/// Gradient of the softmax cross-entropy toward `target` (over items 1..M)
/// with respect to the embedded input rows of `seq`.
Matrix grad_wrt_input_embeddings(const ModelParams& params, std::span<const ItemId> seq, const Matrix& embedded,
                                 ItemId target);

}  // namespace fedseq
