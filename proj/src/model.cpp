#include "fedseq/model.hpp"

#include <algorithm>
#include <cmath>

#include "fedseq/error.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

constexpr double kLayerNormEps = 1e-5;

void fill_uniform(Matrix& m, double bound, Rng& rng) {
    for (double& v : m.values()) v = rng.uniform(-bound, bound);
}

void check_ids(const ModelShape& shape, std::span<const ItemId> seq) {
    for (ItemId id : seq)
        if (id > shape.num_items)
            throw IndexError("item id " + std::to_string(id) + " outside [0, " + std::to_string(shape.num_items) + "]");
}

}  // namespace

Variant parse_variant(std::string_view name) {
    if (name == "causal") return Variant::causal;
    if (name == "bidirectional") return Variant::bidirectional;
    throw ConfigError("unknown model variant '" + std::string(name) + "' (expected causal, bidirectional)");
}

std::string_view to_string(Variant v) { return v == Variant::causal ? "causal" : "bidirectional"; }

std::vector<std::string> dense_tensor_names(Variant v) {
    std::vector<std::string> names{"pos_emb",   "attn_q",    "attn_k",    "attn_v",   "attn_o",
                                   "ffn_w1",    "ffn_b1",    "ffn_w2",    "ffn_b2",   "ln1_gamma",
                                   "ln1_beta",  "ln2_gamma", "ln2_beta"};
    if (v == Variant::bidirectional) names.emplace_back("mask_emb");
    return names;
}

ModelParams init_params(const ModelShape& shape, std::uint64_t seed) {
    if (shape.num_items == 0 || shape.dim == 0 || shape.ffn_dim == 0 || shape.max_len < 2)
        throw ConfigError("invalid model shape");
    Rng rng(derive_seed({seed, 0x1417}));
    const std::size_t d = shape.dim;
    const std::size_t f = shape.ffn_dim;
    const double emb_bound = 1.0 / std::sqrt(static_cast<double>(d));

    ModelParams p;
    p.shape = shape;
    p.item_emb = Matrix(shape.num_items + 1, d);
    fill_uniform(p.item_emb, emb_bound, rng);
    std::fill(p.item_emb.row(0).begin(), p.item_emb.row(0).end(), 0.0);

    p.dense.resize(shape.variant == Variant::bidirectional ? kMaskEmb + 1 : kMaskEmb);
    p[kPosEmb] = Matrix(shape.max_len, d);
    fill_uniform(p[kPosEmb], emb_bound, rng);
    const double attn_bound = std::sqrt(6.0 / static_cast<double>(2 * d));
    for (DenseTensor t : {kWq, kWk, kWv, kWo}) {
        p[t] = Matrix(d, d);
        fill_uniform(p[t], attn_bound, rng);
    }
    const double ffn_bound = std::sqrt(6.0 / static_cast<double>(d + f));
    p[kFfnW1] = Matrix(d, f);
    fill_uniform(p[kFfnW1], ffn_bound, rng);
    p[kFfnB1] = Matrix(1, f);
    p[kFfnW2] = Matrix(f, d);
    fill_uniform(p[kFfnW2], ffn_bound, rng);
    p[kFfnB2] = Matrix(1, d);
    p[kLn1Gamma] = Matrix(1, d, 1.0);
    p[kLn1Beta] = Matrix(1, d);
    p[kLn2Gamma] = Matrix(1, d, 1.0);
    p[kLn2Beta] = Matrix(1, d);
    if (shape.variant == Variant::bidirectional) {
        p[kMaskEmb] = Matrix(1, d);
        fill_uniform(p[kMaskEmb], emb_bound, rng);
    }
    return p;
}

GradientUpdate zero_update(const ModelParams& params) {
    GradientUpdate g;
    g.dense.reserve(params.dense.size());
    for (const Matrix& m : params.dense) g.dense.emplace_back(m.rows(), m.cols());
    return g;
}

Matrix densify_item_grad(const GradientUpdate& g, const ModelShape& shape) {
    Matrix out(shape.num_items + 1, shape.dim);
    for (const auto& [row, values] : g.item_emb) std::copy(values.begin(), values.end(), out.row(row).begin());
    return out;
}

void scale_update(GradientUpdate& g, double s) {
    for (auto& [row, values] : g.item_emb)
        for (double& v : values) v *= s;
    for (Matrix& m : g.dense)
        for (double& v : m.values()) v *= s;
}

std::vector<double> flatten(const GradientUpdate& g, const ModelShape& shape) {
    std::vector<double> out = densify_item_grad(g, shape).values();
    for (const Matrix& m : g.dense) out.insert(out.end(), m.values().begin(), m.values().end());
    return out;
}

BoundParams bind_params(Graph& g, const ModelParams& params, bool track_grad) {
    BoundParams bp;
    bp.item = g.table(params.item_emb, track_grad);
    bp.dense.reserve(params.dense.size());
    for (const Matrix& m : params.dense) bp.dense.push_back(track_grad ? g.leaf(m) : g.constant(m));
    return bp;
}

Var embed_tokens(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const Token> tokens) {
    const std::size_t L = tokens.size();
    if (L == 0) throw std::invalid_argument("embed_tokens: empty sequence");
    if (L > params.shape.max_len) throw IndexError("sequence longer than max_len");
    std::vector<std::size_t> ids(L);
    std::vector<bool> is_mask(L, false);
    bool any_mask = false;
    for (std::size_t i = 0; i < L; ++i) {
        if (tokens[i] == kMaskToken) {
            if (params.shape.variant != Variant::bidirectional)
                throw std::invalid_argument("mask token requires the bidirectional variant");
            is_mask[i] = any_mask = true;
            ids[i] = kPaddingItem;
        } else {
            if (tokens[i] > params.shape.num_items) throw IndexError("item id out of range");
            ids[i] = tokens[i];
        }
    }
    Var rows = g.gather(bp.item, ids);
    if (any_mask) rows = g.add(rows, g.place(bp.dense[kMaskEmb], is_mask));
    return g.add(rows, g.slice_rows(bp.dense[kPosEmb], 0, L));
}

Var encode(Graph& g, const ModelParams& params, const BoundParams& bp, Var embedded,
           std::span<const Token> tokens, double dropout, Rng* rng) {
    const std::size_t L = tokens.size();
    const bool causal = params.shape.variant == Variant::causal;
    std::vector<bool> allowed(L * L, false);
    for (std::size_t i = 0; i < L; ++i) {
        if (tokens[i] == kPaddingItem) continue;
        for (std::size_t j = 0; j < L; ++j)
            allowed[i * L + j] = tokens[j] != kPaddingItem && (!causal || j <= i);
    }
    auto drop = [&](Var v) { return rng ? g.dropout(v, dropout, *rng) : v; };
    const auto& w = bp.dense;

    Var q = g.matmul(embedded, w[kWq]);
    Var k = g.matmul(embedded, w[kWk]);
    Var v = g.matmul(embedded, w[kWv]);
    Var scores = g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(params.shape.dim)));
    Var attn = g.masked_softmax(scores, std::move(allowed));
    Var attn_out = drop(g.matmul(g.matmul(attn, v), w[kWo]));
    Var h1 = g.layer_norm(g.add(embedded, attn_out), w[kLn1Gamma], w[kLn1Beta], kLayerNormEps);

    Var inner = g.relu(g.add_row(g.matmul(h1, w[kFfnW1]), w[kFfnB1]));
    Var ffn_out = drop(g.add_row(g.matmul(inner, w[kFfnW2]), w[kFfnB2]));
    return g.layer_norm(g.add(h1, ffn_out), w[kLn2Gamma], w[kLn2Beta], kLayerNormEps);
}

std::vector<Token> prediction_tokens(const ModelShape& shape, std::span<const ItemId> seq) {
    if (seq.empty()) throw std::invalid_argument("prediction requires a non-empty sequence");
    const std::size_t room = shape.variant == Variant::causal ? shape.max_len : shape.max_len - 1;
    const std::size_t start = seq.size() > room ? seq.size() - room : 0;
    std::vector<Token> tokens(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end());
    if (shape.variant == Variant::bidirectional) tokens.push_back(kMaskToken);
    return tokens;
}

Var next_item_hidden(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                     double dropout, Rng* rng) {
    check_ids(params.shape, seq);
    const auto tokens = prediction_tokens(params.shape, seq);
    Var hidden = encode(g, params, bp, embed_tokens(g, params, bp, tokens), tokens, dropout, rng);
    return g.take_row(hidden, tokens.size() - 1);
}

Matrix embed(const ModelParams& params, std::span<const ItemId> seq) {
    check_ids(params.shape, seq);
    Graph g;
    BoundParams bp = bind_params(g, params, false);
    std::vector<Token> tokens(seq.begin(), seq.end());
    return g.value(embed_tokens(g, params, bp, tokens));
}

std::vector<double> forward_scores(const ModelParams& params, std::span<const ItemId> seq) {
    Graph g;
    BoundParams bp = bind_params(g, params, false);
    const Matrix& h = g.value(next_item_hidden(g, params, bp, seq, 0.0, nullptr));
    std::vector<double> scores(params.shape.num_items + 1);
    scores[0] = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < scores.size(); ++i) scores[i] = dot(h.row(0), params.item_emb.row(i));
    return scores;
}

ItemId sample_negative(Rng& rng, std::size_t num_items, const std::vector<bool>& excluded) {
    std::size_t blocked = 0;
    for (std::size_t i = 1; i <= num_items && i < excluded.size(); ++i) blocked += excluded[i] ? 1 : 0;
    if (blocked >= num_items) throw SamplingError("no non-interacted item available for negative sampling");
    while (true) {
        const ItemId c = rng.below(num_items) + 1;
        if (c >= excluded.size() || !excluded[c]) return c;
    }
}

Var build_bce_local_loss(Graph& g, const ModelParams& params, const BoundParams& bp, std::span<const ItemId> seq,
                         const TrainOptions& opts, Rng& rng) {
    if (seq.size() < 2) throw std::invalid_argument("local loss needs at least two items");
    check_ids(params.shape, seq);
    const std::size_t M = params.shape.num_items;
    std::vector<bool> interacted(M + 1, false);
    for (ItemId id : seq) interacted[id] = true;

    // (hidden row, positive item) pairs to score.
    std::vector<Token> tokens;
    std::vector<std::pair<std::size_t, ItemId>> positives;
    if (params.shape.variant == Variant::causal) {
        const std::size_t n_in = std::min(seq.size() - 1, params.shape.max_len);
        const std::size_t start = seq.size() - 1 - n_in;
        tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end() - 1);
        for (std::size_t t = 0; t < n_in; ++t)
            if (seq[start + t + 1] != kPaddingItem) positives.emplace_back(t, seq[start + t + 1]);
    } else {
        const std::size_t n = std::min(seq.size(), params.shape.max_len);
        const std::size_t start = seq.size() - n;
        tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end());
        for (std::size_t t = 0; t < n; ++t)
            if (tokens[t] != kPaddingItem && rng.bernoulli(opts.mask_prob)) positives.emplace_back(t, tokens[t]);
        if (positives.empty()) positives.emplace_back(n - 1, tokens[n - 1]);
        for (const auto& [pos, item] : positives) tokens[pos] = kMaskToken;
    }

    std::vector<std::size_t> rows;
    std::vector<std::size_t> ids;
    std::vector<double> labels;
    for (const auto& [pos, item] : positives) {
        rows.push_back(pos);
        ids.push_back(item);
        labels.push_back(1.0);
        for (std::size_t k = 0; k < opts.negatives; ++k) {
            rows.push_back(pos);
            ids.push_back(sample_negative(rng, M, interacted));
            labels.push_back(0.0);
        }
    }
    Var hidden = encode(g, params, bp, embed_tokens(g, params, bp, tokens), tokens, opts.dropout, &rng);
    return g.bce_with_logits(g.table_scores(hidden, bp.item, rows, ids), labels);
}

double bce_local_loss(const ModelParams& params, std::span<const ItemId> seq, const TrainOptions& opts, Rng& rng) {
    Graph g;
    BoundParams bp = bind_params(g, params, false);
    return g.scalar(build_bce_local_loss(g, params, bp, seq, opts, rng));
}

GradientResult grad_params(const ModelParams& params, const LossBuilder& loss_fn) {
    Graph g;
    BoundParams bp = bind_params(g, params, true);
    Var loss = loss_fn(g, bp);
    g.backward(loss);

    GradientResult out;
    out.loss = g.scalar(loss);
    const auto names = dense_tensor_names(params.shape.variant);
    for (const auto& [row, values] : g.table_grad(bp.item)) {
        if (!all_finite(values)) throw NumericError("non-finite gradient in " + std::string(kItemEmbName));
        out.grad.item_emb.emplace(row, values);
    }
    out.grad.dense.reserve(params.dense.size());
    for (std::size_t i = 0; i < params.dense.size(); ++i) {
        const Matrix& gm = g.grad(bp.dense[i]);
        if (gm.empty()) {
            out.grad.dense.emplace_back(params.dense[i].rows(), params.dense[i].cols());
            continue;
        }
        if (!all_finite(gm.values())) throw NumericError("non-finite gradient in " + names[i]);
        out.grad.dense.push_back(gm);
    }
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
    return out;
}

Matrix grad_wrt_input_embeddings(const ModelParams& params, std::span<const ItemId> seq, const Matrix& embedded,
                                 ItemId target) {
    if (target == kPaddingItem || target > params.shape.num_items) throw IndexError("target outside [1, M]");
    if (embedded.rows() != seq.size() || embedded.cols() != params.shape.dim)
        throw std::invalid_argument("embedded input does not match the sequence");
    check_ids(params.shape, seq);
    Graph g;
    BoundParams bp = bind_params(g, params, false);
    std::vector<Token> tokens(seq.begin(), seq.end());
    Var input = g.leaf(embedded);
    Var enc_in = input;
    if (params.shape.variant == Variant::bidirectional) {
        if (tokens.size() + 1 > params.shape.max_len) throw IndexError("sequence leaves no room for [MASK]");
        // The [MASK] row sits at position L; build it from the mask vector and that position row.
        Var mask_row = g.add(bp.dense[kMaskEmb], g.slice_rows(bp.dense[kPosEmb], tokens.size(), 1));
        enc_in = g.concat_rows(input, mask_row);
        tokens.push_back(kMaskToken);
    }
    Var hidden = encode(g, params, bp, enc_in, tokens, 0.0, nullptr);
    Var h = g.take_row(hidden, tokens.size() - 1);
    std::vector<std::size_t> rows(params.shape.num_items, 0);
    std::vector<std::size_t> ids(params.shape.num_items);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i + 1;
    Var loss = g.softmax_cross_entropy(g.table_scores(h, bp.item, rows, ids), target - 1);
    g.backward(loss);
    Matrix grad = g.grad(input);
    if (grad.empty()) grad = Matrix(embedded.rows(), embedded.cols());
    if (!all_finite(grad.values())) throw NumericError("non-finite input-embedding gradient");
    return grad;
}

}  // namespace fedseq
