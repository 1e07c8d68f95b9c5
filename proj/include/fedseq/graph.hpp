#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedseq/matrix.hpp"

namespace fedseq {

class Rng;

/// Handle to a node in a Graph.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

/// Handle to an embedding table registered in a Graph. Tables are read by
/// row and accumulate row-sparse gradients, which keeps per-client
/// gradients proportional to the rows a client actually touched.
struct TableRef {
    std::size_t id = static_cast<std::size_t>(-1);
};

/// Tape-based reverse-mode differentiation over small dense matrices.
///
/// Every op records its forward value; ops whose inputs require gradients
/// also record a backward closure. backward() replays closures in reverse
/// creation order, which is a valid topological order for a tape.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// A value that does not receive gradients.
    Var constant(Matrix value);
    /// A leaf that receives gradients.
    Var leaf(Matrix value);
    /// Registers a table by reference; the table must outlive the graph.
    TableRef table(const Matrix& values, bool track_grad);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    /// Gradient of the last backward() target. Empty when none flowed.
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
    const SparseRows& table_grad(TableRef t) const { return tables_[t.id].grad; }
    double scalar(Var v) const { return nodes_[v.id].value(0, 0); }

    /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
    void backward(Var root);

    // -- linear algebra ---------------------------------------------------
    Var matmul(Var a, Var b);      // a b
    Var matmul_nt(Var a, Var b);   // a b^T
    Var add(Var a, Var b);
    Var add_row(Var a, Var row);   // broadcast a 1 x n row over every row of a
    Var scale(Var a, double s);
    Var relu(Var a);
    /// Inverted dropout: kept entries are scaled by 1/(1-p).
    Var dropout(Var a, double p, Rng& rng);
    Var layer_norm(Var x, Var gamma, Var beta, double eps);
    /// Row-wise softmax over entries where allowed[r * cols + c] is true.
    /// Rows with no allowed entry produce zeros.
    Var masked_softmax(Var scores, std::vector<bool> allowed);

    // -- row plumbing -----------------------------------------------------
    /// Rows of a table; id 0 yields the table's row 0 but never receives gradient.
    Var gather(TableRef table, std::span<const std::size_t> ids);
    /// rows x d matrix holding `vec` at every flagged row and zeros elsewhere.
    Var place(Var vec, const std::vector<bool>& flagged);
    Var slice_rows(Var a, std::size_t begin, std::size_t count);
    Var concat_rows(Var a, Var b);
    Var take_row(Var a, std::size_t r);
    Var mean_rows(Var a);

    /// 1 x P vector: entry p is h[rows[p]] . table[ids[p]].
    Var table_scores(Var h, TableRef table, std::span<const std::size_t> rows,
                     std::span<const std::size_t> ids);

    // -- losses (all return 1 x 1) ------------------------------------------
    /// -mean(y log sigmoid(s) + (1-y) log(1 - sigmoid(s))).
    Var bce_with_logits(Var scores, std::span<const double> labels);
    /// -log softmax(scores)[target] over a 1 x n row.
    Var softmax_cross_entropy(Var scores, std::size_t target);
    /// -log(e^{cos(a,p)} / (e^{cos(a,p)} + sum_i e^{cos(a,n_i)})), with
    /// norms regularised as sqrt(|u|^2 + eps^2).
    Var contrastive(Var anchor, Var positive, Var negatives, double eps);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        std::function<void(Graph&)> backward;
    };
    struct Table {
        const Matrix* values;
        bool track;
        SparseRows grad;
    };

    Var push(Matrix value, bool requires_grad);
    bool needs(Var v) const { return nodes_[v.id].requires_grad; }
    /// Gradient buffer of v, zero-initialised on first access.
    Matrix& grad_buffer(Var v);
    std::vector<double>& table_row_grad(TableRef t, std::size_t row);

    std::vector<Node> nodes_;
    std::vector<Table> tables_;
};

/// Cosine similarity with norms regularised as sqrt(|u|^2 + eps^2).
double cosine(std::span<const double> a, std::span<const double> b, double eps = 1e-8);

}  // namespace fedseq
