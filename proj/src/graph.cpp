#include "fedseq/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

double softplus(double x) {
    // log(1 + e^x) without overflow.
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double reg_norm(std::span<const double> u, double eps) { return std::sqrt(dot(u, u) + eps * eps); }

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b, double eps) {
    return dot(a, b) / (reg_norm(a, eps) * reg_norm(b, eps));
}

Var Graph::push(Matrix value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, {}});
    return Var{nodes_.size() - 1};
}

Var Graph::constant(Matrix value) { return push(std::move(value), false); }
Var Graph::leaf(Matrix value) { return push(std::move(value), true); }

TableRef Graph::table(const Matrix& values, bool track_grad) {
    tables_.push_back(Table{&values, track_grad, {}});
    return TableRef{tables_.size() - 1};
}

Matrix& Graph::grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
}

std::vector<double>& Graph::table_row_grad(TableRef t, std::size_t row) {
    auto& g = tables_[t.id].grad[row];
    if (g.empty()) g.assign(tables_[t.id].values->cols(), 0.0);
    return g;
}

void Graph::backward(Var root) {
    const Matrix& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
    for (auto& n : nodes_) n.grad = Matrix{};
    for (auto& t : tables_) t.grad.clear();
    grad_buffer(root)(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].backward && !nodes_[i].grad.empty()) nodes_[i].backward(*this);
    }
}

Var Graph::matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix C(A.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double aik = A(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j) C(i, j) += aik * B(k, j);
        }
    Var out = push(std::move(C), needs(a) || needs(b));
    if (needs(out)) {
        nodes_[out.id].backward = [a, b, out](Graph& g) {
            const Matrix& dC = g.grad(out);
            const Matrix& A = g.value(a);
            const Matrix& B = g.value(b);
            if (g.needs(a)) {
                Matrix& dA = g.grad_buffer(a);
                for (std::size_t i = 0; i < A.rows(); ++i)
                    for (std::size_t k = 0; k < A.cols(); ++k)
                        dA(i, k) += dot(dC.row(i), B.row(k));
            }
            if (g.needs(b)) {
                Matrix& dB = g.grad_buffer(b);
                for (std::size_t i = 0; i < A.rows(); ++i)
                    for (std::size_t k = 0; k < A.cols(); ++k) {
                        const double aik = A(i, k);
                        for (std::size_t j = 0; j < B.cols(); ++j) dB(k, j) += aik * dC(i, j);
                    }
            }
        };
    }
    return out;
}

Var Graph::matmul_nt(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Matrix C(A.rows(), B.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j) C(i, j) = dot(A.row(i), B.row(j));
    Var out = push(std::move(C), needs(a) || needs(b));
    if (needs(out)) {
        nodes_[out.id].backward = [a, b, out](Graph& g) {
            const Matrix& dC = g.grad(out);
            const Matrix& A = g.value(a);
            const Matrix& B = g.value(b);
            if (g.needs(a)) {
                Matrix& dA = g.grad_buffer(a);
                for (std::size_t i = 0; i < A.rows(); ++i)
                    for (std::size_t j = 0; j < B.rows(); ++j) {
                        const double d = dC(i, j);
                        for (std::size_t k = 0; k < A.cols(); ++k) dA(i, k) += d * B(j, k);
                    }
            }
            if (g.needs(b)) {
                Matrix& dB = g.grad_buffer(b);
                for (std::size_t i = 0; i < A.rows(); ++i)
                    for (std::size_t j = 0; j < B.rows(); ++j) {
                        const double d = dC(i, j);
                        for (std::size_t k = 0; k < A.cols(); ++k) dB(j, k) += d * A(i, k);
                    }
            }
        };
    }
    return out;
}

Var Graph::add(Var a, Var b) {
    check_same_shape(value(a), value(b), "add");
    Matrix C = value(a);
    const auto& bv = value(b).values();
    for (std::size_t i = 0; i < bv.size(); ++i) C.values()[i] += bv[i];
    Var out = push(std::move(C), needs(a) || needs(b));
    if (needs(out)) {
        nodes_[out.id].backward = [a, b, out](Graph& g) {
            for (Var v : {a, b}) {
                if (!g.needs(v)) continue;
                auto& dv = g.grad_buffer(v).values();
                const auto& dc = g.grad(out).values();
                for (std::size_t i = 0; i < dc.size(); ++i) dv[i] += dc[i];
            }
        };
    }
    return out;
}

Var Graph::add_row(Var a, Var row) {
    const Matrix& R = value(row);
    if (R.rows() != 1 || R.cols() != value(a).cols()) throw std::invalid_argument("add_row: shape mismatch");
    Matrix C = value(a);
    for (std::size_t i = 0; i < C.rows(); ++i)
        for (std::size_t j = 0; j < C.cols(); ++j) C(i, j) += R(0, j);
    Var out = push(std::move(C), needs(a) || needs(row));
    if (needs(out)) {
        nodes_[out.id].backward = [a, row, out](Graph& g) {
            const Matrix& dC = g.grad(out);
            if (g.needs(a)) {
                auto& da = g.grad_buffer(a).values();
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dC.values()[i];
            }
            if (g.needs(row)) {
                Matrix& dr = g.grad_buffer(row);
                for (std::size_t i = 0; i < dC.rows(); ++i)
                    for (std::size_t j = 0; j < dC.cols(); ++j) dr(0, j) += dC(i, j);
            }
        };
    }
    return out;
}

Var Graph::scale(Var a, double s) {
    Matrix C = value(a);
    for (double& v : C.values()) v *= s;
    Var out = push(std::move(C), needs(a));
    if (needs(out)) {
        nodes_[out.id].backward = [a, s, out](Graph& g) {
            auto& da = g.grad_buffer(a).values();
            const auto& dc = g.grad(out).values();
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += s * dc[i];
        };
    }
    return out;
}

Var Graph::relu(Var a) {
    Matrix C = value(a);
    for (double& v : C.values()) v = std::max(v, 0.0);
    Var out = push(std::move(C), needs(a));
    if (needs(out)) {
        nodes_[out.id].backward = [a, out](Graph& g) {
            auto& da = g.grad_buffer(a).values();
            const auto& x = g.value(a).values();
            const auto& dc = g.grad(out).values();
            for (std::size_t i = 0; i < dc.size(); ++i)
                if (x[i] > 0.0) da[i] += dc[i];
        };
    }
    return out;
}

Var Graph::dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(value(a).size());
    for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
    Matrix C = value(a);
    for (std::size_t i = 0; i < mask.size(); ++i) C.values()[i] *= mask[i];
    Var out = push(std::move(C), needs(a));
    if (needs(out)) {
        nodes_[out.id].backward = [a, out, mask = std::move(mask)](Graph& g) {
            auto& da = g.grad_buffer(a).values();
            const auto& dc = g.grad(out).values();
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += mask[i] * dc[i];
        };
    }
    return out;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Matrix& X = value(x);
    const Matrix& G = value(gamma);
    const Matrix& B = value(beta);
    const std::size_t n = X.cols();
    if (G.cols() != n || B.cols() != n) throw std::invalid_argument("layer_norm: shape mismatch");
    Matrix Y(X.rows(), n);
    Matrix xhat(X.rows(), n);
    std::vector<double> inv_std(X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        double mu = 0.0;
        for (double v : X.row(r)) mu += v;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double v : X.row(r)) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat(r, j) = (X(r, j) - mu) * inv_std[r];
            Y(r, j) = G(0, j) * xhat(r, j) + B(0, j);
        }
    }
    Var out = push(std::move(Y), needs(x) || needs(gamma) || needs(beta));
    if (needs(out)) {
        nodes_[out.id].backward = [x, gamma, beta, out, xhat = std::move(xhat),
                                   inv_std = std::move(inv_std)](Graph& g) {
            const Matrix& dY = g.grad(out);
            const Matrix& G = g.value(gamma);
            const std::size_t n = dY.cols();
            if (g.needs(gamma) || g.needs(beta)) {
                for (std::size_t r = 0; r < dY.rows(); ++r)
                    for (std::size_t j = 0; j < n; ++j) {
                        if (g.needs(gamma)) g.grad_buffer(gamma)(0, j) += dY(r, j) * xhat(r, j);
                        if (g.needs(beta)) g.grad_buffer(beta)(0, j) += dY(r, j);
                    }
            }
            if (g.needs(x)) {
                Matrix& dX = g.grad_buffer(x);
                std::vector<double> dxhat(n);
                for (std::size_t r = 0; r < dY.rows(); ++r) {
                    double mean_d = 0.0;
                    double mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = dY(r, j) * G(0, j);
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat(r, j);
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        dX(r, j) += inv_std[r] * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                }
            }
        };
    }
    return out;
}

Var Graph::masked_softmax(Var scores, std::vector<bool> allowed) {
    const Matrix& S = value(scores);
    if (allowed.size() != S.size()) throw std::invalid_argument("masked_softmax: mask size mismatch");
    Matrix P(S.rows(), S.cols());
    for (std::size_t r = 0; r < S.rows(); ++r) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < S.cols(); ++c)
            if (allowed[r * S.cols() + c]) mx = std::max(mx, S(r, c));
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t c = 0; c < S.cols(); ++c)
            if (allowed[r * S.cols() + c]) z += (P(r, c) = std::exp(S(r, c) - mx));
        for (std::size_t c = 0; c < S.cols(); ++c) P(r, c) /= z;
    }
    Var out = push(std::move(P), needs(scores));
    if (needs(out)) {
        nodes_[out.id].backward = [scores, out](Graph& g) {
            const Matrix& P = g.value(out);
            const Matrix& dP = g.grad(out);
            Matrix& dS = g.grad_buffer(scores);
            for (std::size_t r = 0; r < P.rows(); ++r) {
                const double inner = dot(P.row(r), dP.row(r));
                for (std::size_t c = 0; c < P.cols(); ++c) dS(r, c) += P(r, c) * (dP(r, c) - inner);
            }
        };
    }
    return out;
}

Var Graph::gather(TableRef table, std::span<const std::size_t> ids) {
    const Matrix& T = *tables_[table.id].values;
    Matrix R(ids.size(), T.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= T.rows()) throw std::out_of_range("gather: row id out of range");
        std::copy(T.row(ids[i]).begin(), T.row(ids[i]).end(), R.row(i).begin());
    }
    Var out = push(std::move(R), tables_[table.id].track);
    if (needs(out)) {
        std::vector<std::size_t> rows(ids.begin(), ids.end());
        nodes_[out.id].backward = [table, out, rows = std::move(rows)](Graph& g) {
            const Matrix& dR = g.grad(out);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i] == 0) continue;
                auto& gr = g.table_row_grad(table, rows[i]);
                for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += dR(i, j);
            }
        };
    }
    return out;
}

Var Graph::place(Var vec, const std::vector<bool>& flagged) {
    const Matrix& V = value(vec);
    if (V.rows() != 1) throw std::invalid_argument("place: expected a row vector");
    Matrix R(flagged.size(), V.cols());
    for (std::size_t i = 0; i < flagged.size(); ++i)
        if (flagged[i]) std::copy(V.row(0).begin(), V.row(0).end(), R.row(i).begin());
    Var out = push(std::move(R), needs(vec));
    if (needs(out)) {
        nodes_[out.id].backward = [vec, out, flagged](Graph& g) {
            const Matrix& dR = g.grad(out);
            Matrix& dv = g.grad_buffer(vec);
            for (std::size_t i = 0; i < flagged.size(); ++i)
                if (flagged[i])
                    for (std::size_t j = 0; j < dR.cols(); ++j) dv(0, j) += dR(i, j);
        };
    }
    return out;
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t count) {
    const Matrix& A = value(a);
    if (begin + count > A.rows()) throw std::out_of_range("slice_rows: range exceeds rows");
    Matrix R(count, A.cols());
    for (std::size_t i = 0; i < count; ++i)
        std::copy(A.row(begin + i).begin(), A.row(begin + i).end(), R.row(i).begin());
    Var out = push(std::move(R), needs(a));
    if (needs(out)) {
        nodes_[out.id].backward = [a, out, begin](Graph& g) {
            const Matrix& dR = g.grad(out);
            Matrix& dA = g.grad_buffer(a);
            for (std::size_t i = 0; i < dR.rows(); ++i)
                for (std::size_t j = 0; j < dR.cols(); ++j) dA(begin + i, j) += dR(i, j);
        };
    }
    return out;
}

Var Graph::concat_rows(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    if (A.cols() != B.cols()) throw std::invalid_argument("concat_rows: column mismatch");
    Matrix R(A.rows() + B.rows(), A.cols());
    std::copy(A.values().begin(), A.values().end(), R.values().begin());
    std::copy(B.values().begin(), B.values().end(), R.values().begin() + static_cast<std::ptrdiff_t>(A.size()));
    Var out = push(std::move(R), needs(a) || needs(b));
    if (needs(out)) {
        nodes_[out.id].backward = [a, b, out](Graph& g) {
            const auto& dR = g.grad(out).values();
            const std::size_t na = g.value(a).size();
            if (g.needs(a)) {
                auto& da = g.grad_buffer(a).values();
                for (std::size_t i = 0; i < na; ++i) da[i] += dR[i];
            }
            if (g.needs(b)) {
                auto& db = g.grad_buffer(b).values();
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += dR[na + i];
            }
        };
    }
    return out;
}

Var Graph::take_row(Var a, std::size_t r) { return slice_rows(a, r, 1); }

Var Graph::mean_rows(Var a) {
    const Matrix& A = value(a);
    if (A.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
    Matrix R(1, A.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) R(0, j) += A(i, j);
    const double inv = 1.0 / static_cast<double>(A.rows());
    for (double& v : R.values()) v *= inv;
    Var out = push(std::move(R), needs(a));
    if (needs(out)) {
        nodes_[out.id].backward = [a, out, inv](Graph& g) {
            const Matrix& dR = g.grad(out);
            Matrix& dA = g.grad_buffer(a);
            for (std::size_t i = 0; i < dA.rows(); ++i)
                for (std::size_t j = 0; j < dA.cols(); ++j) dA(i, j) += inv * dR(0, j);
        };
    }
    return out;
}

Var Graph::table_scores(Var h, TableRef table, std::span<const std::size_t> rows,
                        std::span<const std::size_t> ids) {
    if (rows.size() != ids.size()) throw std::invalid_argument("table_scores: rows/ids mismatch");
    const Matrix& H = value(h);
    const Matrix& T = *tables_[table.id].values;
    if (H.cols() != T.cols()) throw std::invalid_argument("table_scores: width mismatch");
    Matrix S(1, ids.size());
    for (std::size_t p = 0; p < ids.size(); ++p) {
        if (ids[p] >= T.rows() || rows[p] >= H.rows()) throw std::out_of_range("table_scores: index out of range");
        S(0, p) = dot(H.row(rows[p]), T.row(ids[p]));
    }
    Var out = push(std::move(S), needs(h) || tables_[table.id].track);
    if (needs(out)) {
        std::vector<std::size_t> r(rows.begin(), rows.end());
        std::vector<std::size_t> c(ids.begin(), ids.end());
        nodes_[out.id].backward = [h, table, out, r = std::move(r), c = std::move(c)](Graph& g) {
            const Matrix& dS = g.grad(out);
            const Matrix& H = g.value(h);
            const Matrix& T = *g.tables_[table.id].values;
            const bool dh = g.needs(h);
            const bool dt = g.tables_[table.id].track;
            for (std::size_t p = 0; p < c.size(); ++p) {
                const double d = dS(0, p);
                if (d == 0.0) continue;
                if (dh) {
                    Matrix& dH = g.grad_buffer(h);
                    for (std::size_t j = 0; j < H.cols(); ++j) dH(r[p], j) += d * T(c[p], j);
                }
                if (dt && c[p] != 0) {
                    auto& gr = g.table_row_grad(table, c[p]);
                    for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += d * H(r[p], j);
                }
            }
        };
    }
    return out;
}

Var Graph::bce_with_logits(Var scores, std::span<const double> labels) {
    const Matrix& S = value(scores);
    if (S.rows() != 1 || S.cols() != labels.size() || labels.empty())
        throw std::invalid_argument("bce_with_logits: label count mismatch");
    const double inv = 1.0 / static_cast<double>(labels.size());
    double loss = 0.0;
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const double s = S(0, p);
        loss += labels[p] * softplus(-s) + (1.0 - labels[p]) * softplus(s);
    }
    Var out = push(Matrix(1, 1, loss * inv), needs(scores));
    if (needs(out)) {
        std::vector<double> y(labels.begin(), labels.end());
        nodes_[out.id].backward = [scores, out, inv, y = std::move(y)](Graph& g) {
            const double d = g.grad(out)(0, 0);
            const Matrix& S = g.value(scores);
            Matrix& dS = g.grad_buffer(scores);
            for (std::size_t p = 0; p < y.size(); ++p) dS(0, p) += d * inv * (sigmoid(S(0, p)) - y[p]);
        };
    }
    return out;
}

Var Graph::softmax_cross_entropy(Var scores, std::size_t target) {
    const Matrix& S = value(scores);
    if (S.rows() != 1 || target >= S.cols()) throw std::invalid_argument("softmax_cross_entropy: bad target");
    double mx = -INFINITY;
    for (double v : S.values()) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : S.values()) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    Var out = push(Matrix(1, 1, lse - S(0, target)), needs(scores));
    if (needs(out)) {
        nodes_[out.id].backward = [scores, out, target, lse](Graph& g) {
            const double d = g.grad(out)(0, 0);
            const Matrix& S = g.value(scores);
            Matrix& dS = g.grad_buffer(scores);
            for (std::size_t p = 0; p < S.cols(); ++p)
                dS(0, p) += d * (std::exp(S(0, p) - lse) - (p == target ? 1.0 : 0.0));
        };
    }
    return out;
}

Var Graph::contrastive(Var anchor, Var positive, Var negatives, double eps) {
    const Matrix& A = value(anchor);
    const Matrix& P = value(positive);
    const Matrix& N = value(negatives);
    if (A.rows() != 1 || P.rows() != 1 || A.cols() != P.cols() || N.cols() != A.cols())
        throw std::invalid_argument("contrastive: shape mismatch");
    const std::size_t k = N.rows();
    // sims[0] is the positive pair, sims[1..k] the negatives.
    std::vector<double> sims(k + 1);
    sims[0] = cosine(A.row(0), P.row(0), eps);
    for (std::size_t i = 0; i < k; ++i) sims[i + 1] = cosine(A.row(0), N.row(i), eps);
    const double mx = *std::max_element(sims.begin(), sims.end());
    double z = 0.0;
    for (double s : sims) z += std::exp(s - mx);
    const double lse = mx + std::log(z);
    Var out = push(Matrix(1, 1, lse - sims[0]), needs(anchor) || needs(positive) || needs(negatives));
    if (needs(out)) {
        nodes_[out.id].backward = [anchor, positive, negatives, out, eps, lse,
                                   sims = std::move(sims)](Graph& g) {
            const double d = g.grad(out)(0, 0);
            const Matrix& A = g.value(anchor);
            const Matrix& P = g.value(positive);
            const Matrix& N = g.value(negatives);
            const std::size_t dim = A.cols();
            const double na = reg_norm(A.row(0), eps);
            std::vector<double> dA(dim, 0.0);
            // d cos(u,v)/du = v/(|u||v|) - cos * u/|u|^2
            auto accumulate = [&](std::span<const double> v, double cos_uv, double coeff, Matrix* dV,
                                  std::size_t vrow) {
                const double nv = reg_norm(v, eps);
                for (std::size_t j = 0; j < dim; ++j) {
                    dA[j] += coeff * (v[j] / (na * nv) - cos_uv * A(0, j) / (na * na));
                    if (dV) (*dV)(vrow, j) += coeff * (A(0, j) / (na * nv) - cos_uv * v[j] / (nv * nv));
                }
            };
            const double q0 = std::exp(sims[0] - lse);
            accumulate(P.row(0), sims[0], d * (q0 - 1.0), g.needs(positive) ? &g.grad_buffer(positive) : nullptr, 0);
            Matrix* dN = g.needs(negatives) ? &g.grad_buffer(negatives) : nullptr;
            for (std::size_t i = 0; i < N.rows(); ++i)
                accumulate(N.row(i), sims[i + 1], d * std::exp(sims[i + 1] - lse), dN, i);
            if (g.needs(anchor)) {
                Matrix& gA = g.grad_buffer(anchor);
                for (std::size_t j = 0; j < dim; ++j) gA(0, j) += dA[j];
            }
        };
    }
    return out;
}

}  // namespace fedseq
