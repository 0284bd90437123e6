#pragma once

// Reverse-mode differentiation over a closed set of matrix primitives.
//
// Every value on the tape is a matrix (rank-1 parameters are viewed as a
// single row). A node records which primitive produced it; `backward`
// dispatches on that tag, so only primitives listed in `Op` can appear in a
// differentiated graph.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "numerics.hpp"
#include "tensor.hpp"

namespace ctta {

class Tape;

/// Handle to a node on a particular tape.
class Var {
public:
    Var() = default;

    std::size_t index() const noexcept { return index_; }
    bool valid() const noexcept { return owner_ != nullptr; }

private:
    friend class Tape;
    Var(const Tape* owner, std::size_t index) : owner_(owner), index_(index) {}

    const Tape* owner_ = nullptr;
    std::size_t index_ = 0;
};

enum class Op {
    constant,
    parameter,
    matmul_nt,        // a[B x k] * w[n x k]^T
    add,
    sub,
    mul,
    scale,
    relu,
    batch_norm,       // normalize with current-batch statistics, then gamma/beta
    fixed_norm,       // normalize with supplied mean/var, then gamma/beta
    log_softmax_rows,
    softmax_rows,
    row_entropy,      // [B x C] logits -> [B x 1] entropy of softmax
    pick_columns,     // [B x C] -> [B x 1] at per-row column index
    gather_rows,
    row_sum_squares,
    row_dot,
    mean_all,
    sum_all,
};

class UnregisteredPrimitiveError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Per-feature statistics of a batch-norm call, as computed on the forward pass.
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;  // biased
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf excluded from differentiation (stop-gradient).
    Var constant(Tensor value) { return push(Op::constant, as_matrix(std::move(value)), {}, false); }

    Var scalar(double v) { return constant(Tensor::matrix(1, 1, v)); }

    /// Leaf whose gradient is tracked.
    Var parameter(Tensor value) { return push(Op::parameter, as_matrix(std::move(value)), {}, true); }

    /// Copy of `x` cut off from the graph.
    Var detach(Var x) { return constant(value(x)); }

    const Tensor& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    double scalar_value(Var v) const {
        const Tensor& t = value(v);
        if (t.size() != 1) throw std::invalid_argument("Tape::scalar_value: not a scalar " + shape_string(t));
        return t[0];
    }

    Var matmul_nt(Var a, Var w) {
        const Tensor& A = value(a);
        const Tensor& W = value(w);
        if (A.cols() != W.cols())
            throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_string(A) + " vs " +
                                        shape_string(W));
        const std::size_t B = A.rows(), K = A.cols(), N = W.rows();
        Tensor out = Tensor::matrix(B, N);
        for (std::size_t b = 0; b < B; ++b) {
            const double* ar = &A.storage()[b * K];
            for (std::size_t n = 0; n < N; ++n) {
                const double* wr = &W.storage()[n * K];
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += ar[k] * wr[k];
                out(b, n) = s;
            }
        }
        return push(Op::matmul_nt, std::move(out), {a, w});
    }

    Var add(Var a, Var b) { return elementwise(Op::add, a, b, [](double x, double y) { return x + y; }); }
    Var sub(Var a, Var b) { return elementwise(Op::sub, a, b, [](double x, double y) { return x - y; }); }
    Var mul(Var a, Var b) { return elementwise(Op::mul, a, b, [](double x, double y) { return x * y; }); }

    Var scale(Var a, double s) {
        Tensor out = value(a);
        for (double& x : out.data()) x *= s;
        const Var v = push(Op::scale, std::move(out), {a});
        nodes_[v.index_].scalar = s;
        return v;
    }

    Var relu(Var a) {
        Tensor out = value(a);
        for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
        return push(Op::relu, std::move(out), {a});
    }

    /// Batch normalization with the statistics of `x` itself (biased variance).
    Var batch_norm(Var x, Var gamma, Var beta, double eps, BatchStats* stats_out = nullptr) {
        const Tensor& X = value(x);
        const std::size_t B = X.rows(), F = X.cols();
        if (B == 0) throw std::invalid_argument("batch_norm: empty batch");
        check_feature_vector(gamma, F, "batch_norm gamma");
        check_feature_vector(beta, F, "batch_norm beta");
        std::vector<double> mean(F, 0.0), var(F, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) mean[f] += X(b, f);
        for (double& m : mean) m /= static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) {
                const double d = X(b, f) - mean[f];
                var[f] += d * d;
            }
        for (double& v : var) v /= static_cast<double>(B);

        Tensor inv_std = Tensor::matrix(1, F);
        for (std::size_t f = 0; f < F; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + eps);
        Tensor xhat = Tensor::matrix(B, F);
        Tensor out = Tensor::matrix(B, F);
        const Tensor& G = value(gamma);
        const Tensor& Be = value(beta);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) {
                xhat(b, f) = (X(b, f) - mean[f]) * inv_std[f];
                out(b, f) = G[f] * xhat(b, f) + Be[f];
            }
        if (stats_out) *stats_out = BatchStats{mean, var};
        const Var v = push(Op::batch_norm, std::move(out), {x, gamma, beta});
        nodes_[v.index_].cache_a = std::move(xhat);
        nodes_[v.index_].cache_b = std::move(inv_std);
        return v;
    }

    /// Normalization with externally supplied (constant) statistics.
    Var fixed_norm(Var x, Var gamma, Var beta, std::span<const double> mean, std::span<const double> var,
                   double eps) {
        const Tensor& X = value(x);
        const std::size_t B = X.rows(), F = X.cols();
        check_feature_vector(gamma, F, "fixed_norm gamma");
        check_feature_vector(beta, F, "fixed_norm beta");
        if (mean.size() != F || var.size() != F) throw std::invalid_argument("fixed_norm: statistics size mismatch");
        Tensor inv_std = Tensor::matrix(1, F);
        for (std::size_t f = 0; f < F; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + eps);
        Tensor xhat = Tensor::matrix(B, F);
        Tensor out = Tensor::matrix(B, F);
        const Tensor& G = value(gamma);
        const Tensor& Be = value(beta);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f) {
                xhat(b, f) = (X(b, f) - mean[f]) * inv_std[f];
                out(b, f) = G[f] * xhat(b, f) + Be[f];
            }
        const Var v = push(Op::fixed_norm, std::move(out), {x, gamma, beta});
        nodes_[v.index_].cache_a = std::move(xhat);
        nodes_[v.index_].cache_b = std::move(inv_std);
        return v;
    }

    Var log_softmax_rows(Var a) {
        const Tensor& Z = value(a);
        Tensor out = Z;
        for (std::size_t r = 0; r < Z.rows(); ++r) {
            const auto ls = log_softmax(Z.row(r));
            std::copy(ls.begin(), ls.end(), out.row(r).begin());
        }
        return push(Op::log_softmax_rows, std::move(out), {a});
    }

    Var softmax_rows(Var a) { return push(Op::softmax_rows, ctta::softmax_rows(value(a)), {a}); }

    Var row_entropy(Var logits) {
        const Tensor& Z = value(logits);
        Tensor out = Tensor::matrix(Z.rows(), 1);
        for (std::size_t r = 0; r < Z.rows(); ++r) out[r] = entropy(Z.row(r));
        return push(Op::row_entropy, std::move(out), {logits});
    }

    Var pick_columns(Var a, std::vector<std::size_t> columns) {
        const Tensor& A = value(a);
        if (columns.size() != A.rows()) throw std::invalid_argument("pick_columns: one column per row required");
        Tensor out = Tensor::matrix(A.rows(), 1);
        for (std::size_t r = 0; r < A.rows(); ++r) {
            if (columns[r] >= A.cols()) throw std::out_of_range("pick_columns: column out of range");
            out[r] = A(r, columns[r]);
        }
        const Var v = push(Op::pick_columns, std::move(out), {a});
        nodes_[v.index_].indices = std::move(columns);
        return v;
    }

    Var gather_rows(Var a, std::vector<std::size_t> rows) {
        Tensor out = value(a).select_rows(rows);
        const Var v = push(Op::gather_rows, std::move(out), {a});
        nodes_[v.index_].indices = std::move(rows);
        return v;
    }

    Var row_sum_squares(Var a) {
        const Tensor& A = value(a);
        Tensor out = Tensor::matrix(A.rows(), 1);
        for (std::size_t r = 0; r < A.rows(); ++r) out[r] = dot(A.row(r), A.row(r));
        return push(Op::row_sum_squares, std::move(out), {a});
    }

    Var row_dot(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& Bt = value(b);
        require_same_shape(A, Bt, "row_dot");
        Tensor out = Tensor::matrix(A.rows(), 1);
        for (std::size_t r = 0; r < A.rows(); ++r) out[r] = dot(A.row(r), Bt.row(r));
        return push(Op::row_dot, std::move(out), {a, b});
    }

    Var mean_all(Var a) {
        const Tensor& A = value(a);
        if (A.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
        double s = 0.0;
        for (double x : A.data()) s += x;
        return push(Op::mean_all, Tensor::matrix(1, 1, s / static_cast<double>(A.size())), {a});
    }

    Var sum_all(Var a) {
        double s = 0.0;
        for (double x : value(a).data()) s += x;
        return push(Op::sum_all, Tensor::matrix(1, 1, s), {a});
    }

    /// Accumulates d(root)/d(node) for every node that requires it.
    void backward(Var root) {
        const Node& r = node(root);
        if (r.value.size() != 1) throw std::invalid_argument("Tape::backward: root must be a scalar");
        for (auto& n : nodes_) n.grad = Tensor();
        grad_ref(root.index_)[0] = 1.0;
        for (std::size_t i = root.index_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            propagate(n);
        }
        backward_done_ = true;
    }

    /// Gradient of the last `backward` root w.r.t. `v`; zeros if unreached.
    Tensor grad(Var v) const {
        const Node& n = node(v);
        if (!backward_done_) throw std::logic_error("Tape::grad: backward has not been run");
        if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
        return n.grad;
    }

private:
    struct Node {
        Op op = Op::constant;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        double scalar = 0.0;
        std::vector<std::size_t> indices;
        Tensor cache_a;
        Tensor cache_b;
    };

    static Tensor as_matrix(Tensor t) {
        if (t.rank() == 2) return t;
        const std::size_t r = t.rows(), c = t.cols();
        return Tensor({r, c}, std::move(t.storage()));
    }

    const Node& node(Var v) const {
        if (v.owner_ != this) throw std::invalid_argument("Tape: variable belongs to a different tape");
        return nodes_[v.index_];
    }

    Var push(Op op, Tensor value, std::initializer_list<Var> inputs, bool leaf_requires_grad = false) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.requires_grad = leaf_requires_grad;
        for (Var in : inputs) {
            const Node& src = node(in);
            n.inputs.push_back(in.index_);
            n.requires_grad = n.requires_grad || src.requires_grad;
        }
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    template <class F>
    Var elementwise(Op op, Var a, Var b, F f) {
        const Tensor& A = value(a);
        const Tensor& Bt = value(b);
        require_same_shape(A, Bt, "elementwise op");
        Tensor out = A;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], Bt[i]);
        return push(op, std::move(out), {a, b});
    }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
        if (!a.same_shape(b))
            throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                                        shape_string(b));
    }

    void check_feature_vector(Var v, std::size_t f, const char* what) const {
        if (value(v).size() != f) throw std::invalid_argument(std::string(what) + ": size mismatch");
    }

    Tensor& grad_ref(std::size_t i) {
        Node& n = nodes_[i];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
        return n.grad;
    }

    bool wants(std::size_t i) const { return nodes_[i].requires_grad; }

    void propagate(const Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
        case Op::constant:
        case Op::parameter:
            return;
        case Op::matmul_nt: {
            const std::size_t ia = n.inputs[0], iw = n.inputs[1];
            const Tensor& A = nodes_[ia].value;
            const Tensor& W = nodes_[iw].value;
            const std::size_t B = A.rows(), K = A.cols(), N = W.rows();
            if (wants(ia)) {
                Tensor& ga = grad_ref(ia);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t nn = 0; nn < N; ++nn) {
                        const double gv = g(b, nn);
                        if (gv == 0.0) continue;
                        const double* wr = &W.storage()[nn * K];
                        double* gr = &ga.storage()[b * K];
                        for (std::size_t k = 0; k < K; ++k) gr[k] += gv * wr[k];
                    }
            }
            if (wants(iw)) {
                Tensor& gw = grad_ref(iw);
                for (std::size_t b = 0; b < B; ++b) {
                    const double* ar = &A.storage()[b * K];
                    for (std::size_t nn = 0; nn < N; ++nn) {
                        const double gv = g(b, nn);
                        if (gv == 0.0) continue;
                        double* gr = &gw.storage()[nn * K];
                        for (std::size_t k = 0; k < K; ++k) gr[k] += gv * ar[k];
                    }
                }
            }
            return;
        }
        case Op::add:
        case Op::sub: {
            const double sign = n.op == Op::add ? 1.0 : -1.0;
            if (wants(n.inputs[0])) {
                Tensor& ga = grad_ref(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants(n.inputs[1])) {
                Tensor& gb = grad_ref(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
            }
            return;
        }
        case Op::mul: {
            const Tensor& A = nodes_[n.inputs[0]].value;
            const Tensor& Bv = nodes_[n.inputs[1]].value;
            if (wants(n.inputs[0])) {
                Tensor& ga = grad_ref(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
            }
            if (wants(n.inputs[1])) {
                Tensor& gb = grad_ref(n.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
            }
            return;
        }
        case Op::scale: {
            Tensor& ga = grad_ref(n.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
            return;
        }
        case Op::relu: {
            Tensor& ga = grad_ref(n.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (n.value[i] > 0.0) ga[i] += g[i];
            return;
        }
        case Op::batch_norm:
        case Op::fixed_norm: {
            const Tensor& xhat = n.cache_a;
            const Tensor& inv_std = n.cache_b;
            const Tensor& G = nodes_[n.inputs[1]].value;
            const std::size_t B = xhat.rows(), F = xhat.cols();
            if (wants(n.inputs[1])) {
                Tensor& gg = grad_ref(n.inputs[1]);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t f = 0; f < F; ++f) gg[f] += g(b, f) * xhat(b, f);
            }
            if (wants(n.inputs[2])) {
                Tensor& gbeta = grad_ref(n.inputs[2]);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t f = 0; f < F; ++f) gbeta[f] += g(b, f);
            }
            if (!wants(n.inputs[0])) return;
            Tensor& gx = grad_ref(n.inputs[0]);
            if (n.op == Op::fixed_norm) {
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t f = 0; f < F; ++f) gx(b, f) += g(b, f) * G[f] * inv_std[f];
                return;
            }
            const double inv_b = 1.0 / static_cast<double>(B);
            for (std::size_t f = 0; f < F; ++f) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const double dxhat = g(b, f) * G[f];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat(b, f);
                }
                for (std::size_t b = 0; b < B; ++b) {
                    const double dxhat = g(b, f) * G[f];
                    gx(b, f) += inv_std[f] * (dxhat - inv_b * sum_dxhat - inv_b * xhat(b, f) * sum_dxhat_xhat);
                }
            }
            return;
        }
        case Op::log_softmax_rows: {
            Tensor& ga = grad_ref(n.inputs[0]);
            const std::size_t R = n.value.rows(), C = n.value.cols();
            for (std::size_t r = 0; r < R; ++r) {
                double sum_g = 0.0;
                for (std::size_t c = 0; c < C; ++c) sum_g += g(r, c);
                for (std::size_t c = 0; c < C; ++c) ga(r, c) += g(r, c) - std::exp(n.value(r, c)) * sum_g;
            }
            return;
        }
        case Op::softmax_rows: {
            Tensor& ga = grad_ref(n.inputs[0]);
            const std::size_t R = n.value.rows(), C = n.value.cols();
            for (std::size_t r = 0; r < R; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < C; ++c) s += g(r, c) * n.value(r, c);
                for (std::size_t c = 0; c < C; ++c) ga(r, c) += n.value(r, c) * (g(r, c) - s);
            }
            return;
        }
        case Op::row_entropy: {
            // dH/dz_j = -p_j (log p_j + H)
            const Tensor& Z = nodes_[n.inputs[0]].value;
            Tensor& ga = grad_ref(n.inputs[0]);
            for (std::size_t r = 0; r < Z.rows(); ++r) {
                const auto lp = log_softmax(Z.row(r));
                const double h = n.value[r];
                for (std::size_t c = 0; c < Z.cols(); ++c) ga(r, c) += -g[r] * std::exp(lp[c]) * (lp[c] + h);
            }
            return;
        }
        case Op::pick_columns: {
            Tensor& ga = grad_ref(n.inputs[0]);
            for (std::size_t r = 0; r < n.indices.size(); ++r) ga(r, n.indices[r]) += g[r];
            return;
        }
        case Op::gather_rows: {
            Tensor& ga = grad_ref(n.inputs[0]);
            const std::size_t C = n.value.cols();
            for (std::size_t r = 0; r < n.indices.size(); ++r)
                for (std::size_t c = 0; c < C; ++c) ga(n.indices[r], c) += g(r, c);
            return;
        }
        case Op::row_sum_squares: {
            const Tensor& A = nodes_[n.inputs[0]].value;
            Tensor& ga = grad_ref(n.inputs[0]);
            for (std::size_t r = 0; r < A.rows(); ++r)
                for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += 2.0 * g[r] * A(r, c);
            return;
        }
        case Op::row_dot: {
            const Tensor& A = nodes_[n.inputs[0]].value;
            const Tensor& Bv = nodes_[n.inputs[1]].value;
            if (wants(n.inputs[0])) {
                Tensor& ga = grad_ref(n.inputs[0]);
                for (std::size_t r = 0; r < A.rows(); ++r)
                    for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += g[r] * Bv(r, c);
            }
            if (wants(n.inputs[1])) {
                Tensor& gb = grad_ref(n.inputs[1]);
                for (std::size_t r = 0; r < A.rows(); ++r)
                    for (std::size_t c = 0; c < A.cols(); ++c) gb(r, c) += g[r] * A(r, c);
            }
            return;
        }
        case Op::mean_all:
        case Op::sum_all: {
            Tensor& ga = grad_ref(n.inputs[0]);
            const double k = n.op == Op::mean_all ? g[0] / static_cast<double>(ga.size()) : g[0];
            for (double& x : ga.data()) x += k;
            return;
        }
        }
        throw UnregisteredPrimitiveError("Tape::backward: unregistered primitive in graph");
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

/// Result of differentiating a scalar loss.
struct ValueAndGrad {
    double value = 0.0;
    std::vector<Tensor> grads;  // one per parameter, same shape as the parameter
};

/// Evaluates `loss(tape, param_vars)` and returns its gradient w.r.t. `params`.
///
/// Parameters are copied onto a fresh tape; anything the loss function adds
/// with `Tape::constant` or `Tape::detach` receives no gradient.
template <class LossFn>
ValueAndGrad value_and_grad(LossFn&& loss, std::span<const Tensor> params) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    const Var root = std::invoke(loss, tape, std::span<const Var>(vars));
    ValueAndGrad out;
    out.value = tape.scalar_value(root);
    tape.backward(root);
    out.grads.reserve(vars.size());
    for (std::size_t i = 0; i < vars.size(); ++i) {
        Tensor g = tape.grad(vars[i]);
        out.grads.push_back(Tensor(params[i].shape(), std::move(g.storage())));
    }
    return out;
}

}  // namespace ctta
