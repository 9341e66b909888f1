/*
   Copyright 2026 The fmint-sde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include "fmint/common.hpp"
#include "fmint/rng.hpp"

namespace fmint {

/// Dense rank-2 tensor. Vectors are 1 x n rows, scalars 1 x 1.
template <class T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Additive masks use this in place of -inf.
inline constexpr double kMaskSentinel = -1e30;

template <class T>
inline bool is_masked(T v) {
    return v <= static_cast<T>(kMaskSentinel / 2);
}

template <class T>
std::string shape_of(const Tensor<T>& t) {
    return shape_str(static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols()));
}

/// A trainable tensor that outlives tapes. Gradients accumulate across
/// backward passes until zero_grad().
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

    void zero_grad() { grad = Tensor<T>::Zero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

template <class T>
class Tape;

/// Handle to a node recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

/// Records operations in execution order; backward runs them in reverse.
/// One tape per forward pass, single-threaded.
template <class T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        std::function<void()> backward;
    };

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false); }

    Var<T> leaf(Tensor<T> v, bool requires_grad = true) { return push(std::move(v), requires_grad); }

    Var<T> param(Parameter<T>& p) {
        Var<T> out = push(p.value, true);
        nodes_[out.id].param = &p;
        return out;
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient of a leaf after backward; empty when the node takes no gradient.
    const Tensor<T>& grad(Var<T> v) const { return nodes_.at(v.id).grad; }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Reverse sweep from a 1 x 1 node. Parameter gradients are added into
    /// Parameter::grad. A tape can be swept once.
    void backward(Var<T> loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
        if (consumed_) throw std::logic_error("backward: tape already consumed; run the forward pass again");
        const Tensor<T>& lv = value(loss);
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_of(lv));
        }
        consumed_ = true;
        if (!nodes_[loss.id].requires_grad) return;
        nodes_[loss.id].grad = Tensor<T>::Ones(1, 1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward();
            if (n.param) {
                if (n.param->grad.size() == 0) {
                    n.param->grad = n.grad;
                } else {
                    n.param->grad += n.grad;
                }
            }
        }
    }

    // Used by op implementations.
    Node& node(Var<T> v) { return nodes_[v.id]; }

    Var<T> push(Tensor<T> v, bool requires_grad) {
        nodes_.push_back(Node{std::move(v), {}, requires_grad, nullptr, {}});
        return Var<T>{this, nodes_.size() - 1};
    }

    template <class Expr>
    void accumulate(Var<T> v, const Expr& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    /// Grad buffer of `v`, zero-initialized on first use.
    Tensor<T>& grad_buffer(Var<T> v) {
        Node& n = nodes_[v.id];
        if (n.grad.size() == 0) n.grad = Tensor<T>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

private:
    std::deque<Node> nodes_;
    bool consumed_ = false;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(*this);
}

namespace ad {

namespace detail {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
    return *a.tape;
}

template <class T>
[[noreturn]] void shape_error(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

template <class T>
Var<T> result(Tape<T>& t, Tensor<T> v, std::initializer_list<Var<T>> inputs) {
    bool rg = false;
    for (auto in : inputs) rg = rg || t.requires_grad(in);
    return t.push(std::move(v), rg);
}

}  // namespace detail

/// a * b
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b, "matmul");
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.cols() != B.rows()) detail::shape_error("matmul", A, B);
    Tensor<T> out(A.rows(), B.cols());
    out.noalias() = A * B;
    Var<T> o = detail::result(t, std::move(out), {a, b});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, b, o] {
            const auto& G = t.node(o).grad;
            if (t.requires_grad(a)) t.grad_buffer(a).noalias() += G * t.value(b).transpose();
            if (t.requires_grad(b)) t.grad_buffer(b).noalias() += t.value(a).transpose() * G;
        };
    }
    return o;
}

/// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b, "matmul_nt");
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.cols() != B.cols()) detail::shape_error("matmul_nt", A, B);
    Tensor<T> out(A.rows(), B.rows());
    out.noalias() = A * B.transpose();
    Var<T> o = detail::result(t, std::move(out), {a, b});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, b, o] {
            const auto& G = t.node(o).grad;
            if (t.requires_grad(a)) t.grad_buffer(a).noalias() += G * t.value(b);
            if (t.requires_grad(b)) t.grad_buffer(b).noalias() += G.transpose() * t.value(a);
        };
    }
    return o;
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b, "add");
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.rows() != B.rows() || A.cols() != B.cols()) detail::shape_error("add", A, B);
    Var<T> o = detail::result(t, Tensor<T>(A + B), {a, b});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, b, o] {
            const auto& G = t.node(o).grad;
            t.accumulate(a, G);
            t.accumulate(b, G);
        };
    }
    return o;
}

/// Adds a 1 x n row to every row of a.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    Tape<T>& t = detail::same_tape(a, bias, "add_bias");
    const auto& A = a.value();
    const auto& B = bias.value();
    if (B.rows() != 1 || B.cols() != A.cols()) detail::shape_error("add_bias", A, B);
    Tensor<T> out = A;
    out.rowwise() += B.row(0);
    Var<T> o = detail::result(t, std::move(out), {a, bias});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, bias, o] {
            const auto& G = t.node(o).grad;
            t.accumulate(a, G);
            if (t.requires_grad(bias)) t.grad_buffer(bias) += G.colwise().sum();
        };
    }
    return o;
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& t = *a.tape;
    Var<T> o = detail::result(t, Tensor<T>(a.value() * s), {a});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, o, s] { t.accumulate(a, t.node(o).grad * s); };
    }
    return o;
}

/// Row-wise softmax of a + mask. Entries whose mask value is the sentinel
/// get probability exactly 0 and pass no gradient. A fully masked row is 0.
template <class T>
Var<T> row_softmax_masked(Var<T> a, std::shared_ptr<const Tensor<T>> mask = nullptr) {
    Tape<T>& t = *a.tape;
    const auto& A = a.value();
    if (mask && (mask->rows() != A.rows() || mask->cols() != A.cols())) {
        detail::shape_error("row_softmax_masked", A, *mask);
    }
    // Masked logits sit near the sentinel, so exp() returns exactly 0 there
    // regardless of the unmasked score.
    Tensor<T> P = mask ? Tensor<T>(A + *mask) : A;
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        const T mx = P.row(i).maxCoeff();
        if (is_masked(mx)) {
            P.row(i).setZero();
            continue;
        }
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
    }
    Var<T> o = detail::result(t, std::move(P), {a});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, o] {
            const auto& G = t.node(o).grad;
            const auto& P = t.value(o);
            Tensor<T>& ga = t.grad_buffer(a);
            for (Eigen::Index i = 0; i < P.rows(); ++i) {
                const T dot = G.row(i).dot(P.row(i));
                ga.row(i).array() += P.row(i).array() * (G.row(i).array() - dot);
            }
        };
    }
    return o;
}

/// Per-row normalization to zero mean, unit variance, then gamma * x + beta.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Tape<T>& t = detail::same_tape(x, gamma, "layer_norm");
    const auto& X = x.value();
    const auto& g = gamma.value();
    const auto& b = beta.value();
    if (g.rows() != 1 || g.cols() != X.cols()) detail::shape_error("layer_norm", X, g);
    if (b.rows() != 1 || b.cols() != X.cols()) detail::shape_error("layer_norm", X, b);
    const Eigen::Index n = X.cols();
    auto xhat = std::make_shared<Tensor<T>>(X.rows(), n);
    auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(X.rows()));
    Tensor<T> out(X.rows(), n);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const T mean = X.row(i).mean();
        const T var = (X.row(i).array() - mean).square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        (*inv)[static_cast<std::size_t>(i)] = is;
        xhat->row(i) = (X.row(i).array() - mean) * is;
        out.row(i) = xhat->row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
    Var<T> o = detail::result(t, std::move(out), {x, gamma, beta});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, x, gamma, beta, o, xhat, inv, n] {
            const auto& G = t.node(o).grad;
            if (t.requires_grad(gamma)) t.grad_buffer(gamma) += G.cwiseProduct(*xhat).colwise().sum();
            if (t.requires_grad(beta)) t.grad_buffer(beta) += G.colwise().sum();
            if (!t.requires_grad(x)) return;
            const auto& g = t.value(gamma);
            Tensor<T>& gx = t.grad_buffer(x);
            const T nn = static_cast<T>(n);
            for (Eigen::Index i = 0; i < G.rows(); ++i) {
                const auto dxh = (G.row(i).array() * g.row(0).array()).eval();
                const T s1 = dxh.sum();
                const T s2 = (dxh * xhat->row(i).array()).sum();
                gx.row(i).array() +=
                    ((*inv)[static_cast<std::size_t>(i)] / nn) * (nn * dxh - s1 - xhat->row(i).array() * s2);
            }
        };
    }
    return o;
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
    Tape<T>& t = *x.tape;
    const T r2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    Tensor<T> out = (T(0.5) * x.value().array() * (T(1) + (x.value().array() * r2).erf())).matrix();
    Var<T> o = detail::result(t, std::move(out), {x});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, x, o, r2] {
            const T c = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
            const auto X = t.value(x).array();
            Tensor<T> d = (T(0.5) * (T(1) + (X * r2).erf()) + X * c * (T(-0.5) * X.square()).exp()).matrix();
            t.accumulate(x, Tensor<T>(d.cwiseProduct(t.node(o).grad)));
        };
    }
    return o;
}

/// out.row(i) = table.row(index[i]).
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> index) {
    Tape<T>& t = *table.tape;
    const auto& W = table.value();
    Tensor<T> out(static_cast<Eigen::Index>(index.size()), W.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= static_cast<std::size_t>(W.rows())) {
            throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " outside " + shape_of(W));
        }
        out.row(static_cast<Eigen::Index>(i)) = W.row(static_cast<Eigen::Index>(index[i]));
    }
    Var<T> o = detail::result(t, std::move(out), {table});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, table, o, idx = std::move(index)] {
            const auto& G = t.node(o).grad;
            Tensor<T>& gw = t.grad_buffer(table);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                gw.row(static_cast<Eigen::Index>(idx[i])) += G.row(static_cast<Eigen::Index>(i));
            }
        };
    }
    return o;
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Tape<T>& t = *parts[0].tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0].cols();
    bool rg = false;
    for (auto p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_rows: operands on different tapes");
        if (p.cols() != cols) detail::shape_error("concat_rows", parts[0].value(), p.value());
        rows += p.rows();
        rg = rg || t.requires_grad(p);
    }
    Tensor<T> out(rows, cols);
    Eigen::Index r = 0;
    for (auto p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    Var<T> o = t.push(std::move(out), rg);
    if (rg) {
        t.node(o).backward = [&t, parts, o] {
            const auto& G = t.node(o).grad;
            Eigen::Index r = 0;
            for (auto p : parts) {
                t.accumulate(p, Tensor<T>(G.middleRows(r, p.rows())));
                r += p.rows();
            }
        };
    }
    return o;
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Tape<T>& t = *parts[0].tape;
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts[0].rows();
    bool rg = false;
    for (auto p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_cols: operands on different tapes");
        if (p.rows() != rows) detail::shape_error("concat_cols", parts[0].value(), p.value());
        cols += p.cols();
        rg = rg || t.requires_grad(p);
    }
    Tensor<T> out(rows, cols);
    Eigen::Index c = 0;
    for (auto p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    Var<T> o = t.push(std::move(out), rg);
    if (rg) {
        t.node(o).backward = [&t, parts, o] {
            const auto& G = t.node(o).grad;
            Eigen::Index c = 0;
            for (auto p : parts) {
                if (t.requires_grad(p)) t.grad_buffer(p) += G.middleCols(c, p.cols());
                c += p.cols();
            }
        };
    }
    return o;
}

template <class T>
Var<T> slice_cols(Var<T> a, Eigen::Index begin, Eigen::Index count) {
    Tape<T>& t = *a.tape;
    const auto& A = a.value();
    if (begin < 0 || count < 0 || begin + count > A.cols()) {
        throw std::out_of_range("slice_cols: columns [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") outside " + shape_of(A));
    }
    Var<T> o = detail::result(t, Tensor<T>(A.middleCols(begin, count)), {a});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, a, o, begin, count] {
            t.grad_buffer(a).middleCols(begin, count) += t.node(o).grad;
        };
    }
    return o;
}

/// Row blocks of an attention pattern: rows [row_begin, row_end) only ever
/// attend to keys below key_end. Keys past key_end are never computed.
struct AttentionBlock {
    Eigen::Index row_begin = 0;
    Eigen::Index row_end = 0;
    Eigen::Index key_end = 0;
};

/// Multi-head scaled dot-product attention with an additive mask, evaluated
/// per row block. q, k, v are (T x heads*head_dim); heads are column slices.
/// Equivalent to slicing heads and composing matmul_nt, scale,
/// row_softmax_masked and matmul, with identical zeros at masked entries.
template <class T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, int heads, std::shared_ptr<const Tensor<T>> mask,
                        std::shared_ptr<const std::vector<AttentionBlock>> blocks) {
    Tape<T>& t = detail::same_tape(q, k, "masked_attention");
    const auto& Q = q.value();
    const auto& K = k.value();
    const auto& V = v.value();
    if (Q.rows() != K.rows() || Q.cols() != K.cols()) detail::shape_error("masked_attention", Q, K);
    if (V.rows() != K.rows() || V.cols() != K.cols()) detail::shape_error("masked_attention", K, V);
    if (heads < 1 || Q.cols() % heads != 0) throw std::invalid_argument("masked_attention: bad head count");
    if (!mask || mask->rows() != Q.rows() || mask->cols() != Q.rows()) {
        throw std::invalid_argument("masked_attention: mask must be T x T");
    }
    const Eigen::Index hd = Q.cols() / heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    auto probs = std::make_shared<std::vector<Tensor<T>>>();
    probs->reserve(blocks->size() * static_cast<std::size_t>(heads));
    Tensor<T> out = Tensor<T>::Zero(Q.rows(), Q.cols());
    for (const auto& b : *blocks) {
        const Eigen::Index m = b.row_end - b.row_begin;
        for (int h = 0; h < heads; ++h) {
            Tensor<T> P(m, b.key_end);
            P.noalias() = Q.block(b.row_begin, h * hd, m, hd) * K.block(0, h * hd, b.key_end, hd).transpose();
            P *= sc;
            P += mask->block(b.row_begin, 0, m, b.key_end);
            for (Eigen::Index i = 0; i < m; ++i) {
                const T mx = P.row(i).maxCoeff();
                if (is_masked(mx)) {
                    P.row(i).setZero();
                    continue;
                }
                P.row(i) = (P.row(i).array() - mx).exp();
                P.row(i) /= P.row(i).sum();
            }
            out.block(b.row_begin, h * hd, m, hd).noalias() = P * V.block(0, h * hd, b.key_end, hd);
            probs->push_back(std::move(P));
        }
    }
    Var<T> o = detail::result(t, std::move(out), {q, k, v});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, q, k, v, o, heads, hd, sc, blocks, probs] {
            const auto& G = t.node(o).grad;
            const auto& Q = t.value(q);
            const auto& K = t.value(k);
            const auto& V = t.value(v);
            const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
            Tensor<T>* dq = gq ? &t.grad_buffer(q) : nullptr;
            Tensor<T>* dk = gk ? &t.grad_buffer(k) : nullptr;
            Tensor<T>* dv = gv ? &t.grad_buffer(v) : nullptr;
            std::size_t pi = 0;
            for (const auto& b : *blocks) {
                const Eigen::Index m = b.row_end - b.row_begin;
                for (int h = 0; h < heads; ++h, ++pi) {
                    const Tensor<T>& P = (*probs)[pi];
                    const auto Gb = G.block(b.row_begin, h * hd, m, hd);
                    if (gv) dv->block(0, h * hd, b.key_end, hd).noalias() += P.transpose() * Gb;
                    if (!gq && !gk) continue;
                    Tensor<T> dS(m, b.key_end);
                    dS.noalias() = Gb * V.block(0, h * hd, b.key_end, hd).transpose();
                    for (Eigen::Index i = 0; i < m; ++i) {
                        const T dot = dS.row(i).dot(P.row(i));
                        dS.row(i) = (P.row(i).array() * (dS.row(i).array() - dot)).matrix();
                    }
                    dS *= sc;
                    if (gq) dq->block(b.row_begin, h * hd, m, hd).noalias() += dS * K.block(0, h * hd, b.key_end, hd);
                    if (gk) {
                        dk->block(0, h * hd, b.key_end, hd).noalias() +=
                            dS.transpose() * Q.block(b.row_begin, h * hd, m, hd);
                    }
                }
            }
        };
    }
    return o;
}

/// sum(w * (x - target)^2) / denom, with constant target and weights.
template <class T>
Var<T> weighted_sq_sum(Var<T> x, const Tensor<T>& target, const Tensor<T>& weights, T denom = T(1)) {
    Tape<T>& t = *x.tape;
    const auto& X = x.value();
    if (target.rows() != X.rows() || target.cols() != X.cols()) detail::shape_error("weighted_sq_sum", X, target);
    if (weights.rows() != X.rows() || weights.cols() != X.cols()) detail::shape_error("weighted_sq_sum", X, weights);
    Tensor<T> diff = X - target;
    // Accumulate in double regardless of T.
    double acc = 0.0;
    for (Eigen::Index i = 0; i < diff.size(); ++i) {
        acc += static_cast<double>(weights.data()[i]) * static_cast<double>(diff.data()[i]) *
               static_cast<double>(diff.data()[i]);
    }
    Tensor<T> out(1, 1);
    out(0, 0) = static_cast<T>(acc / static_cast<double>(denom));
    Var<T> o = detail::result(t, std::move(out), {x});
    if (t.requires_grad(o)) {
        t.node(o).backward = [&t, x, o, d = std::move(diff), w = weights, denom] {
            const T g = t.node(o).grad(0, 0);
            t.accumulate(x, Tensor<T>(d.cwiseProduct(w) * (T(2) * g / denom)));
        };
    }
    return o;
}

/// Mean of (x - target)^2 over all entries.
template <class T>
Var<T> mean_sq(Var<T> x, const Tensor<T>& target) {
    const auto& X = x.value();
    if (X.size() == 0) throw std::invalid_argument("mean_sq: empty tensor");
    return weighted_sq_sum(x, target, Tensor<T>(Tensor<T>::Ones(X.rows(), X.cols())), static_cast<T>(X.size()));
}

template <class T>
Var<T> mean_sq(Var<T> x, T target) {
    return mean_sq(x, Tensor<T>(Tensor<T>::Constant(x.rows(), x.cols(), target)));
}

}  // namespace ad

/// Central-difference check of reverse-mode gradients.
///
/// `f` builds a scalar on the given tape from the parameters. Returns the max
/// over checked coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8). With
/// max_coords > 0 a seeded random subset of coordinates is checked.
template <class F>
double grad_check(F&& f, const std::vector<Parameter<double>*>& params, double eps = 1e-5,
                  std::size_t max_coords = 0, std::uint64_t seed = 0) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        Var<double> loss = f(tape);
        tape.backward(loss);
    }
    auto eval = [&] {
        Tape<double> tape;
        return f(tape).value()(0, 0);
    };
    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (Eigen::Index i = 0; i < params[k]->size(); ++i) coords.emplace_back(k, i);
    }
    if (max_coords > 0 && coords.size() > max_coords) {
        CounterRng rng(derive_key({seed, 0x4743ULL}));
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(coords.size() - i));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }
    double worst = 0.0;
    for (auto [k, i] : coords) {
        double& w = params[k]->value.data()[i];
        const double saved = w;
        w = saved + eps;
        const double fp = eval();
        w = saved - eps;
        const double fm = eval();
        w = saved;
        const double fd = (fp - fm) / (2.0 * eps);
        const double ad = params[k]->grad.data()[i];
        worst = std::max(worst, std::abs(ad - fd) / (std::abs(fd) + 1e-8));
    }
    return worst;
}

}  // namespace fmint
