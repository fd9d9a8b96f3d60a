#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdprune/tensor.hpp"

namespace mdprune {

enum class OpKind {
    Matmul,
    Transpose,
    Add,
    Subtract,
    Multiply,
    ScalarMul,
    Abs,
    Relu,
    RowSoftmax,
    CrossEntropyWithLogits,
    FrobeniusSq,
    GatherRows,
};

inline const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Matmul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Add: return "add";
        case OpKind::Subtract: return "subtract";
        case OpKind::Multiply: return "multiply";
        case OpKind::ScalarMul: return "scalar-mul";
        case OpKind::Abs: return "abs";
        case OpKind::Relu: return "relu";
        case OpKind::RowSoftmax: return "row-softmax";
        case OpKind::CrossEntropyWithLogits: return "cross-entropy-with-logits";
        case OpKind::FrobeniusSq: return "frobenius-norm-squared";
        case OpKind::GatherRows: return "gather-rows";
    }
    return "?";
}

/// Non-tensor arguments of a primitive.
struct OpAttrs {
    double scalar = 1.0;              // ScalarMul factor
    std::size_t causal_segment = 0;   // RowSoftmax: 0 = unmasked, else causal within blocks of this many rows
    std::vector<std::size_t> indices; // CrossEntropy labels, GatherRows ids
};

namespace kernels {

inline void require_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected matrix, got " + shape_str(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            const double* brow = b.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// a^T b without materialising the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn", a.shape(), b.shape());
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor c({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.data().data() + p * m;
        const double* brow = b.data().data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.data().data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

/// a b^T without materialising the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt", a.shape(), b.shape());
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data().data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.data().data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c.at(i, j) = s;
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

template <class F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
    require_same_shape(op, a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return zip("add", a, b, [](double x, double y) { return x + y; });
}
inline Tensor subtract(const Tensor& a, const Tensor& b) {
    return zip("subtract", a, b, [](double x, double y) { return x - y; });
}
inline Tensor multiply(const Tensor& a, const Tensor& b) {
    return zip("multiply", a, b, [](double x, double y) { return x * y; });
}
inline Tensor scale(const Tensor& a, double s) {
    return map(a, [s](double x) { return s * x; });
}
inline Tensor abs(const Tensor& a) {
    return map(a, [](double x) { return std::abs(x); });
}
inline Tensor relu(const Tensor& a) {
    return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline bool softmax_allowed(std::size_t segment, std::size_t i, std::size_t j) {
    return segment == 0 || (j <= i && j / segment == i / segment);
}

inline Tensor row_softmax(const Tensor& a, std::size_t causal_segment = 0) {
    require_matrix("row-softmax", a);
    if (causal_segment && a.rows() != a.cols())
        throw ShapeError("row-softmax: causal masking needs a square matrix, got " + shape_str(a.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (softmax_allowed(causal_segment, i, j)) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (!softmax_allowed(causal_segment, i, j)) continue;
            const double e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(i, j) /= z;
    }
    return out;
}

inline void check_labels(const Tensor& logits, std::span<const std::size_t> labels) {
    require_matrix("cross-entropy-with-logits", logits);
    if (labels.size() != logits.rows())
        throw ShapeError("cross-entropy-with-logits", logits.shape(), Shape{labels.size()});
    for (auto y : labels)
        if (y >= logits.cols())
            throw std::invalid_argument("cross-entropy-with-logits: label " + std::to_string(y) +
                                        " out of range for " + std::to_string(logits.cols()) + " classes");
}

/// Per-row negative log-likelihoods of the labels.
inline std::vector<double> row_nll(const Tensor& logits, std::span<const std::size_t> labels) {
    check_labels(logits, labels);
    std::vector<double> nll(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto r = logits.row(i);
        const double mx = *std::max_element(r.begin(), r.end());
        double z = 0.0;
        for (double v : r) z += std::exp(v - mx);
        nll[i] = std::log(z) + mx - r[labels[i]];
    }
    return nll;
}

inline Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const std::size_t> labels) {
    const auto nll = row_nll(logits, labels);
    double s = 0.0;
    for (double v : nll) s += v;
    return Tensor::scalar(s / static_cast<double>(nll.size()));
}

inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_matrix("gather-rows", table);
    if (ids.empty()) throw ShapeError("gather-rows: empty index list");
    Tensor out({ids.size(), table.cols()});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= table.rows())
            throw std::invalid_argument("gather-rows: index " + std::to_string(ids[t]) + " out of range " +
                                        shape_str(table.shape()));
        std::copy_n(table.row(ids[t]).begin(), table.cols(), out.row(t).begin());
    }
    return out;
}

}  // namespace kernels

inline std::size_t op_arity(OpKind kind) {
    switch (kind) {
        case OpKind::Matmul:
        case OpKind::Add:
        case OpKind::Subtract:
        case OpKind::Multiply: return 2;
        default: return 1;
    }
}

/// Evaluates one primitive without recording it.
inline Tensor forward_primitive(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs = {}) {
    if (in.size() != op_arity(kind))
        throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(op_arity(kind)) +
                                    " inputs, got " + std::to_string(in.size()));
    switch (kind) {
        case OpKind::Matmul: return kernels::matmul(in[0], in[1]);
        case OpKind::Transpose: return kernels::transpose(in[0]);
        case OpKind::Add: return kernels::add(in[0], in[1]);
        case OpKind::Subtract: return kernels::subtract(in[0], in[1]);
        case OpKind::Multiply: return kernels::multiply(in[0], in[1]);
        case OpKind::ScalarMul: return kernels::scale(in[0], attrs.scalar);
        case OpKind::Abs: return kernels::abs(in[0]);
        case OpKind::Relu: return kernels::relu(in[0]);
        case OpKind::RowSoftmax: return kernels::row_softmax(in[0], attrs.causal_segment);
        case OpKind::CrossEntropyWithLogits: return kernels::cross_entropy_with_logits(in[0], attrs.indices);
        case OpKind::FrobeniusSq: return Tensor::scalar(frobenius_sq(in[0]));
        case OpKind::GatherRows: return kernels::gather_rows(in[0], attrs.indices);
    }
    throw std::logic_error("unknown op kind");
}

class Tape;

/// Handle to a value slot on a Tape.
class Var {
 public:
    Var() = default;
    const Tensor& value() const;
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }

 private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Gradients {
 public:
    const Tensor& operator[](Var v) const { return grads_.at(v.id()); }
    const Tensor& at(std::size_t id) const { return grads_.at(id); }

 private:
    friend class Tape;
    std::vector<Tensor> grads_;
};

/// Records primitives in evaluation order; `backward` runs reverse-mode
/// accumulation over the recorded prefix. One tape per thread.
class Tape {
 public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value) { return push(Node{OpKind::Add, {}, {}, std::move(value), true, true}); }
    Var constant(Tensor value) { return push(Node{OpKind::Add, {}, {}, std::move(value), false, true}); }

    Var apply(OpKind kind, std::initializer_list<Var> inputs, OpAttrs attrs = {}) {
        std::vector<std::size_t> ids;
        std::vector<Tensor> vals;
        ids.reserve(inputs.size());
        bool needs = false;
        for (const Var& v : inputs) {
            if (v.tape_ != this) throw std::logic_error(std::string(op_name(kind)) + ": input from another tape");
            ids.push_back(v.id_);
            needs = needs || nodes_[v.id_].requires_grad;
        }
        Tensor out = eval(kind, ids, attrs);
        return push(Node{kind, std::move(ids), std::move(attrs), std::move(out), needs, false});
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Gradients backward(Var output, const Tensor& seed) const {
        if (nodes_.empty() || output.tape_ != this || output.id_ >= nodes_.size())
            throw std::logic_error("backward: output was not produced by a forward pass on this tape");
        const Node& out = nodes_[output.id_];
        if (seed.shape() != out.value.shape()) throw ShapeError("backward seed", seed.shape(), out.value.shape());

        Gradients g;
        g.grads_.resize(nodes_.size());
        g.grads_[output.id_] = seed;
        for (std::size_t idx = output.id_ + 1; idx-- > 0;) {
            const Node& node = nodes_[idx];
            if (node.is_leaf || !node.requires_grad || g.grads_[idx].empty()) continue;
            propagate(node, g.grads_[idx], g.grads_);
        }
        for (std::size_t idx = 0; idx < nodes_.size(); ++idx)
            if (nodes_[idx].is_leaf && g.grads_[idx].empty()) g.grads_[idx] = Tensor(nodes_[idx].value.shape());
        return g;
    }

    Gradients backward(Var scalar_output) const { return backward(scalar_output, Tensor::scalar(1.0)); }

 private:
    struct Node {
        OpKind kind;
        std::vector<std::size_t> inputs;
        OpAttrs attrs;
        Tensor value;
        bool requires_grad;
        bool is_leaf;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Tensor eval(OpKind kind, const std::vector<std::size_t>& ids, const OpAttrs& attrs) const {
        if (ids.size() != op_arity(kind))
            throw std::invalid_argument(std::string(op_name(kind)) + ": wrong number of inputs");
        const Tensor& a = nodes_[ids[0]].value;
        switch (kind) {
            case OpKind::Matmul: return kernels::matmul(a, nodes_[ids[1]].value);
            case OpKind::Add: return kernels::add(a, nodes_[ids[1]].value);
            case OpKind::Subtract: return kernels::subtract(a, nodes_[ids[1]].value);
            case OpKind::Multiply: return kernels::multiply(a, nodes_[ids[1]].value);
            default: return forward_primitive(kind, std::span<const Tensor>(&a, 1), attrs);
        }
    }

    void accumulate(std::vector<Tensor>& grads, std::size_t id, Tensor contrib) const {
        if (!nodes_[id].requires_grad) return;
        if (grads[id].empty()) {
            grads[id] = std::move(contrib);
        } else {
            for (std::size_t i = 0; i < contrib.size(); ++i) grads[id][i] += contrib[i];
        }
    }

    void propagate(const Node& node, const Tensor& go, std::vector<Tensor>& grads) const {
        const std::size_t ia = node.inputs[0];
        const Tensor& a = nodes_[ia].value;
        switch (node.kind) {
            case OpKind::Matmul: {
                const std::size_t ib = node.inputs[1];
                const Tensor& b = nodes_[ib].value;
                if (nodes_[ia].requires_grad) accumulate(grads, ia, kernels::matmul_nt(go, b));
                if (nodes_[ib].requires_grad) accumulate(grads, ib, kernels::matmul_tn(a, go));
                break;
            }
            case OpKind::Transpose: accumulate(grads, ia, kernels::transpose(go)); break;
            case OpKind::Add:
                accumulate(grads, ia, go);
                accumulate(grads, node.inputs[1], go);
                break;
            case OpKind::Subtract:
                accumulate(grads, ia, go);
                accumulate(grads, node.inputs[1], kernels::scale(go, -1.0));
                break;
            case OpKind::Multiply: {
                const std::size_t ib = node.inputs[1];
                const Tensor& b = nodes_[ib].value;
                if (nodes_[ia].requires_grad) accumulate(grads, ia, kernels::multiply(go, b));
                if (nodes_[ib].requires_grad) accumulate(grads, ib, kernels::multiply(go, a));
                break;
            }
            case OpKind::ScalarMul: accumulate(grads, ia, kernels::scale(go, node.attrs.scalar)); break;
            case OpKind::Abs:
                accumulate(grads, ia, kernels::zip("abs-grad", go, a, [](double g, double x) { return g * sign_of(x); }));
                break;
            case OpKind::Relu:
                accumulate(grads, ia,
                           kernels::zip("relu-grad", go, a, [](double g, double x) { return x > 0.0 ? g : 0.0; }));
                break;
            case OpKind::RowSoftmax: {
                const Tensor& y = node.value;
                Tensor gi(y.shape());
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < y.cols(); ++j) s += go.at(i, j) * y.at(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j) gi.at(i, j) = y.at(i, j) * (go.at(i, j) - s);
                }
                accumulate(grads, ia, std::move(gi));
                break;
            }
            case OpKind::CrossEntropyWithLogits: {
                Tensor p = kernels::row_softmax(a);
                const double scale = go.item() / static_cast<double>(a.rows());
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    p.at(i, node.attrs.indices[i]) -= 1.0;
                    for (std::size_t j = 0; j < a.cols(); ++j) p.at(i, j) *= scale;
                }
                accumulate(grads, ia, std::move(p));
                break;
            }
            case OpKind::FrobeniusSq: accumulate(grads, ia, kernels::scale(a, 2.0 * go.item())); break;
            case OpKind::GatherRows: {
                Tensor gt(a.shape());
                const auto& ids = node.attrs.indices;
                for (std::size_t t = 0; t < ids.size(); ++t) {
                    auto dst = gt.row(ids[t]);
                    auto src = go.row(t);
                    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
                accumulate(grads, ia, std::move(gt));
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("value() on an unbound Var");
    return tape_->value(*this);
}

// Convenience builders.
inline Var matmul(Var a, Var b) { return a.tape()->apply(OpKind::Matmul, {a, b}); }
inline Var transpose(Var a) { return a.tape()->apply(OpKind::Transpose, {a}); }
inline Var operator+(Var a, Var b) { return a.tape()->apply(OpKind::Add, {a, b}); }
inline Var operator-(Var a, Var b) { return a.tape()->apply(OpKind::Subtract, {a, b}); }
inline Var operator*(Var a, Var b) { return a.tape()->apply(OpKind::Multiply, {a, b}); }
inline Var operator*(double s, Var a) {
    OpAttrs at;
    at.scalar = s;
    return a.tape()->apply(OpKind::ScalarMul, {a}, std::move(at));
}
inline Var abs(Var a) { return a.tape()->apply(OpKind::Abs, {a}); }
inline Var relu(Var a) { return a.tape()->apply(OpKind::Relu, {a}); }
inline Var row_softmax(Var a, std::size_t causal_segment = 0) {
    OpAttrs at;
    at.causal_segment = causal_segment;
    return a.tape()->apply(OpKind::RowSoftmax, {a}, std::move(at));
}
inline Var cross_entropy_with_logits(Var logits, std::vector<std::size_t> labels) {
    OpAttrs at;
    at.indices = std::move(labels);
    return logits.tape()->apply(OpKind::CrossEntropyWithLogits, {logits}, std::move(at));
}
inline Var frobenius_sq(Var a) { return a.tape()->apply(OpKind::FrobeniusSq, {a}); }
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
    OpAttrs at;
    at.indices = std::move(ids);
    return table.tape()->apply(OpKind::GatherRows, {table}, std::move(at));
}

}  // namespace mdprune
