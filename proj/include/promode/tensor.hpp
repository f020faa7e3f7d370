#pragma once

// Reverse-mode autodiff over dense row-major tensors. Each op builds a node
// holding the forward value and a closure that scatters the node's gradient
// into its parents. backward() on a scalar walks the graph in reverse
// topological order. Gradient-accumulation rule (documented, covered by
// tests): leaf gradients accumulate across backward() calls on separately
// built graphs sharing the same leaves; re-running backward() on one already
// swept graph is rejected by convention (intermediate grads would compound) —
// rebuild the graph or zero_grad() the leaves between sweeps.

#include <algorithm>
#include <cblas.h>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "promode/common.hpp"

namespace promode {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <class S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<S>>();
        n->data.assign(numel(shape), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data,
                            bool requires_grad = false) {
        if (data.size() != numel(shape))
            throw Error("tensor: data length " + std::to_string(data.size()) +
                        " != numel of " + shape_str(shape));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    static Tensor scalar(S value) { return from_data({1}, {value}); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    size_t size() const { return n_->data.size(); }
    size_t dim(size_t i) const { return n_->shape[i]; }
    size_t rank() const { return n_->shape.size(); }
    std::vector<S>& data() { return n_->data; }
    const std::vector<S>& data() const { return n_->data; }
    std::vector<S>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }
    S item() const {
        if (size() != 1) throw Error("item: tensor is not scalar, shape " + shape_str(shape()));
        return n_->data[0];
    }
    std::shared_ptr<TensorNode<S>> node() const { return n_; }

    void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

    // Reverse-mode sweep from this scalar. Gradients accumulate into every
    // reachable node's grad buffer.
    void backward() const {
        if (size() != 1)
            throw Error("backward: output must be scalar, got " + shape_str(shape()));
        std::vector<TensorNode<S>*> order;
        std::unordered_set<TensorNode<S>*> seen;
        topo(n_.get(), seen, order);
        n_->ensure_grad();
        n_->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<S>* node = *it;
            if (node->backward_fn) {
                for (auto& p : node->parents) p->ensure_grad();
                node->backward_fn(*node);
            }
        }
    }

    static Tensor make(Shape shape, std::vector<S> data,
                       std::vector<Tensor> parents,
                       std::function<void(TensorNode<S>&)> backward_fn) {
        Tensor t = from_data(std::move(shape), std::move(data));
        bool any = false;
        for (auto& p : parents) any = any || p.requires_grad();
        if (any) {
            t.n_->requires_grad = true;
            t.n_->parents.reserve(parents.size());
            for (auto& p : parents) t.n_->parents.push_back(p.n_);
            t.n_->backward_fn = std::move(backward_fn);
        }
        return t;
    }

private:
    static void topo(TensorNode<S>* node, std::unordered_set<TensorNode<S>*>& seen,
                     std::vector<TensorNode<S>*>& order) {
        // iterative DFS; graphs can be deep (long conv/transformer chains)
        std::vector<std::pair<TensorNode<S>*, size_t>> stack{{node, 0}};
        seen.insert(node);
        while (!stack.empty()) {
            auto& [cur, idx] = stack.back();
            if (idx < cur->parents.size()) {
                TensorNode<S>* p = cur->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<S>> n_;
};

namespace detail {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

// rows/cols view of a rank-1 or rank-2 tensor
template <class S>
std::pair<size_t, size_t> as2d(const Tensor<S>& a) {
    if (a.rank() == 1) return {size_t(1), a.dim(0)};
    if (a.rank() == 2) return {a.dim(0), a.dim(1)};
    throw Error("op requires rank<=2 tensor, got " + shape_str(a.shape()));
}

} // namespace detail

// ---- elementwise ----

template <class S, class F, class DF>
Tensor<S> unary_op(const char*, const Tensor<S>& a, F f, DF df) {
    std::vector<S> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    auto an = a.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a},
                           [an, df](TensorNode<S>& n) {
                               for (size_t i = 0; i < n.data.size(); ++i)
                                   an->grad[i] += n.grad[i] * df(an->data[i], n.data[i]);
                           });
}

template <class S> Tensor<S> relu(const Tensor<S>& a) {
    return unary_op("relu", a, [](S x) { return x > S(0) ? x : S(0); },
                    [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S> Tensor<S> sigmoid(const Tensor<S>& a) {
    return unary_op("sigmoid", a,
                    [](S x) { return S(1) / (S(1) + std::exp(-x)); },
                    [](S, S y) { return y * (S(1) - y); });
}

template <class S> Tensor<S> gelu(const Tensor<S>& a) {
    // exact erf form
    return unary_op("gelu", a,
                    [](S x) { return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2))); },
                    [](S x, S) {
                        S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
                        S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
                        return cdf + x * pdf;
                    });
}

template <class S> Tensor<S> exp_(const Tensor<S>& a) {
    return unary_op("exp", a, [](S x) { return std::exp(x); },
                    [](S, S y) { return y; });
}

template <class S> Tensor<S> log_(const Tensor<S>& a) {
    return unary_op("log", a, [](S x) { return std::log(x); },
                    [](S x, S) { return S(1) / x; });
}

template <class S> Tensor<S> abs_(const Tensor<S>& a) {
    return unary_op("abs", a, [](S x) { return std::abs(x); },
                    [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <class S> Tensor<S> sqrt_(const Tensor<S>& a) {
    return unary_op("sqrt", a, [](S x) { return std::sqrt(x); },
                    [](S, S y) { return S(0.5) / y; });
}

template <class S> Tensor<S> square(const Tensor<S>& a) {
    return unary_op("square", a, [](S x) { return x * x; },
                    [](S x, S) { return S(2) * x; });
}

template <class S> Tensor<S> reciprocal(const Tensor<S>& a) {
    return unary_op("reciprocal", a, [](S x) { return S(1) / x; },
                    [](S, S y) { return -y * y; });
}

template <class S> Tensor<S> softplus(const Tensor<S>& a) {
    // stable: max(x,0) + log1p(exp(-|x|))
    return unary_op("softplus", a,
                    [](S x) { return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x))); },
                    [](S x, S) { return S(1) / (S(1) + std::exp(-x)); });
}

template <class S> Tensor<S> scale(const Tensor<S>& a, S c) {
    return unary_op("scale", a, [c](S x) { return c * x; },
                    [c](S, S) { return c; });
}

template <class S> Tensor<S> add_const(const Tensor<S>& a, S c) {
    return unary_op("add_const", a, [c](S x) { return x + c; },
                    [](S, S) { return S(1); });
}

template <class S, class F, class DFA, class DFB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    F f, DFA dfa, DFB dfb) {
    detail::check_same_shape(name, a, b);
    std::vector<S> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i], b.data()[i]);
    auto an = a.node();
    auto bn = b.node();
    return Tensor<S>::make(
        a.shape(), std::move(out), {a, b}, [an, bn, dfa, dfb](TensorNode<S>& n) {
            for (size_t i = 0; i < n.data.size(); ++i) {
                an->grad[i] += n.grad[i] * dfa(an->data[i], bn->data[i]);
                bn->grad[i] += n.grad[i] * dfb(an->data[i], bn->data[i]);
            }
        });
}

template <class S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op("add", a, b, [](S x, S y) { return x + y; },
                     [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <class S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op("sub", a, b, [](S x, S y) { return x - y; },
                     [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <class S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op("mul", a, b, [](S x, S y) { return x * y; },
                     [](S, S y) { return y; }, [](S x, S) { return x; });
}

// ---- broadcast over rows: v has shape {n} or {1,n}, a is {m,n} ----

template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
    auto [m, n] = detail::as2d(a);
    auto [vm, vn] = detail::as2d(v);
    detail::check(vm == 1 && vn == n, "add_rowvec: " + shape_str(a.shape()) +
                                          " vs " + shape_str(v.shape()));
    std::vector<S> out(a.size());
    for (size_t r = 0; r < m; ++r)
        for (size_t c = 0; c < n; ++c)
            out[r * n + c] = a.data()[r * n + c] + v.data()[c];
    auto an = a.node();
    auto vn_ = v.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a, v},
                           [an, vn_, m, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r)
                                   for (size_t c = 0; c < n; ++c) {
                                       an->grad[r * n + c] += nd.grad[r * n + c];
                                       vn_->grad[c] += nd.grad[r * n + c];
                                   }
                           });
}

template <class S>
Tensor<S> mul_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
    auto [m, n] = detail::as2d(a);
    auto [vm, vn] = detail::as2d(v);
    detail::check(vm == 1 && vn == n, "mul_rowvec: " + shape_str(a.shape()) +
                                          " vs " + shape_str(v.shape()));
    std::vector<S> out(a.size());
    for (size_t r = 0; r < m; ++r)
        for (size_t c = 0; c < n; ++c)
            out[r * n + c] = a.data()[r * n + c] * v.data()[c];
    auto an = a.node();
    auto vn_ = v.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a, v},
                           [an, vn_, m, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r)
                                   for (size_t c = 0; c < n; ++c) {
                                       an->grad[r * n + c] += nd.grad[r * n + c] * vn_->data[c];
                                       vn_->grad[c] += nd.grad[r * n + c] * an->data[r * n + c];
                                   }
                           });
}

// multiply every element by a scalar tensor {1}
template <class S>
Tensor<S> mul_bscalar(const Tensor<S>& a, const Tensor<S>& s) {
    detail::check(s.size() == 1, "mul_bscalar: second operand must be scalar");
    std::vector<S> out(a.size());
    S sv = s.data()[0];
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    auto an = a.node();
    auto sn = s.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a, s},
                           [an, sn](TensorNode<S>& nd) {
                               S sv2 = sn->data[0];
                               for (size_t i = 0; i < nd.data.size(); ++i) {
                                   an->grad[i] += nd.grad[i] * sv2;
                                   sn->grad[0] += nd.grad[i] * an->data[i];
                               }
                           });
}

// ---- matmul ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
    auto [am, an] = detail::as2d(a);
    auto [bm, bn] = detail::as2d(b);
    size_t m = trans_a ? an : am, k = trans_a ? am : an;
    size_t kb = trans_b ? bn : bm, n = trans_b ? bm : bn;
    detail::check(k == kb, "matmul: inner dims mismatch " + shape_str(a.shape()) +
                               (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) +
                               (trans_b ? "^T" : ""));
    std::vector<S> out(m * n);
    gemm(trans_a, trans_b, (int)m, (int)n, (int)k, S(1), a.data().data(), (int)an,
         b.data().data(), (int)bn, S(0), out.data(), (int)n);
    auto nodeA = a.node();
    auto nodeB = b.node();
    return Tensor<S>::make(
        {m, n}, std::move(out), {a, b},
        [nodeA, nodeB, m, n, k, an, bn, trans_a, trans_b](TensorNode<S>& nd) {
            const S* g = nd.grad.data();
            if (!trans_a)
                gemm(false, !trans_b, (int)m, (int)k, (int)n, S(1), g, (int)n,
                     nodeB->data.data(), (int)bn, S(1), nodeA->grad.data(), (int)an);
            else
                // C = A^T * B'  =>  dA = B' * dC^T
                gemm(trans_b, true, (int)k, (int)m, (int)n, S(1),
                     nodeB->data.data(), (int)bn, g, (int)n, S(1),
                     nodeA->grad.data(), (int)an);
            if (!trans_b)
                gemm(!trans_a, false, (int)k, (int)n, (int)m, S(1),
                     nodeA->data.data(), (int)an, g, (int)n, S(1),
                     nodeB->grad.data(), (int)bn);
            else
                gemm(true, trans_a, (int)n, (int)k, (int)m, S(1), g, (int)n,
                     nodeA->data.data(), (int)an, S(1), nodeB->grad.data(), (int)bn);
        });
}

// ---- concat / slice / gather / scatter ----

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    detail::check(!parts.empty(), "concat_cols: empty input");
    size_t m = detail::as2d(parts[0]).first;
    size_t ntot = 0;
    for (auto& p : parts) {
        auto [pm, pn] = detail::as2d(p);
        detail::check(pm == m, "concat_cols: row count mismatch");
        ntot += pn;
    }
    std::vector<S> out(m * ntot);
    size_t off = 0;
    std::vector<size_t> widths;
    for (auto& p : parts) {
        auto [pm, pn] = detail::as2d(p);
        (void)pm;
        for (size_t r = 0; r < m; ++r)
            std::copy_n(p.data().data() + r * pn, pn, out.data() + r * ntot + off);
        widths.push_back(pn);
        off += pn;
    }
    std::vector<std::shared_ptr<TensorNode<S>>> nodes;
    for (auto& p : parts) nodes.push_back(p.node());
    return Tensor<S>::make({m, ntot}, std::move(out), parts,
                           [nodes, widths, m, ntot](TensorNode<S>& nd) {
                               size_t o = 0;
                               for (size_t i = 0; i < nodes.size(); ++i) {
                                   size_t w = widths[i];
                                   for (size_t r = 0; r < m; ++r)
                                       for (size_t c = 0; c < w; ++c)
                                           nodes[i]->grad[r * w + c] += nd.grad[r * ntot + o + c];
                                   o += w;
                               }
                           });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, size_t start, size_t len) {
    auto [m, n] = detail::as2d(a);
    detail::check(start + len <= n, "slice_cols: out of range");
    std::vector<S> out(m * len);
    for (size_t r = 0; r < m; ++r)
        std::copy_n(a.data().data() + r * n + start, len, out.data() + r * len);
    auto an = a.node();
    return Tensor<S>::make({m, len}, std::move(out), {a},
                           [an, m, n, start, len](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r)
                                   for (size_t c = 0; c < len; ++c)
                                       an->grad[r * n + start + c] += nd.grad[r * len + c];
                           });
}

template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<size_t>& idx) {
    auto [m, n] = detail::as2d(a);
    for (size_t i : idx)
        detail::check(i < m, "gather_rows: index " + std::to_string(i) +
                                 " out of range for " + shape_str(a.shape()));
    std::vector<S> out(idx.size() * n);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.data().data() + idx[r] * n, n, out.data() + r * n);
    auto an = a.node();
    return Tensor<S>::make({idx.size(), n}, std::move(out), {a},
                           [an, idx, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < idx.size(); ++r)
                                   for (size_t c = 0; c < n; ++c)
                                       an->grad[idx[r] * n + c] += nd.grad[r * n + c];
                           });
}

// rows of `a` placed at positions idx in a total_rows x n output (zeros elsewhere)
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& a, const std::vector<size_t>& idx,
                       size_t total_rows) {
    auto [m, n] = detail::as2d(a);
    detail::check(idx.size() == m, "scatter_rows: index count != row count");
    for (size_t i : idx)
        detail::check(i < total_rows, "scatter_rows: index out of range");
    std::vector<S> out(total_rows * n, S(0));
    for (size_t r = 0; r < m; ++r)
        std::copy_n(a.data().data() + r * n, n, out.data() + idx[r] * n);
    auto an = a.node();
    return Tensor<S>::make({total_rows, n}, std::move(out), {a},
                           [an, idx, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < idx.size(); ++r)
                                   for (size_t c = 0; c < n; ++c)
                                       an->grad[r * n + c] += nd.grad[idx[r] * n + c];
                           });
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    S s = S(0);
    for (S x : a.data()) s += x;
    auto an = a.node();
    return Tensor<S>::make({1}, {s}, {a}, [an](TensorNode<S>& nd) {
        for (auto& g : an->grad) g += nd.grad[0];
    });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return scale(sum_all(a), S(1) / S(a.size()));
}

// column sums: {m,n} -> {1,n}
template <class S>
Tensor<S> sum_cols(const Tensor<S>& a) {
    auto [m, n] = detail::as2d(a);
    std::vector<S> out(n, S(0));
    for (size_t r = 0; r < m; ++r)
        for (size_t c = 0; c < n; ++c) out[c] += a.data()[r * n + c];
    auto an = a.node();
    return Tensor<S>::make({size_t(1), n}, std::move(out), {a},
                           [an, m, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r)
                                   for (size_t c = 0; c < n; ++c)
                                       an->grad[r * n + c] += nd.grad[c];
                           });
}

// ---- softmax / layer norm ----

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    auto [m, n] = detail::as2d(a);
    std::vector<S> out(a.size());
    for (size_t r = 0; r < m; ++r) {
        const S* x = a.data().data() + r * n;
        S* y = out.data() + r * n;
        S mx = *std::max_element(x, x + n);
        S sum = S(0);
        for (size_t c = 0; c < n; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        for (size_t c = 0; c < n; ++c) y[c] /= sum;
    }
    auto an = a.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a},
                           [an, m, n](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r) {
                                   const S* y = nd.data.data() + r * n;
                                   const S* g = nd.grad.data() + r * n;
                                   S dot = S(0);
                                   for (size_t c = 0; c < n; ++c) dot += y[c] * g[c];
                                   for (size_t c = 0; c < n; ++c)
                                       an->grad[r * n + c] += y[c] * (g[c] - dot);
                               }
                           });
}

// per-row standardization, no affine (compose with mul_rowvec/add_rowvec)
template <class S>
Tensor<S> layernorm_rows(const Tensor<S>& a, S eps = S(1e-5)) {
    auto [m, n] = detail::as2d(a);
    std::vector<S> out(a.size());
    std::vector<S> inv_sigma(m);
    for (size_t r = 0; r < m; ++r) {
        const S* x = a.data().data() + r * n;
        S mu = S(0);
        for (size_t c = 0; c < n; ++c) mu += x[c];
        mu /= S(n);
        S var = S(0);
        for (size_t c = 0; c < n; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= S(n);
        S is = S(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (size_t c = 0; c < n; ++c) out[r * n + c] = (x[c] - mu) * is;
    }
    auto an = a.node();
    return Tensor<S>::make(a.shape(), std::move(out), {a},
                           [an, m, n, inv_sigma](TensorNode<S>& nd) {
                               for (size_t r = 0; r < m; ++r) {
                                   const S* y = nd.data.data() + r * n;
                                   const S* g = nd.grad.data() + r * n;
                                   S gmean = S(0), gymean = S(0);
                                   for (size_t c = 0; c < n; ++c) {
                                       gmean += g[c];
                                       gymean += g[c] * y[c];
                                   }
                                   gmean /= S(n);
                                   gymean /= S(n);
                                   for (size_t c = 0; c < n; ++c)
                                       an->grad[r * n + c] +=
                                           inv_sigma[r] * (g[c] - gmean - y[c] * gymean);
                               }
                           });
}

// ---- depthwise 1-D convolution over time: x {T,C}, w {C,K}, zero padding ----

template <class S>
Tensor<S> dwconv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    auto [t, c] = detail::as2d(x);
    auto [wc, k] = detail::as2d(w);
    detail::check(wc == c, "dwconv1d: channel mismatch " + shape_str(x.shape()) +
                               " vs " + shape_str(w.shape()));
    detail::check(k % 2 == 1, "dwconv1d: kernel size must be odd");
    detail::check(b.size() == c, "dwconv1d: bias size mismatch");
    long half = (long)k / 2;
    std::vector<S> out(t * c);
    for (size_t ti = 0; ti < t; ++ti)
        for (size_t ci = 0; ci < c; ++ci) {
            S acc = b.data()[ci];
            for (long kk = 0; kk < (long)k; ++kk) {
                long src = (long)ti + kk - half;
                if (src >= 0 && src < (long)t)
                    acc += w.data()[ci * k + kk] * x.data()[src * c + ci];
            }
            out[ti * c + ci] = acc;
        }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return Tensor<S>::make(
        x.shape(), std::move(out), {x, w, b},
        [xn, wn, bn, t, c, k, half](TensorNode<S>& nd) {
            for (size_t ti = 0; ti < t; ++ti)
                for (size_t ci = 0; ci < c; ++ci) {
                    S g = nd.grad[ti * c + ci];
                    bn->grad[ci] += g;
                    for (long kk = 0; kk < (long)k; ++kk) {
                        long src = (long)ti + kk - half;
                        if (src >= 0 && src < (long)t) {
                            wn->grad[ci * k + kk] += g * xn->data[src * c + ci];
                            xn->grad[src * c + ci] += g * wn->data[ci * k + kk];
                        }
                    }
                }
        });
}

// ---- rotary positional rotation over pairs of channels ----

template <class S>
Tensor<S> rotary(const Tensor<S>& x, size_t pos_offset = 0, double base = 10000.0) {
    auto [t, d] = detail::as2d(x);
    detail::check(d % 2 == 0, "rotary: channel dim must be even, got " + shape_str(x.shape()));
    size_t half = d / 2;
    std::vector<S> cs(t * half), sn(t * half);
    for (size_t ti = 0; ti < t; ++ti)
        for (size_t i = 0; i < half; ++i) {
            double theta = double(ti + pos_offset) *
                           std::pow(base, -2.0 * double(i) / double(d));
            cs[ti * half + i] = S(std::cos(theta));
            sn[ti * half + i] = S(std::sin(theta));
        }
    std::vector<S> out(x.size());
    for (size_t ti = 0; ti < t; ++ti)
        for (size_t i = 0; i < half; ++i) {
            S x0 = x.data()[ti * d + 2 * i], x1 = x.data()[ti * d + 2 * i + 1];
            S co = cs[ti * half + i], si = sn[ti * half + i];
            out[ti * d + 2 * i] = x0 * co - x1 * si;
            out[ti * d + 2 * i + 1] = x0 * si + x1 * co;
        }
    auto xn = x.node();
    return Tensor<S>::make(x.shape(), std::move(out), {x},
                           [xn, t, d, half, cs, sn](TensorNode<S>& nd) {
                               // inverse rotation of the gradient
                               for (size_t ti = 0; ti < t; ++ti)
                                   for (size_t i = 0; i < half; ++i) {
                                       S g0 = nd.grad[ti * d + 2 * i];
                                       S g1 = nd.grad[ti * d + 2 * i + 1];
                                       S co = cs[ti * half + i], si = sn[ti * half + i];
                                       xn->grad[ti * d + 2 * i] += g0 * co + g1 * si;
                                       xn->grad[ti * d + 2 * i + 1] += -g0 * si + g1 * co;
                                   }
                           });
}

// ---- composites ----

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return add_rowvec(matmul(x, w), b);
}

// indices of true flags, for masked selection
inline std::vector<size_t> mask_indices(const std::vector<bool>& flags, bool value = true) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < flags.size(); ++i)
        if (flags[i] == value) idx.push_back(i);
    return idx;
}

template <class S>
Tensor<S> masked_select_rows(const Tensor<S>& a, const std::vector<bool>& flags) {
    detail::check(flags.size() == detail::as2d(a).first,
                  "masked_select_rows: mask length mismatch");
    return gather_rows(a, mask_indices(flags));
}

// scaled dot-product attention with optional additive bias on the score matrix
// q: {Tq, D}, k/v: {Tk, D}; heads must divide D
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    size_t heads, const Tensor<S>* score_bias = nullptr) {
    auto [tq, d] = detail::as2d(q);
    auto [tk, dk] = detail::as2d(k);
    detail::check(d == dk && d == detail::as2d(v).second && tk == detail::as2d(v).first,
                  "attention: shape mismatch q" + shape_str(q.shape()) + " k" +
                      shape_str(k.shape()) + " v" + shape_str(v.shape()));
    detail::check(d % heads == 0, "attention: heads must divide model dim");
    size_t hd = d / heads;
    S inv = S(1.0 / std::sqrt(double(hd)));
    std::vector<Tensor<S>> outs;
    for (size_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * hd, hd);
        auto kh = slice_cols(k, h * hd, hd);
        auto vh = slice_cols(v, h * hd, hd);
        auto scores = scale(matmul(qh, kh, false, true), inv);
        if (score_bias) scores = add(scores, *score_bias);
        outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return heads == 1 ? outs[0] : concat_cols(outs);
}

// global response normalization (ConvNeXt-V2), 1-D form: norms over time per channel
template <class S>
Tensor<S> grn(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
              S eps = S(1e-6)) {
    auto [t, c] = detail::as2d(x);
    (void)t;
    detail::check(gamma.size() == c && beta.size() == c, "grn: affine size mismatch");
    auto gx = sqrt_(add_const(sum_cols(square(x)), eps * eps));     // {1,C} L2 over time
    auto mean_gx = scale(sum_all(gx), S(1) / S(c));                  // {1}
    auto nx = mul_bscalar(gx, reciprocal(add_const(mean_gx, eps))); // {1,C}
    auto scaled = mul_rowvec(mul_rowvec(x, nx), gamma);
    return add(add_rowvec(scaled, beta), x);
}

} // namespace promode
