#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mgpt2/error.hpp"

namespace mgpt2::nn {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shapes(bool cond, const std::string& primitive, const Shape& a, const Shape& b) {
    if (!cond)
        throw ContractError("shape mismatch in " + primitive + ": " + shape_str(a) + " vs " + shape_str(b));
}

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major, accumulate into C. Parallelism is over output
// rows with a static schedule; every C element is reduced in a fixed k order,
// so results are identical for any thread count.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <class S>
void gemm_nn(S* c, const S* a, const S* b, int m, int n, int k) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        S* ci = c + static_cast<std::int64_t>(i) * n;
        const S* ai = a + static_cast<std::int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = ai[p];
            const S* bp = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class S>
void gemm_nt(S* c, const S* a, const S* b, int m, int n, int k) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        S* ci = c + static_cast<std::int64_t>(i) * n;
        const S* ai = a + static_cast<std::int64_t>(i) * k;
        int j = 0;
        // Four rows of B at once keeps independent accumulator chains.
        for (; j + 4 <= n; j += 4) {
            const S* b0 = b + static_cast<std::int64_t>(j) * k;
            const S* b1 = b0 + k;
            const S* b2 = b1 + k;
            const S* b3 = b2 + k;
            S a0 = 0, a1 = 0, a2 = 0, a3 = 0;
#pragma omp simd reduction(+ : a0, a1, a2, a3)
            for (int p = 0; p < k; ++p) {
                const S av = ai[p];
                a0 += av * b0[p];
                a1 += av * b1[p];
                a2 += av * b2[p];
                a3 += av * b3[p];
            }
            ci[j] += a0;
            ci[j + 1] += a1;
            ci[j + 2] += a2;
            ci[j + 3] += a3;
        }
        for (; j < n; ++j) {
            const S* bj = b + static_cast<std::int64_t>(j) * k;
            S acc = 0;
#pragma omp simd reduction(+ : acc)
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class S>
void gemm_tn(S* c, const S* a, const S* b, int m, int n, int k) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        S* ci = c + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S av = a[static_cast<std::int64_t>(p) * m + i];
            const S* bp = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Autodiff tape
// ---------------------------------------------------------------------------

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // allocated lazily, same size as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), S(0));
    }
};

// Disables graph recording inside its scope (inference, metric evaluation).
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <class S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = shape;
        n->values.assign(numel_of(shape), S(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(const Shape& shape, S value) {
        auto t = zeros(shape);
        std::fill(t.node_->values.begin(), t.node_->values.end(), value);
        return t;
    }

    static Tensor from(const Shape& shape, std::vector<S> data, bool requires_grad = false) {
        check_contract(static_cast<std::int64_t>(data.size()) == numel_of(shape),
                       "tensor data size does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = shape;
        n->values = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(S value) { return from({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const {
        int nd = static_cast<int>(node_->shape.size());
        return node_->shape[(i < 0 ? nd + i : i)];
    }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }

    std::vector<S>& values() { return node_->values; }
    const std::vector<S>& values() const { return node_->values; }
    std::vector<S>& grad() { return node_->grad; }
    const std::vector<S>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void clear_grad() { node_->grad.clear(); }

    S item() const {
        check_contract(numel() == 1, "item() requires a scalar tensor");
        return node_->values[0];
    }

    std::shared_ptr<TensorNode<S>>& node() { return node_; }
    const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, std::vector<S> values, std::vector<Tensor<S>> inputs,
                  std::function<void(TensorNode<S>&)> backward) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool any_grad = false;
    for (const auto& in : inputs) any_grad = any_grad || in.requires_grad();
    if (grad_mode_flag() && any_grad) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor<S>(std::move(n));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Parameters reachable through the
// tape accumulate gradients; call once per recorded forward pass.
template <class S>
void backward(Tensor<S> loss) {
    check_contract(loss.numel() == 1, "backward() requires a scalar loss");
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS for the topological order.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> visited;
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<S>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<S>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

// b's shape must equal a's shape or a trailing suffix of it (bias rows,
// positional tables, additive masks all use the suffix form).
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool suffix = sb.size() <= sa.size() &&
                  std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
    check_shapes(suffix, "add", sa, sb);
    const std::int64_t nb = numel_of(sb);
    std::vector<S> out(a.values());
    const auto& bv = b.values();
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] += bv[i % nb];
    return detail::make_op<S>(sa, std::move(out), {a, b}, [nb](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i % nb] += n.grad[i];
        }
    });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_shapes(a.shape() == b.shape(), "sub", a.shape(), b.shape());
    std::vector<S> out(a.values());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] -= b.values()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_shapes(a.shape() == b.shape(), "mul", a.shape(), b.shape());
    std::vector<S> out(a.values());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] *= b.values()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.values[i];
        }
    });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    std::vector<S> out(a.values());
    for (auto& v : out) v *= factor;
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [factor](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * factor;
    });
}

// Forward identity; blocks gradient flow entirely.
template <class S>
Tensor<S> stop_gradient(const Tensor<S>& a) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = a.shape();
    n->values = a.values();
    n->requires_grad = false;
    return Tensor<S>(std::move(n));
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
    std::vector<S> out(a.values());
    for (auto& v : out) v = v > S(0) ? v : S(0);
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa.grad[i] += pa.values[i] > S(0) ? n.grad[i] : S(0);
    });
}

// Exact GELU: x * Phi(x).
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<S> out(a.values());
    for (auto& v : out) {
        double x = static_cast<double>(v);
        v = static_cast<S>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
    }
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [=](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double x = static_cast<double>(pa.values[i]);
            double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
            pa.grad[i] += n.grad[i] * static_cast<S>(phi + x * dens);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
    check_contract(numel_of(shape) == a.numel(),
                   "reshape to " + shape_str(shape) + " changes element count");
    std::vector<S> out(a.values());
    return detail::make_op<S>(shape, std::move(out), {a}, [](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    });
}

namespace detail {

inline std::vector<std::int64_t> row_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

}  // namespace detail

template <class S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
    const Shape& sa = a.shape();
    check_contract(perm.size() == sa.size(), "permute rank mismatch");
    Shape so(sa.size());
    for (std::size_t i = 0; i < perm.size(); ++i) so[i] = sa[perm[i]];
    auto ist = detail::row_strides(sa);
    auto ost = detail::row_strides(so);
    const std::int64_t n = a.numel();
    std::vector<S> out(n);
    const int nd = static_cast<int>(sa.size());
    for (std::int64_t o = 0; o < n; ++o) {
        std::int64_t rem = o, src = 0;
        for (int d = 0; d < nd; ++d) {
            std::int64_t idx = rem / ost[d];
            rem %= ost[d];
            src += idx * ist[perm[d]];
        }
        out[o] = a.values()[src];
    }
    return detail::make_op<S>(so, std::move(out), {a}, [perm, ist, ost, nd](TensorNode<S>& n_) {
        auto& pa = *n_.parents[0];
        pa.ensure_grad();
        const std::int64_t n = static_cast<std::int64_t>(n_.grad.size());
        for (std::int64_t o = 0; o < n; ++o) {
            std::int64_t rem = o, src = 0;
            for (int d = 0; d < nd; ++d) {
                std::int64_t idx = rem / ost[d];
                rem %= ost[d];
                src += idx * ist[perm[d]];
            }
            pa.grad[src] += n_.grad[o];
        }
    });
}

// Slice along the last dimension.
template <class S>
Tensor<S> slice_last(const Tensor<S>& a, int start, int len) {
    const Shape& sa = a.shape();
    const int last = sa.back();
    check_contract(start >= 0 && len > 0 && start + len <= last, "slice_last out of range");
    Shape so(sa);
    so.back() = len;
    const std::int64_t rows = a.numel() / last;
    std::vector<S> out(rows * len);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(a.values().begin() + r * last + start, len, out.begin() + r * len);
    return detail::make_op<S>(so, std::move(out), {a}, [start, len, last](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        const std::int64_t rows = static_cast<std::int64_t>(n.grad.size()) / len;
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j)
                pa.grad[r * last + start + j] += n.grad[r * len + j];
    });
}

// Concatenate along the last dimension.
template <class S>
Tensor<S> concat_last(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check_contract(sa.size() == sb.size(), "concat_last rank mismatch");
    for (std::size_t i = 0; i + 1 < sa.size(); ++i)
        check_shapes(sa[i] == sb[i], "concat_last", sa, sb);
    const int la = sa.back(), lb = sb.back();
    Shape so(sa);
    so.back() = la + lb;
    const std::int64_t rows = a.numel() / la;
    std::vector<S> out(rows * (la + lb));
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().begin() + r * la, la, out.begin() + r * (la + lb));
        std::copy_n(b.values().begin() + r * lb, lb, out.begin() + r * (la + lb) + la);
    }
    return detail::make_op<S>(so, std::move(out), {a, b}, [la, lb](TensorNode<S>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const std::int64_t rows = static_cast<std::int64_t>(n.grad.size()) / (la + lb);
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < la; ++j) pa.grad[r * la + j] += n.grad[r * (la + lb) + j];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < lb; ++j) pb.grad[r * lb + j] += n.grad[r * (la + lb) + la + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// Batched matmul: a [..., M, K] x b [..., K, N] with identical leading dims,
// or b two-dimensional (shared across the batch).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check_contract(sa.size() >= 2 && sb.size() >= 2, "matmul needs rank >= 2");
    const int m = sa[sa.size() - 2], k = sa.back();
    const int kb = sb[sb.size() - 2], n = sb.back();
    check_shapes(k == kb, "matmul", sa, sb);
    const bool shared_b = sb.size() == 2;
    if (!shared_b)
        check_shapes(std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2), "matmul batch",
                     sa, sb);
    const std::int64_t batch = a.numel() / (static_cast<std::int64_t>(m) * k);
    Shape so(sa);
    so.back() = n;
    std::vector<S> out(batch * m * n, S(0));
    for (std::int64_t bi = 0; bi < batch; ++bi)
        gemm_nn(out.data() + bi * m * n, a.values().data() + bi * m * k,
                b.values().data() + (shared_b ? 0 : bi * k * n), m, n, k);
    return detail::make_op<S>(so, std::move(out), {a, b},
                              [m, n, k, batch, shared_b](TensorNode<S>& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::int64_t bi = 0; bi < batch; ++bi)
                gemm_nt(pa.grad.data() + bi * m * k, nd.grad.data() + bi * m * n,
                        pb.values.data() + (shared_b ? 0 : bi * k * n), m, k, n);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t bi = 0; bi < batch; ++bi)
                gemm_tn(pb.grad.data() + (shared_b ? 0 : bi * k * n),
                        pa.values.data() + bi * m * k, nd.grad.data() + bi * m * n, k, n, m);
        }
    });
}

// x [..., in] -> [..., out] with weight [out, in] and optional bias [out].
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>* bias = nullptr) {
    const Shape& sx = x.shape();
    const Shape& sw = weight.shape();
    check_contract(sw.size() == 2, "linear weight must be 2-D");
    const int in = sx.back(), out_dim = sw[0];
    check_shapes(in == sw[1], "linear", sx, sw);
    const std::int64_t rows = x.numel() / in;
    Shape so(sx);
    so.back() = out_dim;
    std::vector<S> out(rows * out_dim, S(0));
    if (bias) {
        check_shapes(bias->shape() == Shape{out_dim}, "linear bias", bias->shape(), {out_dim});
        for (std::int64_t r = 0; r < rows; ++r)
            std::copy_n(bias->values().begin(), out_dim, out.begin() + r * out_dim);
    }
    gemm_nt(out.data(), x.values().data(), weight.values().data(), static_cast<int>(rows), out_dim,
            in);
    std::vector<Tensor<S>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return detail::make_op<S>(so, std::move(out), std::move(inputs),
                              [rows, in, out_dim](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            gemm_nn(px.grad.data(), nd.grad.data(), pw.values.data(), static_cast<int>(rows), in,
                    out_dim);
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            gemm_tn(pw.grad.data(), nd.grad.data(), px.values.data(), out_dim, in,
                    static_cast<int>(rows));
        }
        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            auto& pbias = *nd.parents[2];
            pbias.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < out_dim; ++j) pbias.grad[j] += nd.grad[r * out_dim + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    const int w = x.dim(-1);
    check_shapes(gamma.shape() == Shape{w} && beta.shape() == Shape{w}, "layer_norm", x.shape(),
                 gamma.shape());
    const std::int64_t rows = x.numel() / w;
    std::vector<S> out(x.numel());
    std::vector<S> inv_sigma(rows), mu(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x.values().data() + r * w;
        S m = 0;
        for (int j = 0; j < w; ++j) m += xr[j];
        m /= static_cast<S>(w);
        S var = 0;
        for (int j = 0; j < w; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= static_cast<S>(w);
        const S is = S(1) / std::sqrt(var + eps);
        mu[r] = m;
        inv_sigma[r] = is;
        for (int j = 0; j < w; ++j)
            out[r * w + j] = (xr[j] - m) * is * gamma.values()[j] + beta.values()[j];
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x, gamma, beta},
                              [rows, w, mu, inv_sigma](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* g = nd.grad.data() + r * w;
            const S* xr = px.values.data() + r * w;
            const S is = inv_sigma[r], m = mu[r];
            if (pg.requires_grad || pb.requires_grad) {
                pg.ensure_grad();
                pb.ensure_grad();
                for (int j = 0; j < w; ++j) {
                    pg.grad[j] += g[j] * (xr[j] - m) * is;
                    pb.grad[j] += g[j];
                }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                // dL/dx = is * (gy - mean(gy) - xhat * mean(gy * xhat)), gy = g * gamma
                S mean_gy = 0, mean_gy_xhat = 0;
                for (int j = 0; j < w; ++j) {
                    const S xhat = (xr[j] - m) * is;
                    const S gy = g[j] * pg.values[j];
                    mean_gy += gy;
                    mean_gy_xhat += gy * xhat;
                }
                mean_gy /= static_cast<S>(w);
                mean_gy_xhat /= static_cast<S>(w);
                for (int j = 0; j < w; ++j) {
                    const S xhat = (xr[j] - m) * is;
                    const S gy = g[j] * pg.values[j];
                    px.grad[r * w + j] += is * (gy - mean_gy - xhat * mean_gy_xhat);
                }
            }
        }
    });
}

// Softmax over the last dimension.
template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
    const int w = x.dim(-1);
    const std::int64_t rows = x.numel() / w;
    std::vector<S> out(x.numel());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x.values().data() + r * w;
        S mx = xr[0];
        for (int j = 1; j < w; ++j) mx = std::max(mx, xr[j]);
        S sum = 0;
        for (int j = 0; j < w; ++j) {
            out[r * w + j] = std::exp(xr[j] - mx);
            sum += out[r * w + j];
        }
        const S inv = S(1) / sum;
        for (int j = 0; j < w; ++j) out[r * w + j] *= inv;
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x}, [rows, w](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        px.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* y = nd.values.data() + r * w;
            const S* g = nd.grad.data() + r * w;
            S dot = 0;
            for (int j = 0; j < w; ++j) dot += y[j] * g[j];
            for (int j = 0; j < w; ++j) px.grad[r * w + j] += y[j] * (g[j] - dot);
        }
    });
}

// Mean squared error over all elements.
template <class S>
Tensor<S> mse(const Tensor<S>& pred, const Tensor<S>& target) {
    check_shapes(pred.shape() == target.shape(), "mse", pred.shape(), target.shape());
    const std::int64_t n = pred.numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.values()[i]) - target.values()[i];
        acc += d * d;
    }
    std::vector<S> out{static_cast<S>(acc / static_cast<double>(n))};
    return detail::make_op<S>({1}, std::move(out), {pred, target}, [n](TensorNode<S>& nd) {
        auto& pp = *nd.parents[0];
        auto& pt = *nd.parents[1];
        const S g = nd.grad[0] * S(2) / static_cast<S>(n);
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                pp.grad[i] += g * (pp.values[i] - pt.values[i]);
        }
        if (pt.requires_grad) {
            pt.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                pt.grad[i] -= g * (pp.values[i] - pt.values[i]);
        }
    });
}

// Smooth L1 (Huber) with transition delta, mean over elements.
template <class S>
Tensor<S> smooth_l1(const Tensor<S>& pred, const Tensor<S>& target, S delta = S(1)) {
    check_shapes(pred.shape() == target.shape(), "smooth_l1", pred.shape(), target.shape());
    const std::int64_t n = pred.numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = std::abs(static_cast<double>(pred.values()[i]) - target.values()[i]);
        acc += d < delta ? 0.5 * d * d / delta : d - 0.5 * delta;
    }
    std::vector<S> out{static_cast<S>(acc / static_cast<double>(n))};
    return detail::make_op<S>({1}, std::move(out), {pred, target}, [n, delta](TensorNode<S>& nd) {
        auto& pp = *nd.parents[0];
        auto& pt = *nd.parents[1];
        const S g = nd.grad[0] / static_cast<S>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const S d = pp.values[i] - pt.values[i];
            const S slope = std::abs(d) < delta ? d / delta : (d > S(0) ? S(1) : S(-1));
            if (pp.requires_grad) {
                pp.ensure_grad();
                pp.grad[i] += g * slope;
            }
            if (pt.requires_grad) {
                pt.ensure_grad();
                pt.grad[i] -= g * slope;
            }
        }
    });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
    double acc = 0;
    for (auto v : x.values()) acc += static_cast<double>(v);
    std::vector<S> out{static_cast<S>(acc)};
    return detail::make_op<S>({1}, std::move(out), {x}, [](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        px.ensure_grad();
        for (auto& g : px.grad) g += nd.grad[0];
    });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
    return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// Frame differences along the time axis: [..., T, d] -> [..., T-1, d].
template <class S>
Tensor<S> time_diff(const Tensor<S>& x) {
    const Shape& sx = x.shape();
    check_contract(sx.size() >= 2 && sx[sx.size() - 2] >= 2, "time_diff needs at least 2 frames");
    const int t = sx[sx.size() - 2], d = sx.back();
    const std::int64_t batch = x.numel() / (static_cast<std::int64_t>(t) * d);
    Shape so(sx);
    so[so.size() - 2] = t - 1;
    std::vector<S> out(batch * (t - 1) * d);
    for (std::int64_t b = 0; b < batch; ++b) {
        const S* xb = x.values().data() + b * t * d;
        S* ob = out.data() + b * (t - 1) * d;
        for (int i = 0; i + 1 < t; ++i)
            for (int j = 0; j < d; ++j) ob[i * d + j] = xb[(i + 1) * d + j] - xb[i * d + j];
    }
    return detail::make_op<S>(so, std::move(out), {x}, [batch, t, d](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        px.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            const S* gb = nd.grad.data() + b * (t - 1) * d;
            S* xg = px.grad.data() + b * t * d;
            for (int i = 0; i + 1 < t; ++i)
                for (int j = 0; j < d; ++j) {
                    xg[(i + 1) * d + j] += gb[i * d + j];
                    xg[i * d + j] -= gb[i * d + j];
                }
        }
    });
}

// Rows scaled to unit L2 norm (plus eps for stability).
template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x, S eps = S(1e-12)) {
    const int w = x.dim(-1);
    const std::int64_t rows = x.numel() / w;
    std::vector<S> out(x.numel());
    std::vector<S> inv_norm(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x.values().data() + r * w;
        S nrm = 0;
        for (int j = 0; j < w; ++j) nrm += xr[j] * xr[j];
        const S in = S(1) / (std::sqrt(nrm) + eps);
        inv_norm[r] = in;
        for (int j = 0; j < w; ++j) out[r * w + j] = xr[j] * in;
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x},
                              [rows, w, inv_norm](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        px.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* y = nd.values.data() + r * w;
            const S* g = nd.grad.data() + r * w;
            S dot = 0;
            for (int j = 0; j < w; ++j) dot += y[j] * g[j];
            for (int j = 0; j < w; ++j)
                px.grad[r * w + j] += inv_norm[r] * (g[j] - y[j] * dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Embedding lookup and fused cross entropy
// ---------------------------------------------------------------------------

// ids indexes rows of table [V, W]; output shape = ids_shape + [W].
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids, const Shape& ids_shape) {
    check_contract(table.ndim() == 2, "embedding table must be 2-D");
    check_contract(numel_of(ids_shape) == static_cast<std::int64_t>(ids.size()),
                   "embedding ids shape mismatch");
    const int v = table.dim(0), w = table.dim(1);
    for (int id : ids)
        check_contract(id >= 0 && id < v,
                       "embedding id " + std::to_string(id) + " out of range [0, " +
                           std::to_string(v) + ")");
    Shape so(ids_shape);
    so.push_back(w);
    std::vector<S> out(ids.size() * w);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.values().begin() + static_cast<std::int64_t>(ids[i]) * w, w,
                    out.begin() + static_cast<std::int64_t>(i) * w);
    return detail::make_op<S>(so, std::move(out), {table}, [ids, w](TensorNode<S>& nd) {
        auto& pt = *nd.parents[0];
        pt.ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const S* g = nd.grad.data() + static_cast<std::int64_t>(i) * w;
            S* tg = pt.grad.data() + static_cast<std::int64_t>(ids[i]) * w;
            for (int j = 0; j < w; ++j) tg[j] += g[j];
        }
    });
}

// Token-level cross entropy over logits [..., V]; positions with weight 0 are
// excluded. Returns the mean NLL over included positions.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                        const std::vector<S>& position_weights) {
    const int v = logits.dim(-1);
    const std::int64_t rows = logits.numel() / v;
    check_contract(static_cast<std::int64_t>(targets.size()) == rows &&
                       targets.size() == position_weights.size(),
                   "cross_entropy target count mismatch");
    double total_w = 0;
    for (auto w : position_weights) total_w += static_cast<double>(w);
    check_contract(total_w > 0, "cross_entropy needs at least one weighted position");
    double loss = 0;
    std::vector<S> lse(rows), mx(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        if (position_weights[r] == S(0)) continue;
        check_contract(targets[r] >= 0 && targets[r] < v, "cross_entropy target id out of range");
        const S* xr = logits.values().data() + r * v;
        S m = xr[0];
        for (int j = 1; j < v; ++j) m = std::max(m, xr[j]);
        double s = 0;
        for (int j = 0; j < v; ++j) s += std::exp(static_cast<double>(xr[j] - m));
        const double l = static_cast<double>(m) + std::log(s);
        mx[r] = m;
        lse[r] = static_cast<S>(l);
        loss += position_weights[r] * (l - static_cast<double>(xr[targets[r]]));
    }
    std::vector<S> out{static_cast<S>(loss / total_w)};
    return detail::make_op<S>({1}, std::move(out), {logits},
                              [targets, position_weights, rows, v, lse, total_w](TensorNode<S>& nd) {
        auto& pl = *nd.parents[0];
        pl.ensure_grad();
        const S up = nd.grad[0];
        for (std::int64_t r = 0; r < rows; ++r) {
            if (position_weights[r] == S(0)) continue;
            const S scale = up * position_weights[r] / static_cast<S>(total_w);
            const S* xr = pl.values.data() + r * v;
            S* gr = pl.grad.data() + r * v;
            for (int j = 0; j < v; ++j)
                gr[j] += scale * (std::exp(xr[j] - lse[r]) - (j == targets[r] ? S(1) : S(0)));
        }
    });
}

// ---------------------------------------------------------------------------
// 1-D convolutions (channels-last: [B, T, C])
// ---------------------------------------------------------------------------

namespace detail {

// im2col for channels-last input: cols [L_out, k*Cin] per batch item.
template <class S>
void im2col_1d(const S* x, S* cols, int t, int cin, int k, int stride, int pad, int t_out) {
    for (int o = 0; o < t_out; ++o) {
        S* row = cols + static_cast<std::int64_t>(o) * k * cin;
        const int t0 = o * stride - pad;
        for (int j = 0; j < k; ++j) {
            const int ti = t0 + j;
            if (ti >= 0 && ti < t)
                std::copy_n(x + static_cast<std::int64_t>(ti) * cin, cin, row + j * cin);
            else
                std::fill_n(row + j * cin, cin, S(0));
        }
    }
}

template <class S>
void col2im_1d(const S* cols, S* x, int t, int cin, int k, int stride, int pad, int t_out) {
    for (int o = 0; o < t_out; ++o) {
        const S* row = cols + static_cast<std::int64_t>(o) * k * cin;
        const int t0 = o * stride - pad;
        for (int j = 0; j < k; ++j) {
            const int ti = t0 + j;
            if (ti >= 0 && ti < t) {
                S* xr = x + static_cast<std::int64_t>(ti) * cin;
                for (int c = 0; c < cin; ++c) xr[c] += row[j * cin + c];
            }
        }
    }
}

}  // namespace detail

// x [B, T, Cin], weight [Cout, k*Cin], bias [Cout] -> [B, T_out, Cout].
template <class S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int kernel,
                 int stride, int pad) {
    check_contract(x.ndim() == 3, "conv1d input must be [B, T, C]");
    const int b = x.dim(0), t = x.dim(1), cin = x.dim(2);
    const int cout = weight.dim(0);
    check_shapes(weight.dim(1) == kernel * cin, "conv1d", x.shape(), weight.shape());
    const int t_out = (t + 2 * pad - kernel) / stride + 1;
    check_contract(t_out > 0, "conv1d output length would be empty");
    std::vector<S> out(static_cast<std::int64_t>(b) * t_out * cout);
    std::vector<S> cols(static_cast<std::int64_t>(t_out) * kernel * cin);
    for (int bi = 0; bi < b; ++bi) {
        detail::im2col_1d(x.values().data() + static_cast<std::int64_t>(bi) * t * cin, cols.data(),
                          t, cin, kernel, stride, pad, t_out);
        S* ob = out.data() + static_cast<std::int64_t>(bi) * t_out * cout;
        for (int o = 0; o < t_out; ++o)
            std::copy_n(bias.values().begin(), cout, ob + static_cast<std::int64_t>(o) * cout);
        gemm_nt(ob, cols.data(), weight.values().data(), t_out, cout, kernel * cin);
    }
    return detail::make_op<S>({b, t_out, cout}, std::move(out), {x, weight, bias},
                              [b, t, cin, cout, kernel, stride, pad, t_out](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        std::vector<S> cols(static_cast<std::int64_t>(t_out) * kernel * cin);
        std::vector<S> dcols(cols.size());
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int bi = 0; bi < b; ++bi) {
            const S* gb = nd.grad.data() + static_cast<std::int64_t>(bi) * t_out * cout;
            detail::im2col_1d(px.values.data() + static_cast<std::int64_t>(bi) * t * cin,
                              cols.data(), t, cin, kernel, stride, pad, t_out);
            if (pw.requires_grad)
                gemm_tn(pw.grad.data(), gb, cols.data(), cout, kernel * cin, t_out);
            if (pb.requires_grad)
                for (int o = 0; o < t_out; ++o)
                    for (int c = 0; c < cout; ++c)
                        pb.grad[c] += gb[static_cast<std::int64_t>(o) * cout + c];
            if (px.requires_grad) {
                std::fill(dcols.begin(), dcols.end(), S(0));
                gemm_nn(dcols.data(), gb, pw.values.data(), t_out, kernel * cin, cout);
                detail::col2im_1d(dcols.data(),
                                  px.grad.data() + static_cast<std::int64_t>(bi) * t * cin, t, cin,
                                  kernel, stride, pad, t_out);
            }
        }
    });
}

// Transposed 1-D convolution. x [B, T, Cin], weight [Cin, k*Cout],
// bias [Cout] -> [B, (T-1)*stride - 2*pad + k, Cout].
template <class S>
Tensor<S> conv1d_transpose(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           int kernel, int stride, int pad) {
    check_contract(x.ndim() == 3, "conv1d_transpose input must be [B, T, C]");
    const int b = x.dim(0), t = x.dim(1), cin = x.dim(2);
    check_shapes(weight.dim(0) == cin, "conv1d_transpose", x.shape(), weight.shape());
    const int cout = weight.dim(1) / kernel;
    const int t_out = (t - 1) * stride - 2 * pad + kernel;
    check_contract(t_out > 0, "conv1d_transpose output length would be empty");
    std::vector<S> out(static_cast<std::int64_t>(b) * t_out * cout);
    std::vector<S> expanded(static_cast<std::int64_t>(t) * kernel * cout);
    for (int bi = 0; bi < b; ++bi) {
        S* ob = out.data() + static_cast<std::int64_t>(bi) * t_out * cout;
        for (int o = 0; o < t_out; ++o)
            std::copy_n(bias.values().begin(), cout, ob + static_cast<std::int64_t>(o) * cout);
        std::fill(expanded.begin(), expanded.end(), S(0));
        gemm_nn(expanded.data(), x.values().data() + static_cast<std::int64_t>(bi) * t * cin,
                weight.values().data(), t, kernel * cout, cin);
        for (int ti = 0; ti < t; ++ti)
            for (int j = 0; j < kernel; ++j) {
                const int o = ti * stride + j - pad;
                if (o < 0 || o >= t_out) continue;
                const S* src = expanded.data() + (static_cast<std::int64_t>(ti) * kernel + j) * cout;
                S* dst = ob + static_cast<std::int64_t>(o) * cout;
                for (int c = 0; c < cout; ++c) dst[c] += src[c];
            }
    }
    return detail::make_op<S>({b, t_out, cout}, std::move(out), {x, weight, bias},
                              [b, t, cin, cout, kernel, stride, pad, t_out](TensorNode<S>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        auto& pb = *nd.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<S> dexp(static_cast<std::int64_t>(t) * kernel * cout);
        for (int bi = 0; bi < b; ++bi) {
            const S* gb = nd.grad.data() + static_cast<std::int64_t>(bi) * t_out * cout;
            if (pb.requires_grad)
                for (int o = 0; o < t_out; ++o)
                    for (int c = 0; c < cout; ++c)
                        pb.grad[c] += gb[static_cast<std::int64_t>(o) * cout + c];
            // Gather upstream gradient into the expanded layout.
            std::fill(dexp.begin(), dexp.end(), S(0));
            for (int ti = 0; ti < t; ++ti)
                for (int j = 0; j < kernel; ++j) {
                    const int o = ti * stride + j - pad;
                    if (o < 0 || o >= t_out) continue;
                    std::copy_n(gb + static_cast<std::int64_t>(o) * cout, cout,
                                dexp.begin() + (static_cast<std::int64_t>(ti) * kernel + j) * cout);
                }
            if (px.requires_grad)
                gemm_nt(px.grad.data() + static_cast<std::int64_t>(bi) * t * cin, dexp.data(),
                        pw.values.data(), t, cin, kernel * cout);
            if (pw.requires_grad)
                gemm_tn(pw.grad.data(),
                        px.values.data() + static_cast<std::int64_t>(bi) * t * cin, dexp.data(),
                        cin, kernel * cout, t);
        }
    });
}

}  // namespace mgpt2::nn
