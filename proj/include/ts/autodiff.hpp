#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ts/tensor.hpp"

namespace ts::nn {

// Reverse-mode tape. Every op builds a node holding its value, links to its
// inputs and a closure that routes the incoming gradient to them. backward()
// walks the graph once in reverse topological order.
template <class T>
struct NodeT;

template <class T>
using VarT = std::shared_ptr<NodeT<T>>;

template <class T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool needs_grad = false;  // true if this node or any ancestor is a parameter
    std::vector<VarT<T>> parents;
    std::function<void(NodeT<T>&)> backward_fn;
    const char* op = "";

    TensorT<T>& ensure_grad() {
        if (grad.data.empty() && value.numel() > 0) grad = TensorT<T>(value.shape, T(0));
        return grad;
    }
    bool has_grad() const { return !grad.data.empty(); }
    void zero_grad() { grad = TensorT<T>(); }
};

template <class T>
VarT<T> constant(TensorT<T> v, const char* op = "const") {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(v);
    n->op = op;
    return n;
}

template <class T>
VarT<T> parameter(TensorT<T> v) {
    auto n = constant(std::move(v), "param");
    n->requires_grad = true;
    n->needs_grad = true;
    return n;
}

template <class T>
VarT<T> make_node(TensorT<T> v, std::vector<VarT<T>> parents,
                  std::function<void(NodeT<T>&)> bw, const char* op) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(v);
    n->parents = std::move(parents);
    for (auto& p : n->parents) n->needs_grad = n->needs_grad || p->needs_grad;
    if (n->needs_grad) n->backward_fn = std::move(bw);
    n->op = op;
    return n;
}

// Run reverse-mode accumulation from a scalar loss. Gradients accumulate into
// every reachable node with needs_grad; parameters keep theirs until zeroed.
template <class T>
void backward(const VarT<T>& loss) {
    if (loss->value.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(loss->value.shape));
    // Iterative post-order DFS.
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<T>* p = node->parents[idx++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
}

template <class T>
void zero_grads(const std::vector<VarT<T>>& params) {
    for (auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Elementwise and affine ops
// ---------------------------------------------------------------------------

// add supports: identical shapes; b scalar; b a vector broadcast over the last
// dimension of a (bias add).
template <class T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    const auto& av = a->value;
    const auto& bv = b->value;
    TensorT<T> out = av;
    if (bv.shape == av.shape) {
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    } else if (bv.numel() == 1) {
        for (auto& x : out.data) x += bv.data[0];
    } else if (bv.rank() == 1 && !av.shape.empty() && av.shape.back() == bv.shape[0]) {
        int64_t n = bv.shape[0];
        int64_t rows = av.numel() / n;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < n; ++j) out.data[r * n + j] += bv.data[j];
    } else {
        throw ContractError("add: incompatible shapes " + shape_str(av.shape) + " and " +
                            shape_str(bv.shape));
    }
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (pa->needs_grad) {
            auto& ga = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        }
        if (pb->needs_grad) {
            auto& gb = pb->ensure_grad();
            if (pb->value.shape == self.value.shape) {
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
            } else if (pb->value.numel() == 1) {
                T s = 0;
                for (T v : g.data) s += v;
                gb.data[0] += s;
            } else {
                int64_t n = pb->value.shape[0];
                int64_t rows = g.numel() / n;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < n; ++j) gb.data[j] += g.data[r * n + j];
            }
        }
    }, "add");
}

template <class T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.shape != b->value.shape && b->value.numel() != 1)
        throw ContractError("sub: incompatible shapes");
    TensorT<T> out = a->value;
    if (b->value.numel() == 1) {
        for (auto& x : out.data) x -= b->value.data[0];
    } else {
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b->value.data[i];
    }
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (pa->needs_grad) {
            auto& ga = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        }
        if (pb->needs_grad) {
            auto& gb = pb->ensure_grad();
            if (pb->value.numel() == 1) {
                T s = 0;
                for (T v : g.data) s += v;
                gb.data[0] -= s;
            } else {
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
            }
        }
    }, "sub");
}

template <class T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    if (a->value.shape != b->value.shape)
        throw ContractError("mul: shapes must match elementwise");
    TensorT<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (pa->needs_grad) {
            auto& ga = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * pb->value.data[i];
        }
        if (pb->needs_grad) {
            auto& gb = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * pa->value.data[i];
        }
    }, "mul");
}

// alpha * a + beta, elementwise with scalar constants.
template <class T>
VarT<T> affine(const VarT<T>& a, T alpha, T beta) {
    TensorT<T> out = a->value;
    for (auto& x : out.data) x = alpha * x + beta;
    return make_node<T>(std::move(out), {a}, [alpha](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga.data[i] += alpha * self.grad.data[i];
    }, "affine");
}

template <class T>
VarT<T> smul(const VarT<T>& a, T alpha) {
    return affine(a, alpha, T(0));
}

template <class T>
VarT<T> unary_op(const VarT<T>& a, const char* name, T (*fwd)(T), T (*bwd)(T, T)) {
    TensorT<T> out = a->value;
    for (auto& x : out.data) x = fwd(x);
    return make_node<T>(std::move(out), {a}, [bwd](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            ga.data[i] += self.grad.data[i] * bwd(pa->value.data[i], self.value.data[i]);
    }, name);
}

template <class T>
VarT<T> relu(const VarT<T>& a) {
    return unary_op<T>(a, "relu",
                       [](T x) { return x > T(0) ? x : T(0); },
                       [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
VarT<T> gelu(const VarT<T>& a) {
    return unary_op<T>(a, "gelu",
                       [](T x) {
                           double xd = static_cast<double>(x);
                           return static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd / 1.4142135623730951)));
                       },
                       [](T x, T) {
                           double xd = static_cast<double>(x);
                           double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730951));
                           double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
                           return static_cast<T>(cdf + xd * pdf);
                       });
}

template <class T>
VarT<T> sigmoid(const VarT<T>& a) {
    return unary_op<T>(a, "sigmoid",
                       [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <class T>
VarT<T> tanh_op(const VarT<T>& a) {
    return unary_op<T>(a, "tanh",
                       [](T x) { return static_cast<T>(std::tanh(static_cast<double>(x))); },
                       [](T, T y) { return T(1) - y * y; });
}

template <class T>
VarT<T> logv(const VarT<T>& a) {
    return unary_op<T>(a, "log",
                       [](T x) { return static_cast<T>(std::log(static_cast<double>(x))); },
                       [](T x, T) { return T(1) / x; });
}

// Gradient is zero where the input was clamped.
template <class T>
VarT<T> clampv(const VarT<T>& a, T lo, T hi) {
    TensorT<T> out = a->value;
    for (auto& x : out.data) x = std::min(hi, std::max(lo, x));
    return make_node<T>(std::move(out), {a}, [lo, hi](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            T x = pa->value.data[i];
            if (x > lo && x < hi) ga.data[i] += self.grad.data[i];
        }
    }, "clamp");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    const auto& av = a->value;
    const auto& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw ContractError("matmul: need (m,k)x(k,n), got " + shape_str(av.shape) + " x " +
                            shape_str(bv.shape));
    int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    TensorT<T> out(Shape{m, n}, T(0));
    matmul_acc(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
    return make_node<T>(std::move(out), {a, b}, [m, k, n](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (pa->needs_grad)
            matmul_acc_bt(g.ptr(), pb->value.ptr(), pa->ensure_grad().ptr(), m, n, k);
        if (pb->needs_grad)
            matmul_acc_at(pa->value.ptr(), g.ptr(), pb->ensure_grad().ptr(), k, m, n);
    }, "matmul");
}

// x (..., k) times W (k, n) plus optional bias (n); leading dims are batch.
template <class T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b = nullptr) {
    const auto& xv = x->value;
    const auto& wv = w->value;
    if (xv.rank() < 1 || wv.rank() != 2 || xv.shape.back() != wv.shape[0])
        throw ContractError("linear: got x " + shape_str(xv.shape) + ", W " + shape_str(wv.shape));
    int64_t k = wv.shape[0], n = wv.shape[1];
    int64_t rows = xv.numel() / k;
    Shape out_shape = xv.shape;
    out_shape.back() = n;
    TensorT<T> out(out_shape, T(0));
    matmul_acc(xv.ptr(), wv.ptr(), out.ptr(), rows, k, n);
    if (b) {
        if (b->value.numel() != n) throw ContractError("linear: bias dim mismatch");
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < n; ++j) out.data[r * n + j] += b->value.data[j];
    }
    std::vector<VarT<T>> parents{x, w};
    if (b) parents.push_back(b);
    return make_node<T>(std::move(out), std::move(parents), [rows, k, n](NodeT<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const auto& g = self.grad;
        if (px->needs_grad)
            matmul_acc_bt(g.ptr(), pw->value.ptr(), px->ensure_grad().ptr(), rows, n, k);
        if (pw->needs_grad)
            matmul_acc_at(px->value.ptr(), g.ptr(), pw->ensure_grad().ptr(), k, rows, n);
        if (self.parents.size() == 3 && self.parents[2]->needs_grad) {
            auto& gb = self.parents[2]->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < n; ++j) gb.data[j] += g.data[r * n + j];
        }
    }, "linear");
}

// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n); transb treats b as (B,n,k).
template <class T>
VarT<T> bmm(const VarT<T>& a, const VarT<T>& b, bool transb = false) {
    const auto& av = a->value;
    const auto& bv = b->value;
    if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0])
        throw ContractError("bmm: need 3-d tensors with equal batch");
    int64_t B = av.shape[0], m = av.shape[1], k = av.shape[2];
    int64_t n = transb ? bv.shape[1] : bv.shape[2];
    int64_t bk = transb ? bv.shape[2] : bv.shape[1];
    if (bk != k) throw ContractError("bmm: inner dims mismatch");
    TensorT<T> out(Shape{B, m, n}, T(0));
    for (int64_t i = 0; i < B; ++i) {
        const T* ap = av.ptr() + i * m * k;
        const T* bp = bv.ptr() + i * (transb ? n * k : k * n);
        T* cp = out.ptr() + i * m * n;
        if (transb)
            matmul_acc_bt(ap, bp, cp, m, k, n);
        else
            matmul_acc(ap, bp, cp, m, k, n);
    }
    return make_node<T>(std::move(out), {a, b}, [B, m, k, n, transb](NodeT<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        for (int64_t i = 0; i < B; ++i) {
            const T* gp = g.ptr() + i * m * n;
            const T* ap = pa->value.ptr() + i * m * k;
            const T* bp = pb->value.ptr() + i * (transb ? n * k : k * n);
            if (pa->needs_grad) {
                T* gap = pa->ensure_grad().ptr() + i * m * k;
                if (transb)
                    matmul_acc(gp, bp, gap, m, n, k);  // dA = G * B  (B stored (n,k))
                else
                    matmul_acc_bt(gp, bp, gap, m, n, k);  // dA = G * B^T
            }
            if (pb->needs_grad) {
                T* gbp = pb->ensure_grad().ptr() + i * (transb ? n * k : k * n);
                if (transb)
                    matmul_acc_at(gp, ap, gbp, n, m, k);  // dB = G^T * A -> (n,k)
                else
                    matmul_acc_at(ap, gp, gbp, k, m, n);  // dB = A^T * G -> (k,n)
            }
        }
    }, "bmm");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
VarT<T> reshape(const VarT<T>& a, Shape s) {
    TensorT<T> out = a->value.reshaped(std::move(s));
    return make_node<T>(std::move(out), {a}, [](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) ga.data[i] += self.grad.data[i];
    }, "reshape");
}

template <class T>
VarT<T> concat_last(const std::vector<VarT<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_last: no inputs");
    Shape base = parts[0]->value.shape;
    int64_t total = 0;
    for (auto& p : parts) {
        Shape s = p->value.shape;
        if (s.size() != base.size()) throw ContractError("concat_last: rank mismatch");
        for (size_t i = 0; i + 1 < s.size(); ++i)
            if (s[i] != base[i]) throw ContractError("concat_last: leading dims mismatch");
        total += s.back();
    }
    Shape out_shape = base;
    out_shape.back() = total;
    int64_t rows = shape_numel(out_shape) / total;
    TensorT<T> out(out_shape);
    std::vector<int64_t> widths;
    for (auto& p : parts) widths.push_back(p->value.shape.back());
    for (int64_t r = 0; r < rows; ++r) {
        int64_t off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            int64_t w = widths[pi];
            const T* src = parts[pi]->value.ptr() + r * w;
            std::copy(src, src + w, out.ptr() + r * total + off);
            off += w;
        }
    }
    return make_node<T>(std::move(out), parts, [widths, rows, total](NodeT<T>& self) {
        int64_t off = 0;
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
            int64_t w = widths[pi];
            auto& p = self.parents[pi];
            if (p->needs_grad) {
                auto& gp = p->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < w; ++j)
                        gp.data[r * w + j] += self.grad.data[r * total + off + j];
            }
            off += w;
        }
    }, "concat");
}

template <class T>
VarT<T> slice_last(const VarT<T>& a, int64_t start, int64_t len) {
    const auto& av = a->value;
    int64_t n = av.shape.back();
    if (start < 0 || start + len > n) throw ContractError("slice_last: out of range");
    Shape out_shape = av.shape;
    out_shape.back() = len;
    int64_t rows = av.numel() / n;
    TensorT<T> out(out_shape);
    for (int64_t r = 0; r < rows; ++r)
        std::copy(av.ptr() + r * n + start, av.ptr() + r * n + start + len, out.ptr() + r * len);
    return make_node<T>(std::move(out), {a}, [start, len, n, rows](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < len; ++j)
                ga.data[r * n + start + j] += self.grad.data[r * len + j];
    }, "slice");
}

// (B,T,D) -> (B,D), picking token index t.
template <class T>
VarT<T> select_token(const VarT<T>& a, int64_t t) {
    const auto& av = a->value;
    if (av.rank() != 3) throw ContractError("select_token: need (B,T,D)");
    int64_t B = av.shape[0], Tn = av.shape[1], D = av.shape[2];
    if (t < 0 || t >= Tn) throw ContractError("select_token: index out of range");
    TensorT<T> out(Shape{B, D});
    for (int64_t b = 0; b < B; ++b)
        std::copy(av.ptr() + (b * Tn + t) * D, av.ptr() + (b * Tn + t) * D + D, out.ptr() + b * D);
    return make_node<T>(std::move(out), {a}, [B, Tn, D, t](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < D; ++j)
                ga.data[(b * Tn + t) * D + j] += self.grad.data[b * D + j];
    }, "select_token");
}

// Prepend one shared learned token: (B,l,D) + (D) -> (B,l+1,D).
template <class T>
VarT<T> prepend_token(const VarT<T>& tokens, const VarT<T>& cls) {
    const auto& tv = tokens->value;
    if (tv.rank() != 3 || cls->value.numel() != tv.shape[2])
        throw ContractError("prepend_token: shape mismatch");
    int64_t B = tv.shape[0], L = tv.shape[1], D = tv.shape[2];
    TensorT<T> out(Shape{B, L + 1, D});
    for (int64_t b = 0; b < B; ++b) {
        std::copy(cls->value.ptr(), cls->value.ptr() + D, out.ptr() + b * (L + 1) * D);
        std::copy(tv.ptr() + b * L * D, tv.ptr() + (b + 1) * L * D,
                  out.ptr() + b * (L + 1) * D + D);
    }
    return make_node<T>(std::move(out), {tokens, cls}, [B, L, D](NodeT<T>& self) {
        auto& pt = self.parents[0];
        auto& pc = self.parents[1];
        if (pt->needs_grad) {
            auto& gt = pt->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < L * D; ++j)
                    gt.data[b * L * D + j] += self.grad.data[b * (L + 1) * D + D + j];
        }
        if (pc->needs_grad) {
            auto& gc = pc->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < D; ++j) gc.data[j] += self.grad.data[b * (L + 1) * D + j];
        }
    }, "prepend_token");
}

// Row lookup into an embedding table: table (N,D), indices flat -> out_shape+(D).
// Backward scatter-adds into the table.
template <class T>
VarT<T> gather_rows(const VarT<T>& table, std::vector<int64_t> indices, Shape lead_shape) {
    const auto& tv = table->value;
    if (tv.rank() != 2) throw ContractError("gather_rows: table must be (N,D)");
    int64_t N = tv.shape[0], D = tv.shape[1];
    if (shape_numel(lead_shape) != static_cast<int64_t>(indices.size()))
        throw ContractError("gather_rows: index count mismatch");
    for (int64_t ix : indices)
        if (ix < 0 || ix >= N) throw ContractError("gather_rows: index out of range");
    Shape out_shape = lead_shape;
    out_shape.push_back(D);
    TensorT<T> out(out_shape);
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy(tv.ptr() + indices[i] * D, tv.ptr() + (indices[i] + 1) * D, out.ptr() + i * D);
    return make_node<T>(std::move(out), {table},
                        [idx = std::move(indices), D](NodeT<T>& self) {
                            auto& pt = self.parents[0];
                            if (!pt->needs_grad) return;
                            auto& gt = pt->ensure_grad();
                            for (size_t i = 0; i < idx.size(); ++i)
                                for (int64_t j = 0; j < D; ++j)
                                    gt.data[idx[i] * D + j] += self.grad.data[i * D + j];
                        }, "gather");
}

// ---------------------------------------------------------------------------
// Normalization, softmax, dropout
// ---------------------------------------------------------------------------

template <class T>
VarT<T> softmax_last(const VarT<T>& a) {
    TensorT<T> out = softmax(a->value, static_cast<int>(a->value.rank()) - 1);
    int64_t n = a->value.shape.back();
    int64_t rows = a->value.numel() / n;
    return make_node<T>(std::move(out), {a}, [n, rows](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.ptr() + r * n;
            const T* g = self.grad.ptr() + r * n;
            T dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
            T* d = ga.ptr() + r * n;
            for (int64_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dot);
        }
    }, "softmax");
}

// Layer normalization over the last dimension with learned gamma/beta.
template <class T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, T eps = T(1e-5)) {
    const auto& xv = x->value;
    int64_t D = xv.shape.back();
    if (gamma->value.numel() != D || beta->value.numel() != D)
        throw ContractError("layer_norm: gamma/beta must match last dim");
    int64_t rows = xv.numel() / D;
    TensorT<T> out(xv.shape);
    TensorT<T> xhat(xv.shape);
    TensorT<T> inv_std(Shape{rows});
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * D;
        T mean = 0;
        for (int64_t j = 0; j < D; ++j) mean += xr[j];
        mean /= static_cast<T>(D);
        T var = 0;
        for (int64_t j = 0; j < D; ++j) {
            T d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(D);
        T is = T(1) / std::sqrt(var + eps);
        inv_std.data[r] = is;
        for (int64_t j = 0; j < D; ++j) {
            T xh = (xr[j] - mean) * is;
            xhat.data[r * D + j] = xh;
            out.data[r * D + j] = gamma->value.data[j] * xh + beta->value.data[j];
        }
    }
    return make_node<T>(std::move(out), {x, gamma, beta},
        [rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<T>& self) {
            auto& px = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            const auto& g = self.grad;
            if (pg->needs_grad) {
                auto& gg = pg->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < D; ++j)
                        gg.data[j] += g.data[r * D + j] * xhat.data[r * D + j];
            }
            if (pb->needs_grad) {
                auto& gb = pb->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < D; ++j) gb.data[j] += g.data[r * D + j];
            }
            if (px->needs_grad) {
                auto& gx = px->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g.ptr() + r * D;
                    const T* xh = xhat.ptr() + r * D;
                    T is = inv_std.data[r];
                    T sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int64_t j = 0; j < D; ++j) {
                        T dxh = gr[j] * pg->value.data[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                    }
                    T invD = T(1) / static_cast<T>(D);
                    for (int64_t j = 0; j < D; ++j) {
                        T dxh = gr[j] * pg->value.data[j];
                        gx.data[r * D + j] +=
                            is * (dxh - invD * sum_dxhat - xh[j] * invD * sum_dxhat_xhat);
                    }
                }
            }
        }, "layer_norm");
}

// Inverted dropout; mask drawn from rng when training, identity otherwise.
template <class T>
VarT<T> dropout(const VarT<T>& a, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return a;
    TensorT<T> mask(a->value.shape);
    T scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask.data) m = rng.uniform() < p ? T(0) : scale;
    TensorT<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= mask.data[i];
    return make_node<T>(std::move(out), {a}, [mask = std::move(mask)](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            ga.data[i] += self.grad.data[i] * mask.data[i];
    }, "dropout");
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
VarT<T> sum_all(const VarT<T>& a) {
    T s = 0;
    for (T v : a->value.data) s += v;
    return make_node<T>(TensorT<T>::scalar(s), {a}, [](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad.data[0];
        for (auto& v : ga.data) v += g;
    }, "sum");
}

template <class T>
VarT<T> mean_all(const VarT<T>& a) {
    T s = 0;
    for (T v : a->value.data) s += v;
    T n = static_cast<T>(a->value.numel());
    return make_node<T>(TensorT<T>::scalar(s / n), {a}, [n](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad.data[0] / n;
        for (auto& v : ga.data) v += g;
    }, "mean");
}

// mean((a - target)^2) with a constant target; fused for the training loop.
template <class T>
VarT<T> mse_loss(const VarT<T>& a, const TensorT<T>& target) {
    if (a->value.shape != target.shape) throw ContractError("mse_loss: shape mismatch");
    T n = static_cast<T>(a->value.numel());
    T s = 0;
    for (int64_t i = 0; i < a->value.numel(); ++i) {
        T d = a->value.data[i] - target.data[i];
        s += d * d;
    }
    return make_node<T>(TensorT<T>::scalar(s / n), {a}, [target, n](NodeT<T>& self) {
        auto& pa = self.parents[0];
        if (!pa->needs_grad) return;
        auto& ga = pa->ensure_grad();
        T g = self.grad.data[0] * T(2) / n;
        for (int64_t i = 0; i < ga.numel(); ++i)
            ga.data[i] += g * (pa->value.data[i] - target.data[i]);
    }, "mse");
}

}  // namespace ts::nn
