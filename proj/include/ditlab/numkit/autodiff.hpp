#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

// Reverse-mode tape. Nodes are refcounted; a graph lives exactly as long as
// someone holds a Var into it. Leaves with requires_grad=true are the
// trainable parameters; their grads accumulate across backward() calls until
// zeroed by the optimizer.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
    uint64_t id = 0;
    const char* op = "leaf";

    Tensor& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor(value.shape());
        return grad;
    }

    void zero_grad() {
        if (grad.numel() == value.numel()) grad.fill(0.0);
    }
};

namespace detail {
inline uint64_t next_node_id() {
    static uint64_t counter = 0;
    return ++counter;
}

inline Var make_node(Tensor value, const char* op, std::vector<Var> parents,
                     std::function<void(Node&)> backward_fn) {
    value.require_finite(op);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    n->id = next_node_id();
    return n;
}

inline void add_into(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.numel(); ++i) dst.at(i) += src.at(i);
}
}  // namespace detail

/// Trainable leaf.
inline Var param(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->id = detail::next_node_id();
    return n;
}

/// Non-trainable leaf (inputs, tables).
inline Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = false;
    n->id = detail::next_node_id();
    return n;
}

/// Value passes through, gradient does not (stop-gradient).
inline Var detach(const Var& a) { return constant(a->value); }

// ---------------------------------------------------------------------------
// Binary elementwise ops. Shapes must match exactly, or the rhs shape must be
// a suffix of the lhs shape (bias/row broadcast), or the rhs is a scalar.
// ---------------------------------------------------------------------------

namespace detail {
enum class Bcast { same, suffix, scalar };

inline Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.numel() == 1) return Bcast::scalar;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() < as.size() &&
        std::equal(bs.begin(), bs.end(), as.end() - static_cast<long>(bs.size()))) {
        return Bcast::suffix;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
}

// reduce a grad of a's shape down to b's (suffix or scalar) shape
inline Tensor reduce_to(const Tensor& g, const Tensor& like, Bcast k) {
    if (k == Bcast::same) return g;
    Tensor out(like.shape());
    if (k == Bcast::scalar) {
        double s = 0.0;
        for (size_t i = 0; i < g.numel(); ++i) s += g.at(i);
        out.at(0) = s;
        return out;
    }
    size_t inner = like.numel();
    size_t outer = g.numel() / inner;
    for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) out.at(i) += g.at(o * inner + i);
    }
    return out;
}

template <class FwdF, class DaF, class DbF>
Var binary_op(const Var& a, const Var& b, const char* op, FwdF f, DaF da, DbF db) {
    Bcast k = bcast_kind(a->value, b->value, op);
    Tensor out(a->value.shape());
    size_t inner = (k == Bcast::same) ? a->value.numel() : b->value.numel();
    for (size_t i = 0; i < out.numel(); ++i) {
        double bv = (k == Bcast::scalar) ? b->value.at(0) : b->value.at(i % inner);
        out.at(i) = f(a->value.at(i), bv);
    }
    return make_node(std::move(out), op, {a, b}, [a, b, k, inner, da, db](Node& self) {
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (size_t i = 0; i < self.grad.numel(); ++i) {
                double bv = (k == Bcast::scalar) ? b->value.at(0) : b->value.at(i % inner);
                ga.at(i) += self.grad.at(i) * da(a->value.at(i), bv);
            }
        }
        if (b->requires_grad) {
            Tensor gb_full(a->value.shape());
            for (size_t i = 0; i < self.grad.numel(); ++i) {
                double bv = (k == Bcast::scalar) ? b->value.at(0) : b->value.at(i % inner);
                gb_full.at(i) = self.grad.at(i) * db(a->value.at(i), bv);
            }
            Tensor gb = reduce_to(gb_full, b->value, k);
            add_into(b->ensure_grad(), gb);
        }
    });
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    return detail::binary_op(a, b, "add",
                             [](double x, double y) { return x + y; },
                             [](double, double) { return 1.0; },
                             [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary_op(a, b, "sub",
                             [](double x, double y) { return x - y; },
                             [](double, double) { return 1.0; },
                             [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary_op(a, b, "mul",
                             [](double x, double y) { return x * y; },
                             [](double, double y) { return y; },
                             [](double x, double) { return x; });
}

// ---------------------------------------------------------------------------
// Unary elementwise ops
// ---------------------------------------------------------------------------

namespace detail {
template <class FwdF, class DF>
Var unary_op(const Var& a, const char* op, FwdF f, DF df) {
    Tensor out(a->value.shape());
    for (size_t i = 0; i < out.numel(); ++i) out.at(i) = f(a->value.at(i));
    return make_node(std::move(out), op, {a}, [a, df](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) {
            ga.at(i) += self.grad.at(i) * df(a->value.at(i), self.value.at(i));
        }
    });
}
}  // namespace detail

inline Var scale(const Var& a, double c) {
    return detail::unary_op(a, "scale",
                            [c](double x) { return c * x; },
                            [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
    return detail::unary_op(a, "add_scalar",
                            [c](double x) { return x + c; },
                            [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var square(const Var& a) {
    return detail::unary_op(a, "square",
                            [](double x) { return x * x; },
                            [](double x, double) { return 2.0 * x; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary_op(a, "sigmoid",
                            [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(const Var& a) {
    return detail::unary_op(a, "silu",
                            [](double x) { return x / (1.0 + std::exp(-x)); },
                            [](double x, double) {
                                double s = 1.0 / (1.0 + std::exp(-x));
                                return s * (1.0 + x * (1.0 - s));
                            });
}

inline Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(a, "gelu",
                            [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                            [=](double x, double) {
                                return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                                       x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                            });
}

inline Var tanh_op(const Var& a) {
    return detail::unary_op(a, "tanh",
                            [](double x) { return std::tanh(x); },
                            [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D)
// ---------------------------------------------------------------------------

namespace detail {
// c (m x n) += a (m x k) * b (k x n), cache-friendly ikj order
inline void matmul_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            double av = ai[p];
            const double* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c (m x n) += a (k x m)^T * b (k x n)
inline void matmul_at_b_acc(const double* a, const double* b, double* c, size_t k, size_t m, size_t n) {
    for (size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            double av = ap[i];
            double* ci = c + i * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c (m x k) += a (m x n) * b (k x n)^T
inline void matmul_a_bt_acc(const double* a, const double* b, double* c, size_t m, size_t n, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
            ci[p] += s;
        }
    }
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2) throw ShapeError("matmul: expects 2-d tensors");
    size_t m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
    if (b->value.rows() != k) {
        throw ShapeError("matmul: inner extents disagree " + a->value.shape_str() + " vs " + b->value.shape_str());
    }
    Tensor out({m, n});
    detail::matmul_acc(a->value.data(), b->value.data(), out.data(), m, k, n);
    return detail::make_node(std::move(out), "matmul", {a, b}, [a, b, m, k, n](Node& self) {
        if (a->requires_grad) {
            detail::matmul_a_bt_acc(self.grad.data(), b->value.data(), a->ensure_grad().data(), m, n, k);
        }
        if (b->requires_grad) {
            detail::matmul_at_b_acc(a->value.data(), self.grad.data(), b->ensure_grad().data(), m, k, n);
        }
    });
}

inline Var transpose(const Var& a) {
    if (a->value.ndim() != 2) throw ShapeError("transpose: expects 2-d tensor");
    size_t m = a->value.rows(), n = a->value.cols();
    Tensor out({n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
    return detail::make_node(std::move(out), "transpose", {a}, [a, m, n](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga.at(i, j) += self.grad.at(j, i);
    });
}

inline Var reshape(const Var& a, std::vector<size_t> shape) {
    Tensor out = a->value.reshaped(shape);
    return detail::make_node(std::move(out), "reshape", {a}, [a](Node& self) {
        if (!a->requires_grad) return;
        detail::add_into(a->ensure_grad(), self.grad);
    });
}

inline Var slice_rows(const Var& a, size_t r0, size_t r1) {
    if (a->value.ndim() != 2) throw ShapeError("slice_rows: expects 2-d tensor");
    size_t n = a->value.cols();
    if (!(r0 < r1 && r1 <= a->value.rows())) throw ShapeError("slice_rows: range out of bounds");
    Tensor out({r1 - r0, n});
    std::copy(a->value.data() + r0 * n, a->value.data() + r1 * n, out.data());
    return detail::make_node(std::move(out), "slice_rows", {a}, [a, r0, n](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) ga.at(r0 * n + i) += self.grad.at(i);
    });
}

inline Var slice_cols(const Var& a, size_t c0, size_t c1) {
    if (a->value.ndim() != 2) throw ShapeError("slice_cols: expects 2-d tensor");
    size_t m = a->value.rows(), n = a->value.cols();
    if (!(c0 < c1 && c1 <= n)) throw ShapeError("slice_cols: range out of bounds");
    size_t w = c1 - c0;
    Tensor out({m, w});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < w; ++j) out.at(i, j) = a->value.at(i, c0 + j);
    return detail::make_node(std::move(out), "slice_cols", {a}, [a, c0, w, m](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < w; ++j) ga.at(i, c0 + j) += self.grad.at(i, j);
    });
}

// slice of a 1-d tensor
inline Var slice_vec(const Var& a, size_t i0, size_t i1) {
    if (a->value.ndim() != 1) throw ShapeError("slice_vec: expects 1-d tensor");
    if (!(i0 < i1 && i1 <= a->value.numel())) throw ShapeError("slice_vec: range out of bounds");
    Tensor out({i1 - i0});
    std::copy(a->value.data() + i0, a->value.data() + i1, out.data());
    return detail::make_node(std::move(out), "slice_vec", {a}, [a, i0](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) ga.at(i0 + i) += self.grad.at(i);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    size_t n = parts[0]->value.cols();
    size_t m = 0;
    for (const auto& p : parts) {
        if (p->value.ndim() != 2 || p->value.cols() != n) throw ShapeError("concat_rows: column mismatch");
        m += p->value.rows();
    }
    Tensor out({m, n});
    size_t r = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + r * n);
        r += p->value.rows();
    }
    return detail::make_node(std::move(out), "concat_rows", parts, [parts, n](Node& self) {
        size_t r = 0;
        for (const auto& p : parts) {
            size_t cnt = p->value.numel();
            if (p->requires_grad) {
                Tensor& gp = p->ensure_grad();
                for (size_t i = 0; i < cnt; ++i) gp.at(i) += self.grad.at(r * n + i);
            }
            r += p->value.rows();
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    size_t m = parts[0]->value.rows();
    size_t n = 0;
    for (const auto& p : parts) {
        if (p->value.ndim() != 2 || p->value.rows() != m) throw ShapeError("concat_cols: row mismatch");
        n += p->value.cols();
    }
    Tensor out({m, n});
    size_t c = 0;
    for (const auto& p : parts) {
        size_t w = p->value.cols();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < w; ++j) out.at(i, c + j) = p->value.at(i, j);
        c += w;
    }
    return detail::make_node(std::move(out), "concat_cols", parts, [parts, m](Node& self) {
        size_t c = 0;
        for (const auto& p : parts) {
            size_t w = p->value.cols();
            if (p->requires_grad) {
                Tensor& gp = p->ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < w; ++j) gp.at(i, j) += self.grad.at(i, c + j);
            }
            c += w;
        }
    });
}

inline Var concat_vec(const std::vector<Var>& parts) {
    size_t n = 0;
    for (const auto& p : parts) n += p->value.numel();
    Tensor out({n});
    size_t o = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + o);
        o += p->value.numel();
    }
    return detail::make_node(std::move(out), "concat_vec", parts, [parts](Node& self) {
        size_t o = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                Tensor& gp = p->ensure_grad();
                for (size_t i = 0; i < p->value.numel(); ++i) gp.at(i) += self.grad.at(o + i);
            }
            o += p->value.numel();
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (size_t i = 0; i < a->value.numel(); ++i) s += a->value.at(i);
    return detail::make_node(Tensor::scalar(s), "sum", {a}, [a](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        double g = self.grad.at(0);
        for (size_t i = 0; i < ga.numel(); ++i) ga.at(i) += g;
    });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

/// Mean over rows of a 2-d tensor -> 1-d [cols].
inline Var mean_rows(const Var& a) {
    if (a->value.ndim() != 2) throw ShapeError("mean_rows: expects 2-d tensor");
    size_t m = a->value.rows(), n = a->value.cols();
    Tensor out({n});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.at(j) += a->value.at(i, j);
    for (size_t j = 0; j < n; ++j) out.at(j) /= static_cast<double>(m);
    return detail::make_node(std::move(out), "mean_rows", {a}, [a, m, n](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        double inv = 1.0 / static_cast<double>(m);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga.at(i, j) += self.grad.at(j) * inv;
    });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(const Var& a) {
    if (a->value.ndim() != 2) throw ShapeError("softmax_rows: expects 2-d tensor");
    size_t m = a->value.rows(), n = a->value.cols();
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i) {
        double mx = a->value.at(i, 0);
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, a->value.at(i, j));
        double z = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double e = std::exp(a->value.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (size_t j = 0; j < n; ++j) out.at(i, j) /= z;
    }
    return detail::make_node(std::move(out), "softmax", {a}, [a, m, n](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < n; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
            for (size_t j = 0; j < n; ++j) {
                ga.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
            }
        }
    });
}

/// Layer norm over the last axis, no affine. Output slices have mean 0, var 1.
inline Var layer_norm(const Var& a, double eps = 1e-8) {
    if (a->value.ndim() < 1) throw ShapeError("layer_norm: needs at least 1 axis");
    size_t n = a->value.shape().back();
    size_t m = a->value.numel() / n;
    Tensor out(a->value.shape());
    std::vector<double> inv_sigma(m);
    for (size_t i = 0; i < m; ++i) {
        const double* x = a->value.data() + i * n;
        double* y = out.data() + i * n;
        // anchored mean: exact for constant rows, so LN(const) == 0 bitwise
        double mu = 0.0;
        for (size_t j = 0; j < n; ++j) mu += x[j] - x[0];
        mu = x[0] + mu / static_cast<double>(n);
        double var = 0.0;
        for (size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (size_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * is;
    }
    return detail::make_node(std::move(out), "layer_norm", {a},
                             [a, m, n, inv_sigma = std::move(inv_sigma)](Node& self) {
        if (!a->requires_grad) return;
        Tensor& ga = a->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            const double* xh = self.value.data() + i * n;
            const double* dy = self.grad.data() + i * n;
            double* dx = ga.data() + i * n;
            double mean_dy = 0.0, mean_dy_xh = 0.0;
            for (size_t j = 0; j < n; ++j) {
                mean_dy += dy[j];
                mean_dy_xh += dy[j] * xh[j];
            }
            mean_dy /= static_cast<double>(n);
            mean_dy_xh /= static_cast<double>(n);
            for (size_t j = 0; j < n; ++j) {
                dx[j] += inv_sigma[i] * (dy[j] - mean_dy - xh[j] * mean_dy_xh);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Lookup / structural ops
// ---------------------------------------------------------------------------

/// Row gather (embedding lookup). Backward scatter-adds.
inline Var gather_rows(const Var& table, const std::vector<int>& ids) {
    if (table->value.ndim() != 2) throw ShapeError("gather_rows: expects 2-d table");
    size_t n = table->value.cols();
    Tensor out({ids.size(), n});
    for (size_t i = 0; i < ids.size(); ++i) {
        int r = ids[i];
        if (r < 0 || static_cast<size_t>(r) >= table->value.rows()) throw ShapeError("gather_rows: id out of range");
        std::copy(table->value.data() + r * n, table->value.data() + (r + 1) * n, out.data() + i * n);
    }
    return detail::make_node(std::move(out), "gather_rows", {table}, [table, ids, n](Node& self) {
        if (!table->requires_grad) return;
        Tensor& g = table->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            for (size_t j = 0; j < n; ++j) g.at(static_cast<size_t>(ids[i]), j) += self.grad.at(i, j);
        }
    });
}

/// Rotate consecutive (even, odd) pairs of each row by per-(row, pair) angles.
/// angles: [rows x cols/2] constant. Backward rotates the gradient by -angle.
inline Var rope_rotate(const Var& x, const Tensor& angles) {
    if (x->value.ndim() != 2) throw ShapeError("rope_rotate: expects 2-d tensor");
    size_t m = x->value.rows(), n = x->value.cols();
    if (n % 2 != 0 || angles.rows() != m || angles.cols() != n / 2) {
        throw ShapeError("rope_rotate: angle table mismatch");
    }
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < n / 2; ++p) {
            double c = std::cos(angles.at(i, p));
            double s = std::sin(angles.at(i, p));
            double e = x->value.at(i, 2 * p);
            double o = x->value.at(i, 2 * p + 1);
            out.at(i, 2 * p) = e * c - o * s;
            out.at(i, 2 * p + 1) = e * s + o * c;
        }
    }
    return detail::make_node(std::move(out), "rope_rotate", {x}, [x, angles, m, n](Node& self) {
        if (!x->requires_grad) return;
        Tensor& gx = x->ensure_grad();
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < n / 2; ++p) {
                double c = std::cos(angles.at(i, p));
                double s = std::sin(angles.at(i, p));
                double ge = self.grad.at(i, 2 * p);
                double go = self.grad.at(i, 2 * p + 1);
                gx.at(i, 2 * p) += ge * c + go * s;
                gx.at(i, 2 * p + 1) += -ge * s + go * c;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutional ops on [h x w x C] grids (PTD down/upsamplers)
// ---------------------------------------------------------------------------

/// 3x3 conv, zero same-padding. stride 1 keeps h x w; stride 2 halves them.
/// x: [h, w, Cin], w: [3, 3, Cin, Cout], b: [Cout].
inline Var conv3x3(const Var& x, const Var& w, const Var& b, size_t stride = 1) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4) throw ShapeError("conv3x3: bad ranks");
    size_t h = x->value.dim(0), wd = x->value.dim(1), cin = x->value.dim(2);
    if (w->value.dim(0) != 3 || w->value.dim(1) != 3 || w->value.dim(2) != cin) {
        throw ShapeError("conv3x3: kernel shape mismatch");
    }
    size_t cout = w->value.dim(3);
    if (b->value.numel() != cout) throw ShapeError("conv3x3: bias mismatch");
    if (stride == 2 && (h % 2 != 0 || wd % 2 != 0)) throw ShapeError("conv3x3: stride-2 needs even extents");
    size_t oh = (stride == 1) ? h : h / 2;
    size_t ow = (stride == 1) ? wd : wd / 2;

    Tensor out({oh, ow, cout});
    for (size_t oi = 0; oi < oh; ++oi) {
        for (size_t oj = 0; oj < ow; ++oj) {
            for (size_t co = 0; co < cout; ++co) out.at(oi, oj, co) = b->value.at(co);
            for (int ki = 0; ki < 3; ++ki) {
                long ii = static_cast<long>(oi * stride) + ki - 1;
                if (ii < 0 || ii >= static_cast<long>(h)) continue;
                for (int kj = 0; kj < 3; ++kj) {
                    long jj = static_cast<long>(oj * stride) + kj - 1;
                    if (jj < 0 || jj >= static_cast<long>(wd)) continue;
                    for (size_t ci = 0; ci < cin; ++ci) {
                        double xv = x->value.at(static_cast<size_t>(ii), static_cast<size_t>(jj), ci);
                        for (size_t co = 0; co < cout; ++co) {
                            out.at(oi, oj, co) += xv * w->value.at((static_cast<size_t>(ki) * 3 + static_cast<size_t>(kj)) * cin * cout + ci * cout + co);
                        }
                    }
                }
            }
        }
    }
    return detail::make_node(std::move(out), "conv3x3", {x, w, b},
                             [x, w, b, h, wd, cin, cout, stride, oh, ow](Node& self) {
        Tensor* gx = x->requires_grad ? &x->ensure_grad() : nullptr;
        Tensor* gw = w->requires_grad ? &w->ensure_grad() : nullptr;
        Tensor* gb = b->requires_grad ? &b->ensure_grad() : nullptr;
        for (size_t oi = 0; oi < oh; ++oi) {
            for (size_t oj = 0; oj < ow; ++oj) {
                if (gb) {
                    for (size_t co = 0; co < cout; ++co) gb->at(co) += self.grad.at(oi, oj, co);
                }
                for (int ki = 0; ki < 3; ++ki) {
                    long ii = static_cast<long>(oi * stride) + ki - 1;
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    for (int kj = 0; kj < 3; ++kj) {
                        long jj = static_cast<long>(oj * stride) + kj - 1;
                        if (jj < 0 || jj >= static_cast<long>(wd)) continue;
                        size_t kbase = (static_cast<size_t>(ki) * 3 + static_cast<size_t>(kj)) * cin * cout;
                        for (size_t ci = 0; ci < cin; ++ci) {
                            double xv = x->value.at(static_cast<size_t>(ii), static_cast<size_t>(jj), ci);
                            for (size_t co = 0; co < cout; ++co) {
                                double g = self.grad.at(oi, oj, co);
                                if (gw) gw->at(kbase + ci * cout + co) += g * xv;
                                if (gx) gx->at(static_cast<size_t>(ii), static_cast<size_t>(jj), ci) += g * w->value.at(kbase + ci * cout + co);
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Bilinear x2 upsample (align_corners = false). x: [h, w, C] -> [2h, 2w, C].
inline Var bilinear_up2(const Var& x) {
    if (x->value.ndim() != 3) throw ShapeError("bilinear_up2: expects 3-d grid");
    size_t h = x->value.dim(0), w = x->value.dim(1), c = x->value.dim(2);
    size_t oh = 2 * h, ow = 2 * w;
    // precompute source taps and weights per output coordinate
    auto taps = [](size_t o, size_t extent) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        double fl = std::floor(src);
        long i0 = static_cast<long>(fl);
        double w1 = src - fl;
        long i1 = i0 + 1;
        i0 = std::clamp<long>(i0, 0, static_cast<long>(extent) - 1);
        i1 = std::clamp<long>(i1, 0, static_cast<long>(extent) - 1);
        return std::tuple<size_t, size_t, double>(static_cast<size_t>(i0), static_cast<size_t>(i1), w1);
    };
    Tensor out({oh, ow, c});
    for (size_t oi = 0; oi < oh; ++oi) {
        auto [r0, r1, wr] = taps(oi, h);
        for (size_t oj = 0; oj < ow; ++oj) {
            auto [c0, c1, wc] = taps(oj, w);
            for (size_t ch = 0; ch < c; ++ch) {
                out.at(oi, oj, ch) = (1 - wr) * (1 - wc) * x->value.at(r0, c0, ch) +
                                     (1 - wr) * wc * x->value.at(r0, c1, ch) +
                                     wr * (1 - wc) * x->value.at(r1, c0, ch) +
                                     wr * wc * x->value.at(r1, c1, ch);
            }
        }
    }
    return detail::make_node(std::move(out), "bilinear_up2", {x}, [x, h, w, c, oh, ow, taps](Node& self) {
        if (!x->requires_grad) return;
        Tensor& gx = x->ensure_grad();
        for (size_t oi = 0; oi < oh; ++oi) {
            auto [r0, r1, wr] = taps(oi, h);
            for (size_t oj = 0; oj < ow; ++oj) {
                auto [c0, c1, wc] = taps(oj, w);
                for (size_t ch = 0; ch < c; ++ch) {
                    double g = self.grad.at(oi, oj, ch);
                    gx.at(r0, c0, ch) += (1 - wr) * (1 - wc) * g;
                    gx.at(r0, c1, ch) += (1 - wr) * wc * g;
                    gx.at(r1, c0, ch) += wr * (1 - wc) * g;
                    gx.at(r1, c1, ch) += wr * wc * g;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward driver
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Accumulates into leaf grads.
inline void backward(const Var& loss) {
    if (loss->value.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss->requires_grad) return;

    // collect nodes reachable from the loss, then process in descending id
    // order (ids are creation-ordered, so this is a valid reverse topo order)
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    loss->ensure_grad().fill(0.0);
    loss->grad.at(0) = 1.0;
    for (Node* n : order) {
        if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Convenience composites
// ---------------------------------------------------------------------------

/// x [T x in] * w [in x out] + b [out]
inline Var linear(const Var& x, const Var& w, const Var& b) { return add(matmul(x, w), b); }

/// mean over all elements of (a - b)^2
inline Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

/// sum of squares (squared L2 / Frobenius norm)
inline Var sq_norm(const Var& a) { return sum_all(square(a)); }

}  // namespace ditlab
