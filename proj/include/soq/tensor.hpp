// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over dense float64 tensors. Dynamic tape:
// every op returns a fresh node holding its inputs and a backward closure;
// backward() runs the closures in reverse topological order. Single-threaded
// by design so reduction order is fixed and runs are reproducible.
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "soq/common.hpp"

namespace soq::ad {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

class Node;
using Var = std::shared_ptr<Node>;

class Node {
  public:
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Node(Shape s, std::vector<double> v) : shape(std::move(s)), val(std::move(v)) {}

    int64_t size() const { return static_cast<int64_t>(val.size()); }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
    void zero_grad() { grad.assign(val.size(), 0.0); }
};

inline Var make_node(Shape s, std::vector<double> v) {
    SOQ_REQUIRE(numel(s) == static_cast<int64_t>(v.size()), "tensor shape/data mismatch");
    return std::make_shared<Node>(std::move(s), std::move(v));
}

inline Var constant(Shape s, std::vector<double> v) { return make_node(std::move(s), std::move(v)); }

inline Var zeros(Shape s) {
    auto n = numel(s);
    return make_node(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
}

inline Var scalar(double x) { return make_node({1}, {x}); }

inline Var leaf(Shape s, std::vector<double> v, bool requires_grad = true) {
    auto node = make_node(std::move(s), std::move(v));
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return node;
}

namespace detail {

inline bool any_grad(const std::vector<Var>& ps) {
    for (const auto& p : ps)
        if (p->requires_grad) return true;
    return false;
}

inline Var op(Shape s, std::vector<double> v, std::vector<Var> parents,
              std::function<void(Node&)> bw) {
    auto node = make_node(std::move(s), std::move(v));
    node->requires_grad = any_grad(parents);
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(bw);
    }
    return node;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

inline void backward(const Var& root) {
    SOQ_REQUIRE(root->size() == 1, "backward() expects a scalar root");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise & scalar ops

inline Var add(const Var& a, const Var& b) {
    SOQ_REQUIRE(a->shape == b->shape, "add: shape mismatch");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] + b->val[i];
    return detail::op(a->shape, std::move(v), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    SOQ_REQUIRE(a->shape == b->shape, "sub: shape mismatch");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] - b->val[i];
    return detail::op(a->shape, std::move(v), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    SOQ_REQUIRE(a->shape == b->shape, "mul: shape mismatch");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] * b->val[i];
    return detail::op(a->shape, std::move(v), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    SOQ_REQUIRE(a->shape == b->shape, "div: shape mismatch");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] / b->val[i];
    return detail::op(a->shape, std::move(v), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] / b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                b->grad[i] -= n.grad[i] * n.val[i] / b->val[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] * s;
    return detail::op(a->shape, std::move(v), {a}, [a, s](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] + s;
    return detail::op(a->shape, std::move(v), {a}, [a](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

template <typename F, typename DF>
inline Var unary(const Var& a, F f, DF df) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = f(a->val[i]);
    return detail::op(a->shape, std::move(v), {a}, [a, df](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * df(a->val[i], n.val[i]);
    });
}

inline Var relu(const Var& a) {
    return unary(
        a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var tanh_(const Var& a) {
    return unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
    return unary(
        a,
        [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Var gelu(const Var& a) {
    // tanh approximation
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return unary(
        a,
        [](double x) {
            const double t = std::tanh(c * (x + 0.044715 * x * x * x));
            return 0.5 * x * (1.0 + t);
        },
        [](double x, double) {
            const double u = c * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

inline Var exp_(const Var& a) {
    return unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log_(const Var& a) {
    return unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt_(const Var& a) {
    return unary(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / (y == 0.0 ? 1e-300 : y); });
}

inline Var square(const Var& a) {
    return unary(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var abs_(const Var& a) {
    return unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// detach: value flows, gradient does not
inline Var detach(const Var& a) { return constant(a->shape, a->val); }

// ---------------------------------------------------------------------------
// reductions

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double x : a->val) s += x;
    return detail::op({1}, {s}, {a}, [a](Node& n) {
        a->ensure_grad();
        for (auto& g : a->grad) g += n.grad[0];
    });
}

inline Var mean_all(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->size());
    double s = 0.0;
    for (double x : a->val) s += x;
    return detail::op({1}, {s * inv}, {a}, [a, inv](Node& n) {
        a->ensure_grad();
        for (auto& g : a->grad) g += n.grad[0] * inv;
    });
}

// sum over columns of [n,d] -> [n,1]
inline Var sum_cols(const Var& a) {
    const int64_t n = a->rows(), d = a->cols();
    std::vector<double> v(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) v[i] += a->val[i * d + j];
    return detail::op({n, 1}, std::move(v), {a}, [a, n, d](Node& nd) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) a->grad[i * d + j] += nd.grad[i];
    });
}

// mean over rows of [n,d] -> [1,d]
inline Var mean_rows(const Var& a) {
    const int64_t n = a->rows(), d = a->cols();
    std::vector<double> v(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) v[j] += a->val[i * d + j];
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& x : v) x *= inv;
    return detail::op({1, d}, std::move(v), {a}, [a, n, d, inv](Node& nd) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) a->grad[i * d + j] += nd.grad[j] * inv;
    });
}

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(const Var& a, Shape s) {
    SOQ_REQUIRE(numel(s) == a->size(), "reshape: element count mismatch");
    return detail::op(std::move(s), a->val, {a}, [a](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    });
}

inline Var transpose2d(const Var& a) {
    const int64_t r = a->rows(), c = a->cols();
    std::vector<double> v(a->val.size());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) v[j * r + i] = a->val[i * c + j];
    return detail::op({c, r}, std::move(v), {a}, [a, r, c](Node& n) {
        a->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) a->grad[i * c + j] += n.grad[j * r + i];
    });
}

inline Var slice_rows(const Var& a, int64_t r0, int64_t r1) {
    const int64_t c = a->cols();
    SOQ_REQUIRE(0 <= r0 && r0 <= r1 && r1 <= a->rows(), "slice_rows: range");
    std::vector<double> v(a->val.begin() + r0 * c, a->val.begin() + r1 * c);
    return detail::op({r1 - r0, c}, std::move(v), {a}, [a, r0, c](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) a->grad[static_cast<size_t>(r0 * c) + i] += n.grad[i];
    });
}

inline Var slice_cols(const Var& a, int64_t c0, int64_t c1) {
    const int64_t r = a->rows(), c = a->cols();
    SOQ_REQUIRE(0 <= c0 && c0 <= c1 && c1 <= c, "slice_cols: range");
    const int64_t w = c1 - c0;
    std::vector<double> v(static_cast<size_t>(r * w));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) v[i * w + j] = a->val[i * c + c0 + j];
    return detail::op({r, w}, std::move(v), {a}, [a, r, c, c0, w](Node& n) {
        a->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) a->grad[i * c + c0 + j] += n.grad[i * w + j];
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    SOQ_REQUIRE(!parts.empty(), "concat_rows: empty");
    const int64_t c = parts[0]->cols();
    int64_t r = 0;
    for (const auto& p : parts) {
        SOQ_REQUIRE(p->cols() == c, "concat_rows: col mismatch");
        r += p->rows();
    }
    std::vector<double> v;
    v.reserve(static_cast<size_t>(r * c));
    for (const auto& p : parts) v.insert(v.end(), p->val.begin(), p->val.end());
    return detail::op({r, c}, std::move(v), parts, [parts](Node& n) {
        size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < p->val.size(); ++i) p->grad[i] += n.grad[off + i];
            }
            off += p->val.size();
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    SOQ_REQUIRE(!parts.empty(), "concat_cols: empty");
    const int64_t r = parts[0]->rows();
    int64_t c = 0;
    for (const auto& p : parts) {
        SOQ_REQUIRE(p->rows() == r, "concat_cols: row mismatch");
        c += p->cols();
    }
    std::vector<double> v(static_cast<size_t>(r * c));
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p->cols();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) v[i * c + off + j] = p->val[i * w + j];
        off += w;
    }
    return detail::op({r, c}, std::move(v), parts, [parts, r, c](Node& n) {
        int64_t off2 = 0;
        for (const auto& p : parts) {
            const int64_t w = p->cols();
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < w; ++j) p->grad[i * w + j] += n.grad[i * c + off2 + j];
            }
            off2 += w;
        }
    });
}

// rows of `table` selected by `ids`; gradient scatters back (embedding lookup)
inline Var gather_rows(const Var& table, const std::vector<int64_t>& ids) {
    const int64_t d = table->cols();
    std::vector<double> v(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        SOQ_REQUIRE(ids[i] >= 0 && ids[i] < table->rows(), "gather_rows: index");
        std::copy_n(table->val.begin() + ids[i] * d, d, v.begin() + static_cast<int64_t>(i) * d);
    }
    return detail::op({static_cast<int64_t>(ids.size()), d}, std::move(v), {table},
                      [table, ids, d](Node& n) {
                          table->ensure_grad();
                          for (size_t i = 0; i < ids.size(); ++i)
                              for (int64_t j = 0; j < d; ++j)
                                  table->grad[ids[i] * d + j] += n.grad[static_cast<int64_t>(i) * d + j];
                      });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(const Var& a, const Var& b) {
    const int64_t m = a->rows(), k = a->cols(), n = b->cols();
    SOQ_REQUIRE(b->rows() == k, "matmul: inner dim mismatch");
    std::vector<double> v(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double av = a->val[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b->val[p * n];
            double* vrow = &v[i * n];
            for (int64_t j = 0; j < n; ++j) vrow[j] += av * brow[j];
        }
    }
    return detail::op({m, n}, std::move(v), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            // dA = dC * B^T
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = &nd.grad[i * n];
                    const double* brow = &b->val[p * n];
                    for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    a->grad[i * k + p] += s;
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB = A^T * dC
            for (int64_t p = 0; p < k; ++p)
                for (int64_t i = 0; i < m; ++i) {
                    const double av = a->val[i * k + p];
                    if (av == 0.0) continue;
                    const double* grow = &nd.grad[i * n];
                    double* brow = &b->grad[p * n];
                    for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

// x [n,in] * W^T [in,out] + b -> [n,out]
inline Var linear(const Var& x, const Var& W, const Var& b) {
    const int64_t n = x->rows(), in = x->cols(), out = W->rows();
    SOQ_REQUIRE(W->cols() == in, "linear: weight shape");
    SOQ_REQUIRE(b->size() == out, "linear: bias shape");
    std::vector<double> v(static_cast<size_t>(n * out));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < out; ++o) {
            const double* xr = &x->val[i * in];
            const double* wr = &W->val[o * in];
            double s = b->val[o];
            for (int64_t j = 0; j < in; ++j) s += xr[j] * wr[j];
            v[i * out + o] = s;
        }
    return detail::op({n, out}, std::move(v), {x, W, b}, [x, W, b, n, in, out](Node& nd) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t o = 0; o < out; ++o) {
                    const double g = nd.grad[i * out + o];
                    if (g == 0.0) continue;
                    const double* wr = &W->val[o * in];
                    double* xg = &x->grad[i * in];
                    for (int64_t j = 0; j < in; ++j) xg[j] += g * wr[j];
                }
        }
        if (W->requires_grad) {
            W->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t o = 0; o < out; ++o) {
                    const double g = nd.grad[i * out + o];
                    if (g == 0.0) continue;
                    const double* xr = &x->val[i * in];
                    double* wg = &W->grad[o * in];
                    for (int64_t j = 0; j < in; ++j) wg[j] += g * xr[j];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t o = 0; o < out; ++o) b->grad[o] += nd.grad[i * out + o];
        }
    });
}

// broadcast-add a [1,d] (or [d]) row vector to every row of [n,d]
inline Var add_rowvec(const Var& x, const Var& b) {
    const int64_t n = x->rows(), d = x->cols();
    SOQ_REQUIRE(b->size() == d, "add_rowvec: width mismatch");
    std::vector<double> v(x->val.size());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) v[i * d + j] = x->val[i * d + j] + b->val[j];
    return detail::op(x->shape, std::move(v), {x, b}, [x, b, n, d](Node& nd) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < nd.grad.size(); ++i) x->grad[i] += nd.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) b->grad[j] += nd.grad[i * d + j];
        }
    });
}

// scale row i of x by s[i] (s: [n] or [n,1])
inline Var mul_colvec(const Var& x, const Var& s) {
    const int64_t n = x->rows(), d = x->cols();
    SOQ_REQUIRE(s->size() == n, "mul_colvec: length mismatch");
    std::vector<double> v(x->val.size());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) v[i * d + j] = x->val[i * d + j] * s->val[i];
    return detail::op(x->shape, std::move(v), {x, s}, [x, s, n, d](Node& nd) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) x->grad[i * d + j] += nd.grad[i * d + j] * s->val[i];
        }
        if (s->requires_grad) {
            s->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < d; ++j) acc += nd.grad[i * d + j] * x->val[i * d + j];
                s->grad[i] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax / normalization / losses

// row-wise softmax; entries where mask[i*c+j]==0 are excluded (-inf logits).
// empty mask means all-allowed.
inline Var softmax_rows(const Var& x, const std::vector<uint8_t>& mask = {}) {
    const int64_t n = x->rows(), c = x->cols();
    SOQ_REQUIRE(mask.empty() || static_cast<int64_t>(mask.size()) == n * c, "softmax: mask size");
    std::vector<double> v(x->val.size(), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < c; ++j)
            if (mask.empty() || mask[i * c + j]) mx = std::max(mx, x->val[i * c + j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            if (mask.empty() || mask[i * c + j]) {
                v[i * c + j] = std::exp(x->val[i * c + j] - mx);
                z += v[i * c + j];
            }
        }
        if (z <= 0.0) z = 1.0;  // fully-masked row stays all-zero
        for (int64_t j = 0; j < c; ++j) v[i * c + j] /= z;
    }
    return detail::op(x->shape, std::move(v), {x}, [x, n, c](Node& nd) {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += nd.grad[i * c + j] * nd.val[i * c + j];
            for (int64_t j = 0; j < c; ++j) {
                const double y = nd.val[i * c + j];
                x->grad[i * c + j] += y * (nd.grad[i * c + j] - dot);
            }
        }
    });
}

inline Var log_softmax_rows(const Var& x) {
    const int64_t n = x->rows(), c = x->cols();
    std::vector<double> v(x->val.size());
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < c; ++j) mx = std::max(mx, x->val[i * c + j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(x->val[i * c + j] - mx);
        const double lz = std::log(z) + mx;
        for (int64_t j = 0; j < c; ++j) v[i * c + j] = x->val[i * c + j] - lz;
    }
    return detail::op(x->shape, std::move(v), {x}, [x, n, c](Node& nd) {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (int64_t j = 0; j < c; ++j) gsum += nd.grad[i * c + j];
            for (int64_t j = 0; j < c; ++j)
                x->grad[i * c + j] += nd.grad[i * c + j] - std::exp(nd.val[i * c + j]) * gsum;
        }
    });
}

// row-wise layer norm with learned affine (gamma/beta: [d])
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const int64_t n = x->rows(), d = x->cols();
    SOQ_REQUIRE(gamma->size() == d && beta->size() == d, "layer_norm: affine shape");
    std::vector<double> v(x->val.size());
    std::vector<double> mean(n), istd(n);
    for (int64_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (int64_t j = 0; j < d; ++j) m += x->val[i * d + j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double t = x->val[i * d + j] - m;
            var += t * t;
        }
        var /= static_cast<double>(d);
        mean[i] = m;
        istd[i] = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j)
            v[i * d + j] = gamma->val[j] * (x->val[i * d + j] - m) * istd[i] + beta->val[j];
    }
    return detail::op(x->shape, std::move(v), {x, gamma, beta},
                      [x, gamma, beta, n, d, mean, istd](Node& nd) {
                          for (int64_t i = 0; i < n; ++i) {
                              // xhat_j = (x_j - m) * istd
                              double gdot = 0.0, gsum = 0.0;
                              for (int64_t j = 0; j < d; ++j) {
                                  const double xh = (x->val[i * d + j] - mean[i]) * istd[i];
                                  const double gy = nd.grad[i * d + j] * gamma->val[j];
                                  gdot += gy * xh;
                                  gsum += gy;
                              }
                              if (x->requires_grad) {
                                  x->ensure_grad();
                                  for (int64_t j = 0; j < d; ++j) {
                                      const double xh = (x->val[i * d + j] - mean[i]) * istd[i];
                                      const double gy = nd.grad[i * d + j] * gamma->val[j];
                                      x->grad[i * d + j] +=
                                          istd[i] * (gy - gsum / static_cast<double>(d) -
                                                     xh * gdot / static_cast<double>(d));
                                  }
                              }
                              if (gamma->requires_grad) {
                                  gamma->ensure_grad();
                                  for (int64_t j = 0; j < d; ++j) {
                                      const double xh = (x->val[i * d + j] - mean[i]) * istd[i];
                                      gamma->grad[j] += nd.grad[i * d + j] * xh;
                                  }
                              }
                              if (beta->requires_grad) {
                                  beta->ensure_grad();
                                  for (int64_t j = 0; j < d; ++j) beta->grad[j] += nd.grad[i * d + j];
                              }
                          }
                      });
}

// mean over `positions` of -log softmax(logits)[target]; positions index rows
inline Var cross_entropy_rows(const Var& logits, const std::vector<int64_t>& targets,
                              const std::vector<int64_t>& positions) {
    SOQ_REQUIRE(!positions.empty(), "cross_entropy: no positions");
    const int64_t c = logits->cols();
    auto ls = log_softmax_rows(logits);
    double loss = 0.0;
    for (size_t k = 0; k < positions.size(); ++k)
        loss -= ls->val[positions[k] * c + targets[k]];
    loss /= static_cast<double>(positions.size());
    const double inv = 1.0 / static_cast<double>(positions.size());
    return detail::op({1}, {loss}, {ls}, [ls, targets, positions, c, inv](Node& nd) {
        ls->ensure_grad();
        for (size_t k = 0; k < positions.size(); ++k)
            ls->grad[positions[k] * c + targets[k]] -= nd.grad[0] * inv;
    });
}

}  // namespace soq::ad
