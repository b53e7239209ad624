// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "roimatch/nn/tensor.hpp"

namespace roimatch::nn {

// Reverse-mode tape. Nodes are created in program order, which is a valid
// topological order; backward() walks it in reverse. Graph building is
// single-threaded (kernels may parallelize internally).

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

inline thread_local bool g_grad_enabled = true;
inline thread_local uint64_t g_node_counter = 0;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first accumulation
    bool needs_grad = false;
    uint64_t order = 0;
    std::vector<Var<T>> parents;
    std::function<void()> back;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (grad.numel() != val.numel()) grad = Tensor<T>::zeros(val.shape);
    }
    void accumulate(const Tensor<T>& g) {
        ensure_grad();
        const T* src = g.ptr();
        T* dst = grad.ptr();
        for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
    }
};

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool needs_grad) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(value);
    n->needs_grad = needs_grad && g_grad_enabled;
    n->order = ++g_node_counter;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_leaf(std::move(value), false);
}

template <typename T>
bool any_needs_grad(const std::vector<Var<T>>& vars) {
    for (const auto& v : vars) {
        if (v && v->needs_grad) return true;
    }
    return false;
}

// Creates a non-leaf node; `back` is dropped when grads are off or no parent
// requires them, so inference builds no tape.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void()> back) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(value);
    n->order = ++g_node_counter;
    if (g_grad_enabled && any_needs_grad(parents)) {
        n->needs_grad = true;
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

template <typename T>
void backward(const Var<T>& root) {
    check(root->val.numel() == 1, "backward() expects a scalar root");
    root->ensure_grad();
    root->grad[0] = T(1);

    // Collect reachable grad-requiring nodes, then run in reverse creation order.
    std::vector<Node<T>*> nodes;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->order > b->order; });
    for (Node<T>* n : nodes) {
        if (n->back) {
            n->ensure_grad();
            n->back();
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

// add/sub/mul/div share the pattern: capture self via raw pointer to avoid a
// shared_ptr cycle through the closure.

template <typename T>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, Tensor<T> out,
                 std::function<void(Node<T>*, Node<T>*, Node<T>*)> back) {
    auto n = make_node<T>(std::move(out), {a, b}, nullptr);
    if (n->needs_grad) {
        Node<T>* self = n.get();
        Var<T> pa = a, pb = b;
        n->back = [self, pa, pb, back]() { back(self, pa.get(), pb.get()); };
    }
    return n;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check(a->val.shape == b->val.shape, "add: shape mismatch " + shape_str(a->val.shape) + " vs " +
                                            shape_str(b->val.shape));
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
    return binary_op<T>(a, b, std::move(out), [](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) pa->accumulate(self->grad);
        if (pb->needs_grad) pb->accumulate(self->grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check(a->val.shape == b->val.shape, "sub: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return binary_op<T>(a, b, std::move(out), [](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) pa->accumulate(self->grad);
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i) pb->grad[i] -= self->grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check(a->val.shape == b->val.shape, "mul: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return binary_op<T>(a, b, std::move(out), [](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i) {
                pa->grad[i] += self->grad[i] * pb->val[i];
            }
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i) {
                pb->grad[i] += self->grad[i] * pa->val[i];
            }
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check(a->val.shape == b->val.shape, "div: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
    return binary_op<T>(a, b, std::move(out), [](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i) {
                pa->grad[i] += self->grad[i] / pb->val[i];
            }
        }
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self->grad.numel(); ++i) {
                pb->grad[i] -= self->grad[i] * self->val[i] / pb->val[i];
            }
        }
    });
}

template <typename T>
Var<T> unary_op(const Var<T>& x, Tensor<T> out, std::function<void(Node<T>*, Node<T>*)> back) {
    auto n = make_node<T>(std::move(out), {x}, nullptr);
    if (n->needs_grad) {
        Node<T>* self = n.get();
        Var<T> px = x;
        n->back = [self, px, back]() { back(self, px.get()); };
    }
    return n;
}

// y = scale * x + shift
template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = scale * out[i] + shift;
    return unary_op<T>(x, std::move(out), [scale](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) px->grad[i] += scale * self->grad[i];
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) {
            if (px->val[i] > T(0)) px->grad[i] += self->grad[i];
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T v = out[i];
        out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                           : std::exp(v) / (T(1) + std::exp(v));
    }
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) {
            const T y = self->val[i];
            px->grad[i] += self->grad[i] * y * (T(1) - y);
        }
    });
}

template <typename T>
Var<T> square(const Var<T>& x) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) {
            px->grad[i] += self->grad[i] * T(2) * px->val[i];
        }
    });
}

// sqrt(x + eps); eps keeps the derivative finite at x = 0.
template <typename T>
Var<T> sqrt_eps(const Var<T>& x, T eps) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i] + eps);
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) {
            px->grad[i] += self->grad[i] * T(0.5) / self->val[i];
        }
    });
}

// ln(1 + x) for x >= 0.
template <typename T>
Var<T> log1p_pos(const Var<T>& x) {
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log1p(out[i]);
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) {
            px->grad[i] += self->grad[i] / (T(1) + px->val[i]);
        }
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T acc = T(0);
    for (int64_t i = 0; i < x->val.numel(); ++i) acc += x->val[i];
    Tensor<T> out({1});
    out[0] = acc;
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const T g = self->grad[0];
        for (int64_t i = 0; i < px->grad.numel(); ++i) px->grad[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const T inv = T(1) / static_cast<T>(x->val.numel());
    return affine(sum_all(x), inv, T(0));
}

// Scalar dot with a constant weight tensor.
template <typename T>
Var<T> dot_const(const Var<T>& x, Tensor<T> w) {
    check(x->val.shape == w.shape, "dot_const: shape mismatch");
    T acc = T(0);
    for (int64_t i = 0; i < x->val.numel(); ++i) acc += x->val[i] * w[i];
    Tensor<T> out({1});
    out[0] = acc;
    auto wp = std::make_shared<Tensor<T>>(std::move(w));
    return unary_op<T>(x, std::move(out), [wp](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const T g = self->grad[0];
        for (int64_t i = 0; i < px->grad.numel(); ++i) px->grad[i] += g * (*wp)[i];
    });
}

// sum_i mask_i * x_i^2
template <typename T>
Var<T> sumsq_masked(const Var<T>& x, Tensor<T> mask) {
    check(x->val.shape == mask.shape, "sumsq_masked: shape mismatch");
    T acc = T(0);
    for (int64_t i = 0; i < x->val.numel(); ++i) acc += mask[i] * x->val[i] * x->val[i];
    Tensor<T> out({1});
    out[0] = acc;
    auto mp = std::make_shared<Tensor<T>>(std::move(mask));
    return unary_op<T>(x, std::move(out), [mp](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const T g = self->grad[0];
        for (int64_t i = 0; i < px->grad.numel(); ++i) {
            px->grad[i] += g * T(2) * (*mp)[i] * px->val[i];
        }
    });
}

// Mean binary cross-entropy over mask-selected pixels; probabilities clamped
// away from {0,1}. Returns 0 when the mask is empty.
template <typename T>
Var<T> bce_masked(const Var<T>& p, Tensor<T> gt, Tensor<T> mask) {
    check(p->val.shape == gt.shape && p->val.shape == mask.shape, "bce_masked: shape mismatch");
    const T lo = T(1e-6), hi = T(1) - T(1e-6);
    T count = T(0), acc = T(0);
    for (int64_t i = 0; i < p->val.numel(); ++i) {
        if (mask[i] == T(0)) continue;
        count += T(1);
        const T v = std::clamp(p->val[i], lo, hi);
        acc -= gt[i] * std::log(v) + (T(1) - gt[i]) * std::log(T(1) - v);
    }
    Tensor<T> out({1});
    out[0] = count > T(0) ? acc / count : T(0);
    auto gp = std::make_shared<Tensor<T>>(std::move(gt));
    auto mp = std::make_shared<Tensor<T>>(std::move(mask));
    return unary_op<T>(p, std::move(out), [gp, mp, count, lo, hi](Node<T>* self, Node<T>* px) {
        if (count == T(0)) return;
        px->ensure_grad();
        const T g = self->grad[0] / count;
        for (int64_t i = 0; i < px->grad.numel(); ++i) {
            if ((*mp)[i] == T(0)) continue;
            const T v = std::clamp(px->val[i], lo, hi);
            px->grad[i] += g * (v - (*gp)[i]) / (v * (T(1) - v));
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
    Tensor<T> out = x->val.reshaped(std::move(s));
    return unary_op<T>(x, std::move(out), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < self->grad.numel(); ++i) px->grad[i] += self->grad[i];
    });
}

// Rows of a [R, D] matrix selected by index; backward scatter-adds.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<int64_t> rows) {
    check(x->val.ndim() == 2, "gather_rows expects [R, D]");
    const int64_t d = x->val.shape[1];
    Tensor<T> out({static_cast<int64_t>(rows.size()), d});
    for (size_t r = 0; r < rows.size(); ++r) {
        check(rows[r] >= 0 && rows[r] < x->val.shape[0], "gather_rows: index out of range");
        for (int64_t j = 0; j < d; ++j) out.at(static_cast<int64_t>(r), j) = x->val.at(rows[r], j);
    }
    auto rp = std::make_shared<std::vector<int64_t>>(std::move(rows));
    return unary_op<T>(x, std::move(out), [rp, d](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (size_t r = 0; r < rp->size(); ++r) {
            for (int64_t j = 0; j < d; ++j) {
                px->grad.at((*rp)[r], j) += self->grad.at(static_cast<int64_t>(r), j);
            }
        }
    });
}

// [M, D] -> [1, D] column means.
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
    check(x->val.ndim() == 2, "mean_rows expects [M, D]");
    const int64_t m = x->val.shape[0], d = x->val.shape[1];
    check(m > 0, "mean_rows: empty input");
    Tensor<T> out({1, d});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < d; ++j) out[j] += x->val.at(i, j);
    }
    for (int64_t j = 0; j < d; ++j) out[j] /= static_cast<T>(m);
    return unary_op<T>(x, std::move(out), [m, d](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                px->grad.at(i, j) += self->grad[j] / static_cast<T>(m);
            }
        }
    });
}

// x[M, D] - v[1, D] broadcast over rows.
template <typename T>
Var<T> sub_rowvec(const Var<T>& x, const Var<T>& v) {
    check(x->val.ndim() == 2 && v->val.ndim() == 2 && v->val.shape[0] == 1 &&
              v->val.shape[1] == x->val.shape[1],
          "sub_rowvec: want [M,D] and [1,D]");
    const int64_t m = x->val.shape[0], d = x->val.shape[1];
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < d; ++j) out.at(i, j) -= v->val[j];
    }
    return binary_op<T>(x, v, std::move(out), [m, d](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) pa->accumulate(self->grad);
        if (pb->needs_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t j = 0; j < d; ++j) pb->grad[j] -= self->grad.at(i, j);
            }
        }
    });
}

// [M, D] -> [M] squared L2 norm of each row.
template <typename T>
Var<T> row_sumsq(const Var<T>& x) {
    check(x->val.ndim() == 2, "row_sumsq expects [M, D]");
    const int64_t m = x->val.shape[0], d = x->val.shape[1];
    Tensor<T> out({m});
    for (int64_t i = 0; i < m; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < d; ++j) acc += x->val.at(i, j) * x->val.at(i, j);
        out[i] = acc;
    }
    return unary_op<T>(x, std::move(out), [m, d](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                px->grad.at(i, j) += self->grad[i] * T(2) * px->val.at(i, j);
            }
        }
    });
}

}  // namespace roimatch::nn
