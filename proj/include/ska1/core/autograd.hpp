#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ska1/core/tensor.hpp"

namespace ska1 {
namespace ag {

// Tape-based reverse-mode autodiff over Tensor. Graphs are built dynamically
// by the op functions below; backward() walks the tape once. Single-threaded
// by contract (the whole library is), so grad mode is a plain global.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad; // allocated lazily, same shape as val
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop; // scatter node.grad into parents' grads

    void ensure_grad() {
        if (grad.numel() != val.numel()) grad = Tensor(val.shape());
    }
};

inline bool& grad_mode() {
    static bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

inline Var leaf(Tensor v, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad && grad_mode();
    return n;
}

namespace detail {

inline Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    if (grad_mode()) {
        bool any = false;
        for (const auto& p : parents)
            if (p->requires_grad) { any = true; break; }
        if (any) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(fn);
        }
    }
    return n;
}

} // namespace detail

// Runs reverse-mode accumulation from a scalar root. Gradients add into the
// .grad of every requires_grad node reachable from the root.
inline void backward(const Var& root) {
    if (!root->requires_grad) return;
    if (root->val.numel() != 1) throw ShapeError("backward root must be scalar");

    // iterative post-order DFS for a topological order
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.numel() == n->val.numel()) n->backprop(*n);
    }
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "add");
    Tensor out = a->val + b->val;
    Node* pa = a.get(); Node* pb = b.get();
    return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "sub");
    Tensor out = a->val - b->val;
    Node* pa = a.get(); Node* pb = b.get();
    return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "mul");
    Tensor out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    Node* pa = a.get(); Node* pb = b.get();
    return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * pb->val[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i] * pa->val[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->val * s;
    Node* pa = a.get();
    return detail::make_op(std::move(out), {a}, [pa, s](Node& self) {
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    Node* pa = a.get();
    return detail::make_op(std::move(out), {a}, [pa](Node& self) {
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
    });
}

inline Var gelu(const Var& a) {
    Tensor out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double x = out[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
    }
    Node* pa = a.get();
    return detail::make_op(std::move(out), {a}, [pa](Node& self) {
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
            const double x = pa->val[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
            pa->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---- matrix ops ----

inline Var matmul(const Var& a, const Var& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
        throw ShapeError("matmul: " + a->val.shape_str() + " x " + b->val.shape_str());
    const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    Tensor out({m, n});
    {
        const double* A = a->val.data();
        const double* B = b->val.data();
        double* C = out.data();
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                if (av == 0.0) continue;
                const double* brow = B + static_cast<std::size_t>(p) * n;
                double* crow = C + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }
    Node* pa = a.get(); Node* pb = b.get();
    return detail::make_op(std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
        const double* G = self.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            const double* B = pb->val.data();
            double* GA = pa->grad.data();
            // dA = G * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p) GA[i * k + p] += g * B[p * n + j];
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            const double* A = pa->val.data();
            double* GB = pb->grad.data();
            // dB = A^T * G
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    if (av == 0.0) continue;
                    for (int j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
                }
        }
    });
}

// a [m,k] x b^T where b is [n,k]  ->  [m,n]
inline Var matmul_nt(const Var& a, const Var& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(1))
        throw ShapeError("matmul_nt: " + a->val.shape_str() + " x " + b->val.shape_str());
    const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(0);
    Tensor out({m, n});
    {
        const double* A = a->val.data();
        const double* B = b->val.data();
        double* C = out.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double* arow = A + static_cast<std::size_t>(i) * k;
                const double* brow = B + static_cast<std::size_t>(j) * k;
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
                C[i * n + j] = s;
            }
    }
    Node* pa = a.get(); Node* pb = b.get();
    return detail::make_op(std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
        const double* G = self.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            const double* B = pb->val.data();
            double* GA = pa->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p) GA[i * k + p] += g * B[j * k + p];
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            const double* A = pa->val.data();
            double* GB = pb->grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p) GB[j * k + p] += g * A[i * k + p];
                }
        }
    });
}

// y = x * W^T + b, with x [S,in], W [out,in], b [out] (optional)
inline Var linear(const Var& x, const Var& w, const Var& b) {
    if (x->val.rank() != 2 || w->val.rank() != 2 || x->val.dim(1) != w->val.dim(1))
        throw ShapeError("linear: x " + x->val.shape_str() + " w " + w->val.shape_str());
    const int S = x->val.dim(0), in = x->val.dim(1), out_dim = w->val.dim(0);
    if (b && b->val.numel() != out_dim) throw ShapeError("linear: bias size mismatch");
    Tensor out({S, out_dim});
    {
        const double* X = x->val.data();
        const double* W = w->val.data();
        double* Y = out.data();
        for (int s = 0; s < S; ++s) {
            const double* xrow = X + static_cast<std::size_t>(s) * in;
            double* yrow = Y + static_cast<std::size_t>(s) * out_dim;
            for (int o = 0; o < out_dim; ++o) {
                const double* wrow = W + static_cast<std::size_t>(o) * in;
                double acc = b ? b->val[o] : 0.0;
                for (int i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
                yrow[o] = acc;
            }
        }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Node* px = x.get(); Node* pw = w.get(); Node* pb = b ? b.get() : nullptr;
    return detail::make_op(std::move(out), std::move(parents), [px, pw, pb, S, in, out_dim](Node& self) {
        const double* G = self.grad.data();
        if (px->requires_grad) {
            px->ensure_grad();
            const double* W = pw->val.data();
            double* GX = px->grad.data();
            for (int s = 0; s < S; ++s)
                for (int o = 0; o < out_dim; ++o) {
                    const double g = G[s * out_dim + o];
                    if (g == 0.0) continue;
                    const double* wrow = W + static_cast<std::size_t>(o) * in;
                    double* gxrow = GX + static_cast<std::size_t>(s) * in;
                    for (int i = 0; i < in; ++i) gxrow[i] += g * wrow[i];
                }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            const double* X = px->val.data();
            double* GW = pw->grad.data();
            for (int s = 0; s < S; ++s)
                for (int o = 0; o < out_dim; ++o) {
                    const double g = G[s * out_dim + o];
                    if (g == 0.0) continue;
                    const double* xrow = X + static_cast<std::size_t>(s) * in;
                    double* gwrow = GW + static_cast<std::size_t>(o) * in;
                    for (int i = 0; i < in; ++i) gwrow[i] += g * xrow[i];
                }
        }
        if (pb && pb->requires_grad) {
            pb->ensure_grad();
            for (int s = 0; s < S; ++s)
                for (int o = 0; o < out_dim; ++o) pb->grad[o] += G[s * out_dim + o];
        }
    });
}

// ---- broadcast helpers (row vector over rows of a matrix) ----

inline Var add_rowvec(const Var& x, const Var& v) {
    if (x->val.rank() != 2 || x->val.dim(1) != v->val.numel())
        throw ShapeError("add_rowvec: " + x->val.shape_str() + " + " + v->val.shape_str());
    const int S = x->val.dim(0), d = x->val.dim(1);
    Tensor out = x->val;
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < d; ++i) out[static_cast<std::int64_t>(s) * d + i] += v->val[i];
    Node* px = x.get(); Node* pv = v.get();
    return detail::make_op(std::move(out), {x, v}, [px, pv, S, d](Node& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) px->grad[i] += self.grad[i];
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int s = 0; s < S; ++s)
                for (int i = 0; i < d; ++i) pv->grad[i] += self.grad[static_cast<std::int64_t>(s) * d + i];
        }
    });
}

inline Var mul_rowvec(const Var& x, const Var& v) {
    if (x->val.rank() != 2 || x->val.dim(1) != v->val.numel())
        throw ShapeError("mul_rowvec: " + x->val.shape_str() + " * " + v->val.shape_str());
    const int S = x->val.dim(0), d = x->val.dim(1);
    Tensor out = x->val;
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < d; ++i) out[static_cast<std::int64_t>(s) * d + i] *= v->val[i];
    Node* px = x.get(); Node* pv = v.get();
    return detail::make_op(std::move(out), {x, v}, [px, pv, S, d](Node& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (int s = 0; s < S; ++s)
                for (int i = 0; i < d; ++i) {
                    const std::int64_t k = static_cast<std::int64_t>(s) * d + i;
                    px->grad[k] += self.grad[k] * pv->val[i];
                }
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int s = 0; s < S; ++s)
                for (int i = 0; i < d; ++i) {
                    const std::int64_t k = static_cast<std::int64_t>(s) * d + i;
                    pv->grad[i] += self.grad[k] * px->val[k];
                }
        }
    });
}

inline Var repeat_row(const Var& v, int rows) {
    const int d = static_cast<int>(v->val.numel());
    Tensor out({rows, d});
    for (int s = 0; s < rows; ++s)
        for (int i = 0; i < d; ++i) out.at(s, i) = v->val[i];
    Node* pv = v.get();
    return detail::make_op(std::move(out), {v}, [pv, rows, d](Node& self) {
        pv->ensure_grad();
        for (int s = 0; s < rows; ++s)
            for (int i = 0; i < d; ++i) pv->grad[i] += self.grad.at(s, i);
    });
}

// ---- normalization / attention ----

inline Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    if (x->val.rank() != 2) throw ShapeError("layernorm_rows needs rank 2");
    const int S = x->val.dim(0), d = x->val.dim(1);
    if (gamma->val.numel() != d || beta->val.numel() != d) throw ShapeError("layernorm affine size mismatch");
    Tensor out({S, d});
    auto mu = std::make_shared<std::vector<double>>(S);
    auto inv_sigma = std::make_shared<std::vector<double>>(S);
    for (int s = 0; s < S; ++s) {
        const double* row = x->val.data() + static_cast<std::size_t>(s) * d;
        double m = 0.0;
        for (int i = 0; i < d; ++i) m += row[i];
        m /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) { const double c = row[i] - m; var += c * c; }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*mu)[s] = m;
        (*inv_sigma)[s] = is;
        for (int i = 0; i < d; ++i) out.at(s, i) = (row[i] - m) * is * gamma->val[i] + beta->val[i];
    }
    Node* px = x.get(); Node* pg = gamma.get(); Node* pb = beta.get();
    return detail::make_op(std::move(out), {x, gamma, beta}, [px, pg, pb, S, d, mu, inv_sigma](Node& self) {
        for (int s = 0; s < S; ++s) {
            const double* xrow = px->val.data() + static_cast<std::size_t>(s) * d;
            const double* grow = self.grad.data() + static_cast<std::size_t>(s) * d;
            const double m = (*mu)[s], is = (*inv_sigma)[s];
            if (pg->requires_grad || pb->requires_grad) {
                if (pg->requires_grad) pg->ensure_grad();
                if (pb->requires_grad) pb->ensure_grad();
                for (int i = 0; i < d; ++i) {
                    const double xhat = (xrow[i] - m) * is;
                    if (pg->requires_grad) pg->grad[i] += grow[i] * xhat;
                    if (pb->requires_grad) pb->grad[i] += grow[i];
                }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                double sum_gx = 0.0, sum_gxx = 0.0;
                for (int i = 0; i < d; ++i) {
                    const double gxhat = grow[i] * pg->val[i];
                    const double xhat = (xrow[i] - m) * is;
                    sum_gx += gxhat;
                    sum_gxx += gxhat * xhat;
                }
                const double inv_d = 1.0 / d;
                double* gxrow = px->grad.data() + static_cast<std::size_t>(s) * d;
                for (int i = 0; i < d; ++i) {
                    const double gxhat = grow[i] * pg->val[i];
                    const double xhat = (xrow[i] - m) * is;
                    gxrow[i] += is * (gxhat - inv_d * sum_gx - xhat * inv_d * sum_gxx);
                }
            }
        }
    });
}

// Row-wise softmax; keys where key_mask[j] == 0 are excluded (additive -inf).
inline Var softmax_rows(const Var& x, const std::vector<char>* key_mask = nullptr) {
    if (x->val.rank() != 2) throw ShapeError("softmax_rows needs rank 2");
    const int m = x->val.dim(0), n = x->val.dim(1);
    if (key_mask && static_cast<int>(key_mask->size()) != n) throw ShapeError("softmax mask size mismatch");
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* row = x->val.data() + static_cast<std::size_t>(i) * n;
        double mx = -1e300;
        for (int j = 0; j < n; ++j)
            if (!key_mask || (*key_mask)[j]) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = (!key_mask || (*key_mask)[j]) ? std::exp(row[j] - mx) : 0.0;
            out.at(i, j) = e;
            z += e;
        }
        const double iz = 1.0 / z;
        for (int j = 0; j < n; ++j) out.at(i, j) *= iz;
    }
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, m, n](Node& self) {
        px->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = self.val.data() + static_cast<std::size_t>(i) * n;
            const double* g = self.grad.data() + static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += y[j] * g[j];
            double* gx = px->grad.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    });
}

// ---- structural ops ----

inline Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->val.reshaped(shape);
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px](Node& self) {
        px->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) px->grad[i] += self.grad[i];
    });
}

// Concatenate along dim 0; all other dims must match.
inline Var concat_axis0(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_axis0: empty");
    std::vector<int> shape = parts[0]->val.shape();
    std::int64_t inner = parts[0]->val.numel() / shape[0];
    int total = 0;
    for (const auto& p : parts) {
        if (p->val.rank() != static_cast<int>(shape.size()) || p->val.numel() / p->val.dim(0) != inner)
            throw ShapeError("concat_axis0: incompatible shapes");
        total += p->val.dim(0);
    }
    shape[0] = total;
    Tensor out(shape);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->val.data(), p->val.data() + p->val.numel(), out.data() + off);
        off += p->val.numel();
    }
    std::vector<Node*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    return detail::make_op(std::move(out), parts, [raw](Node& self) {
        std::int64_t off2 = 0;
        for (Node* p : raw) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::int64_t i = 0; i < p->val.numel(); ++i) p->grad[i] += self.grad[off2 + i];
            }
            off2 += p->val.numel();
        }
    });
}

// Contiguous slice [r0, r1) along dim 0.
inline Var slice_axis0(const Var& x, int r0, int r1) {
    if (r0 < 0 || r1 > x->val.dim(0) || r0 >= r1) throw ShapeError("slice_axis0 bounds");
    std::vector<int> shape = x->val.shape();
    const std::int64_t inner = x->val.numel() / shape[0];
    shape[0] = r1 - r0;
    Tensor out(shape);
    std::copy(x->val.data() + r0 * inner, x->val.data() + r1 * inner, out.data());
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, r0, inner](Node& self) {
        px->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) px->grad[r0 * inner + i] += self.grad[i];
    });
}

inline Var slice_cols(const Var& x, int c0, int c1) {
    if (x->val.rank() != 2 || c0 < 0 || c1 > x->val.dim(1) || c0 >= c1) throw ShapeError("slice_cols bounds");
    const int m = x->val.dim(0), n = x->val.dim(1), w = c1 - c0;
    Tensor out({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = x->val.at(i, c0 + j);
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, m, n, c0, w](Node& self) {
        px->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) px->grad[static_cast<std::int64_t>(i) * n + c0 + j] += self.grad.at(i, j);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    const int m = parts[0]->val.dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p->val.rank() != 2 || p->val.dim(0) != m) throw ShapeError("concat_cols: incompatible shapes");
        total += p->val.dim(1);
    }
    Tensor out({m, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->val.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out.at(i, off + j) = p->val.at(i, j);
        off += w;
    }
    std::vector<Node*> raw;
    std::vector<int> widths;
    for (const auto& p : parts) { raw.push_back(p.get()); widths.push_back(p->val.dim(1)); }
    return detail::make_op(std::move(out), parts, [raw, widths, m](Node& self) {
        int off2 = 0;
        for (std::size_t k = 0; k < raw.size(); ++k) {
            Node* p = raw[k];
            const int w = widths[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) p->grad[static_cast<std::int64_t>(i) * w + j] += self.grad.at(i, off2 + j);
            }
            off2 += w;
        }
    });
}

// Swap the first two axes of a rank-4 tensor ([N,C,H,W] <-> [C,N,H,W]).
inline Var swap_axes01(const Var& x) {
    if (x->val.rank() != 4) throw ShapeError("swap_axes01 needs rank 4");
    const int A = x->val.dim(0), B = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({B, A, H, W});
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at(b, a, h, w) = x->val.at(a, b, h, w);
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, A, B, H, W](Node& self) {
        px->ensure_grad();
        for (int a = 0; a < A; ++a)
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) px->grad.at(a, b, h, w) += self.grad.at(b, a, h, w);
    });
}

// ---- convolution / resampling (video tensors are [C, T, H, W]) ----

struct Conv3dSpec {
    int st = 1, sh = 1, sw = 1;  // strides
    int pt = 0, ph = 0, pw = 0;  // temporal pad applied to the FRONT only
                                 // (causal); spatial pads symmetric
};

inline Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& sp) {
    if (x->val.rank() != 4 || w->val.rank() != 5) throw ShapeError("conv3d: x must be [C,T,H,W], w [Co,Ci,kt,kh,kw]");
    const int Ci = x->val.dim(0), T = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    const int Co = w->val.dim(0), kt = w->val.dim(2), kh = w->val.dim(3), kw = w->val.dim(4);
    if (w->val.dim(1) != Ci) throw ShapeError("conv3d: channel mismatch");
    if (b && b->val.numel() != Co) throw ShapeError("conv3d: bias size mismatch");
    const int To = (T + sp.pt - kt) / sp.st + 1;
    const int Ho = (H + 2 * sp.ph - kh) / sp.sh + 1;
    const int Wo = (W + 2 * sp.pw - kw) / sp.sw + 1;
    if (To <= 0 || Ho <= 0 || Wo <= 0) throw ShapeError("conv3d: output collapses to zero");

    Tensor out({Co, To, Ho, Wo});
    const double* X = x->val.data();
    const double* Wt = w->val.data();
    double* Y = out.data();
    auto xidx = [&](int c, int t, int h, int ww) {
        return ((static_cast<std::size_t>(c) * T + t) * H + h) * W + ww;
    };
    for (int co = 0; co < Co; ++co) {
        const double bias = b ? b->val[co] : 0.0;
        for (int to = 0; to < To; ++to) {
            const int t0 = to * sp.st - sp.pt;
            for (int ho = 0; ho < Ho; ++ho) {
                const int h0 = ho * sp.sh - sp.ph;
                for (int wo = 0; wo < Wo; ++wo) {
                    const int w0 = wo * sp.sw - sp.pw;
                    double acc = bias;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int dt = 0; dt < kt; ++dt) {
                            const int t = t0 + dt;
                            if (t < 0 || t >= T) continue;
                            for (int dh = 0; dh < kh; ++dh) {
                                const int h = h0 + dh;
                                if (h < 0 || h >= H) continue;
                                const double* wrow = Wt + (((static_cast<std::size_t>(co) * Ci + ci) * kt + dt) * kh + dh) * kw;
                                const double* xrow = X + xidx(ci, t, h, 0);
                                for (int dw = 0; dw < kw; ++dw) {
                                    const int ww = w0 + dw;
                                    if (ww < 0 || ww >= W) continue;
                                    acc += wrow[dw] * xrow[ww];
                                }
                            }
                        }
                    Y[((static_cast<std::size_t>(co) * To + to) * Ho + ho) * Wo + wo] = acc;
                }
            }
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Node* px = x.get(); Node* pw = w.get(); Node* pb = b ? b.get() : nullptr;
    return detail::make_op(std::move(out), std::move(parents),
                           [px, pw, pb, sp, Ci, T, H, W, Co, kt, kh, kw, To, Ho, Wo](Node& self) {
        const double* G = self.grad.data();
        const bool need_x = px->requires_grad;
        const bool need_w = pw->requires_grad;
        const bool need_b = pb && pb->requires_grad;
        if (need_x) px->ensure_grad();
        if (need_w) pw->ensure_grad();
        if (need_b) pb->ensure_grad();
        const double* X = px->val.data();
        const double* Wt = pw->val.data();
        double* GX = need_x ? px->grad.data() : nullptr;
        double* GW = need_w ? pw->grad.data() : nullptr;
        for (int co = 0; co < Co; ++co)
            for (int to = 0; to < To; ++to) {
                const int t0 = to * sp.st - sp.pt;
                for (int ho = 0; ho < Ho; ++ho) {
                    const int h0 = ho * sp.sh - sp.ph;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const double g = G[((static_cast<std::size_t>(co) * To + to) * Ho + ho) * Wo + wo];
                        if (g == 0.0) continue;
                        if (need_b) pb->grad[co] += g;
                        const int w0 = wo * sp.sw - sp.pw;
                        for (int ci = 0; ci < Ci; ++ci)
                            for (int dt = 0; dt < kt; ++dt) {
                                const int t = t0 + dt;
                                if (t < 0 || t >= T) continue;
                                for (int dh = 0; dh < kh; ++dh) {
                                    const int h = h0 + dh;
                                    if (h < 0 || h >= H) continue;
                                    const std::size_t wbase = (((static_cast<std::size_t>(co) * Ci + ci) * kt + dt) * kh + dh) * kw;
                                    const std::size_t xbase = ((static_cast<std::size_t>(ci) * T + t) * H + h) * W;
                                    for (int dw = 0; dw < kw; ++dw) {
                                        const int ww = w0 + dw;
                                        if (ww < 0 || ww >= W) continue;
                                        if (need_x) GX[xbase + ww] += g * Wt[wbase + dw];
                                        if (need_w) GW[wbase + dw] += g * X[xbase + ww];
                                    }
                                }
                            }
                    }
                }
            }
    });
}

inline Var upsample_nearest3d(const Var& x, int ft, int fh, int fw) {
    if (x->val.rank() != 4) throw ShapeError("upsample_nearest3d needs [C,T,H,W]");
    const int C = x->val.dim(0), T = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({C, T * ft, H * fh, W * fw});
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T * ft; ++t)
            for (int h = 0; h < H * fh; ++h)
                for (int w = 0; w < W * fw; ++w)
                    out.at(c, t, h, w) = x->val.at(c, t / ft, h / fh, w / fw);
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, C, T, H, W, ft, fh, fw](Node& self) {
        px->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T * ft; ++t)
                for (int h = 0; h < H * fh; ++h)
                    for (int w = 0; w < W * fw; ++w)
                        px->grad.at(c, t / ft, h / fh, w / fw) += self.grad.at(c, t, h, w);
    });
}

// [d, N, Hp, Wp] -> [N*Hp*Wp, d] with token order frame-major, then row, col.
inline Var conv_out_to_tokens(const Var& x) {
    if (x->val.rank() != 4) throw ShapeError("conv_out_to_tokens needs rank 4");
    const int d = x->val.dim(0), N = x->val.dim(1), Hp = x->val.dim(2), Wp = x->val.dim(3);
    const int S = N * Hp * Wp;
    Tensor out({S, d});
    for (int c = 0; c < d; ++c)
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < Hp; ++i)
                for (int j = 0; j < Wp; ++j)
                    out.at((n * Hp + i) * Wp + j, c) = x->val.at(c, n, i, j);
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, d, N, Hp, Wp](Node& self) {
        px->ensure_grad();
        for (int c = 0; c < d; ++c)
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < Hp; ++i)
                    for (int j = 0; j < Wp; ++j)
                        px->grad.at(c, n, i, j) += self.grad.at((n * Hp + i) * Wp + j, c);
    });
}

// Token grid [N*Hp*Wp, p*p*C] -> latent video [N, C, Hp*p, Wp*p].
inline Var tokens_to_latent(const Var& x, int N, int C, int Hp, int Wp, int p) {
    if (x->val.rank() != 2 || x->val.dim(0) != N * Hp * Wp || x->val.dim(1) != p * p * C)
        throw ShapeError("tokens_to_latent: bad token block " + x->val.shape_str());
    Tensor out({N, C, Hp * p, Wp * p});
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < Hp; ++i)
            for (int j = 0; j < Wp; ++j) {
                const int s = (n * Hp + i) * Wp + j;
                for (int c = 0; c < C; ++c)
                    for (int pi = 0; pi < p; ++pi)
                        for (int pj = 0; pj < p; ++pj)
                            out.at(n, c, i * p + pi, j * p + pj) = x->val.at(s, (c * p + pi) * p + pj);
            }
    Node* px = x.get();
    return detail::make_op(std::move(out), {x}, [px, N, C, Hp, Wp, p](Node& self) {
        px->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < Hp; ++i)
                for (int j = 0; j < Wp; ++j) {
                    const int s = (n * Hp + i) * Wp + j;
                    for (int c = 0; c < C; ++c)
                        for (int pi = 0; pi < p; ++pi)
                            for (int pj = 0; pj < p; ++pj)
                                px->grad.at(s, (c * p + pi) * p + pj) += self.grad.at(n, c, i * p + pi, j * p + pj);
                }
    });
}

// ---- reductions / losses (double accumulation) ----

inline Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x->val.numel());
    double s = 0.0;
    for (std::int64_t i = 0; i < x->val.numel(); ++i) s += x->val[i];
    Node* px = x.get();
    return detail::make_op(Tensor::scalar(s * inv), {x}, [px, inv](Node& self) {
        px->ensure_grad();
        const double g = self.grad[0] * inv;
        for (std::int64_t i = 0; i < px->grad.numel(); ++i) px->grad[i] += g;
    });
}

// w * mean((pred - target)^2)
inline Var mse_loss(const Var& pred, const Tensor& target, double w = 1.0) {
    require_same_shape(pred->val, target, "mse_loss");
    const std::int64_t n = pred->val.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pred->val[i] - target[i];
        s += d * d;
    }
    auto tgt = std::make_shared<Tensor>(target);
    Node* pp = pred.get();
    return detail::make_op(Tensor::scalar(w * s / static_cast<double>(n)), {pred}, [pp, tgt, w, n](Node& self) {
        pp->ensure_grad();
        const double c = self.grad[0] * w * 2.0 / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) pp->grad[i] += c * (pp->val[i] - (*tgt)[i]);
    });
}

// Motion-weighted noise objective over [N,C,H,W] prediction/target with
// per-pixel weights [N,H,W]; squared error is averaged over channels before
// weighting, and the normalizer is N*H*W.
inline Var weighted_channel_mse(const Var& pred, const Tensor& target, const Tensor& weights) {
    require_same_shape(pred->val, target, "weighted_channel_mse");
    if (pred->val.rank() != 4) throw ShapeError("weighted_channel_mse needs [N,C,H,W]");
    const int N = pred->val.dim(0), C = pred->val.dim(1), H = pred->val.dim(2), W = pred->val.dim(3);
    if (weights.rank() != 3 || weights.dim(0) != N || weights.dim(1) != H || weights.dim(2) != W)
        throw ShapeError("weighted_channel_mse: weights must be [N,H,W]");
    double s = 0.0;
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double ch = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double d = pred->val.at(n, c, h, w) - target.at(n, c, h, w);
                    ch += d * d;
                }
                s += weights.at(n, h, w) * ch / static_cast<double>(C);
            }
    const double norm = static_cast<double>(N) * H * W;
    auto tgt = std::make_shared<Tensor>(target);
    auto wts = std::make_shared<Tensor>(weights);
    Node* pp = pred.get();
    return detail::make_op(Tensor::scalar(s / norm), {pred}, [pp, tgt, wts, N, C, H, W, norm](Node& self) {
        pp->ensure_grad();
        const double g = self.grad[0];
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double c0 = g * wts->at(n, h, w) * 2.0 / (norm * C);
                    for (int c = 0; c < C; ++c)
                        pp->grad.at(n, c, h, w) += c0 * (pp->val.at(n, c, h, w) - tgt->at(n, c, h, w));
                }
    });
}

} // namespace ag
} // namespace ska1
