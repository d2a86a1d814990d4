#pragma once

#include <cmath>
#include <vector>

#include "ska1/core/tensor.hpp"

namespace ska1 {

inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul_plain: " + a.shape_str() + " x " + b.shape_str());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) c.at(i, j) += av * b.at(p, j);
        }
    return c;
}

inline Tensor transpose_plain(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose_plain needs rank 2");
    Tensor t({a.dim(1), a.dim(0)});
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline double max_asymmetry(const Tensor& a) {
    double m = 0.0;
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = i + 1; j < a.dim(1); ++j) m = std::max(m, std::abs(a.at(i, j) - a.at(j, i)));
    return m;
}

struct EigenSym {
    std::vector<double> values; // ascending
    Tensor vectors;             // column j is the eigenvector of values[j]
};

// Cyclic Jacobi eigendecomposition for symmetric matrices. Deterministic and
// dependency-free; plenty fast for the matrix sizes used here (<= ~256).
inline EigenSym eigen_sym(const Tensor& input, int max_sweeps = 64) {
    if (input.rank() != 2 || input.dim(0) != input.dim(1))
        throw ShapeError("eigen_sym needs a square matrix, got " + input.shape_str());
    const int n = input.dim(0);
    Tensor a = input;
    // symmetrize tiny asymmetries so rotations stay consistent
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double v = 0.5 * (a.at(i, j) + a.at(j, i));
            a.at(i, j) = v;
            a.at(j, i) = v;
        }
    Tensor v({n, n});
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-26 * static_cast<double>(n * n)) break;

        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double theta = 0.5 * (aqq - app) / apq;
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (int k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    // sort ascending by eigenvalue, reordering columns
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int x, int y) { return a.at(x, x) < a.at(y, y); });

    EigenSym out;
    out.values.resize(static_cast<std::size_t>(n));
    out.vectors = Tensor({n, n});
    for (int j = 0; j < n; ++j) {
        const int src = order[static_cast<std::size_t>(j)];
        out.values[static_cast<std::size_t>(j)] = a.at(src, src);
        for (int i = 0; i < n; ++i) out.vectors.at(i, j) = v.at(i, src);
    }
    return out;
}

// Symmetric PSD square root via eigendecomposition; eigenvalues in
// [-clip_floor, 0) are clipped to zero, anything more negative is the
// caller's error to handle.
inline Tensor sqrt_psd(const Tensor& a, double clip_floor = 1e-8) {
    const EigenSym eig = eigen_sym(a);
    const int n = a.dim(0);
    Tensor r({n, n});
    for (int k = 0; k < n; ++k) {
        double lam = eig.values[static_cast<std::size_t>(k)];
        if (lam < 0.0) {
            if (lam < -clip_floor) throw InputError("matrix is not positive semi-definite (eigenvalue " + std::to_string(lam) + ")");
            lam = 0.0;
        }
        const double sl = std::sqrt(lam);
        for (int i = 0; i < n; ++i) {
            const double vi = eig.vectors.at(i, k) * sl;
            if (vi == 0.0) continue;
            for (int j = 0; j < n; ++j) r.at(i, j) += vi * eig.vectors.at(j, k);
        }
    }
    return r;
}

} // namespace ska1
