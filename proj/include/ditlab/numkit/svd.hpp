#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

struct SvdResult {
    Tensor u;       // [m x k], k = min(m, n)
    Tensor s;       // [k], non-negative, descending
    Tensor v;       // [n x k]
};

// One-sided Jacobi SVD. Rotates column pairs of the (tall) working matrix
// until all pairs are numerically orthogonal; singular values are the
// resulting column norms. Accurate and dependency-free at the <=256x256
// scale this library needs.
inline SvdResult svd(const Tensor& m_in) {
    if (m_in.ndim() != 2) throw ShapeError("svd: expects 2-d tensor");
    size_t r = m_in.rows(), c = m_in.cols();
    bool transposed = r < c;
    size_t m = transposed ? c : r;
    size_t n = transposed ? r : c;

    // work: m x n with m >= n, column-major access pattern via row-major at()
    Tensor work({m, n});
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) {
            if (transposed) work.at(j, i) = m_in.at(i, j);
            else work.at(i, j) = m_in.at(i, j);
        }

    Tensor v({n, n});
    for (size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

    const double tol = 1e-14;
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (size_t p = 0; p + 1 < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (size_t i = 0; i < m; ++i) {
                    double wp = work.at(i, p), wq = work.at(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if (std::fabs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                rotated = true;
                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = ((zeta >= 0.0) ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                for (size_t i = 0; i < m; ++i) {
                    double wp = work.at(i, p), wq = work.at(i, q);
                    work.at(i, p) = cs * wp - sn * wq;
                    work.at(i, q) = sn * wp + cs * wq;
                }
                for (size_t i = 0; i < n; ++i) {
                    double vp = v.at(i, p), vq = v.at(i, q);
                    v.at(i, p) = cs * vp - sn * vq;
                    v.at(i, q) = sn * vp + cs * vq;
                }
            }
        }
        if (!rotated) break;
    }

    Tensor s({n});
    Tensor u({m, n});
    for (size_t j = 0; j < n; ++j) {
        double norm = 0.0;
        for (size_t i = 0; i < m; ++i) norm += work.at(i, j) * work.at(i, j);
        norm = std::sqrt(norm);
        s.at(j) = norm;
        if (norm > 0.0) {
            for (size_t i = 0; i < m; ++i) u.at(i, j) = work.at(i, j) / norm;
        }
        // zero singular value: leave the u column zero; it never contributes
    }

    // sort descending
    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](size_t a, size_t b) { return s.at(a) > s.at(b); });
    Tensor s2({n}), u2({m, n}), v2({n, n});
    for (size_t j = 0; j < n; ++j) {
        s2.at(j) = s.at(perm[j]);
        for (size_t i = 0; i < m; ++i) u2.at(i, j) = u.at(i, perm[j]);
        for (size_t i = 0; i < n; ++i) v2.at(i, j) = v.at(i, perm[j]);
    }

    SvdResult res;
    if (transposed) {
        res.u = std::move(v2);
        res.v = std::move(u2);
    } else {
        res.u = std::move(u2);
        res.v = std::move(v2);
    }
    res.s = std::move(s2);
    return res;
}

/// Best rank-r approximation via truncated SVD.
inline Tensor low_rank_reconstruct(const Tensor& m, size_t rank) {
    if (m.ndim() != 2) throw ShapeError("low_rank_reconstruct: expects 2-d tensor");
    size_t k = std::min(m.rows(), m.cols());
    if (rank < 1 || rank > k) throw ShapeError("low_rank_reconstruct: rank out of range");
    SvdResult f = svd(m);
    Tensor out({m.rows(), m.cols()});
    for (size_t t = 0; t < rank; ++t) {
        double sv = f.s.at(t);
        if (sv == 0.0) break;
        for (size_t i = 0; i < m.rows(); ++i) {
            double us = f.u.at(i, t) * sv;
            for (size_t j = 0; j < m.cols(); ++j) out.at(i, j) += us * f.v.at(j, t);
        }
    }
    return out;
}

/// Reconstruct from precomputed factors (used when sweeping many ranks).
inline Tensor low_rank_from_factors(const SvdResult& f, size_t rows, size_t cols, size_t rank) {
    Tensor out({rows, cols});
    for (size_t t = 0; t < rank && t < f.s.numel(); ++t) {
        double sv = f.s.at(t);
        if (sv == 0.0) break;
        for (size_t i = 0; i < rows; ++i) {
            double us = f.u.at(i, t) * sv;
            for (size_t j = 0; j < cols; ++j) out.at(i, j) += us * f.v.at(j, t);
        }
    }
    return out;
}

}  // namespace ditlab
