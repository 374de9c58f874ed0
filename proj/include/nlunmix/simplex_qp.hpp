#ifndef NLUNMIX_SIMPLEX_QP_HPP
#define NLUNMIX_SIMPLEX_QP_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "data_model.hpp"

namespace nlunmix {

struct SimplexQpResult {
    Vector a;       // minimizer, on the unit simplex
    double lambda;  // multiplier of 1'a = 1
    Vector gamma;   // multipliers of a >= 0, gamma = H a - f + lambda 1
    int iterations;
};

/// Primal active-set method for
///   min 1/2 a'Ha - f'a   subject to a >= 0, 1'a = 1,
/// with H symmetric positive definite (small P). Multipliers follow the
/// Lagrangian 1/2 a'Ha - f'a + lambda (1'a - 1) - gamma'a.
inline SimplexQpResult simplex_qp(const Matrix& h, const Vector& f, int max_iter = 200) {
    const Index p = f.size();
    if (h.rows() != p || h.cols() != p) throw DimensionMismatch("simplex_qp: H and f sizes differ");
    const double tol = 1e-13 * (1.0 + h.cwiseAbs().maxCoeff() + f.cwiseAbs().maxCoeff());

    std::vector<char> in(static_cast<std::size_t>(p), 0);
    Index start = 0;
    {
        double best = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < p; ++i) {
            const double v = 0.5 * h(i, i) - f(i);
            if (v < best) best = v, start = i;
        }
    }
    in[static_cast<std::size_t>(start)] = 1;
    Vector a = Vector::Zero(p);
    a(start) = 1.0;

    for (int it = 1; it <= max_iter; ++it) {
        std::vector<Index> s;
        for (Index i = 0; i < p; ++i)
            if (in[static_cast<std::size_t>(i)]) s.push_back(i);
        const Index m = static_cast<Index>(s.size());
        Matrix kkt = Matrix::Zero(m + 1, m + 1);
        Vector rhs(m + 1);
        for (Index i = 0; i < m; ++i) {
            for (Index j = 0; j < m; ++j) kkt(i, j) = h(s[i], s[j]);
            kkt(i, m) = kkt(m, i) = 1.0;
            rhs(i) = f(s[i]);
        }
        rhs(m) = 1.0;
        const Vector sol = kkt.partialPivLu().solve(rhs);
        const double lambda = sol(m);

        bool feasible = true;
        for (Index i = 0; i < m; ++i)
            if (sol(i) < 0.0) feasible = false;

        if (feasible) {
            a.setZero();
            for (Index i = 0; i < m; ++i) a(s[i]) = sol(i);
            Vector gamma = h * a - f + Vector::Constant(p, lambda);
            Index enter = -1;
            double most_negative = -tol;
            for (Index i = 0; i < p; ++i) {
                if (in[static_cast<std::size_t>(i)]) {
                    gamma(i) = 0.0;
                } else if (gamma(i) < most_negative) {
                    most_negative = gamma(i);
                    enter = i;
                }
            }
            if (enter < 0) return {a, lambda, gamma.cwiseMax(0.0), it};
            in[static_cast<std::size_t>(enter)] = 1;
            continue;
        }

        // Move towards the subproblem solution until a support entry hits zero.
        double alpha = 1.0;
        Index blocking = -1;
        for (Index i = 0; i < m; ++i) {
            const double cur = a(s[i]), tgt = sol(i);
            if (tgt < 0.0) {
                const double t = cur / (cur - tgt);
                if (t < alpha) alpha = t, blocking = s[i];
            }
        }
        for (Index i = 0; i < m; ++i) a(s[i]) += alpha * (sol(i) - a(s[i]));
        if (blocking >= 0) a(blocking) = 0.0;
        for (Index i = 0; i < m; ++i)
            if (a(s[i]) <= 0.0) {
                a(s[i]) = 0.0;
                in[static_cast<std::size_t>(s[i])] = 0;
            }
    }
    throw ConvergenceError("simplex_qp: active set did not settle");
}

/// Lawson-Hanson nonnegative least squares, min |Ax - b|^2 subject to x >= 0.
inline Vector nnls(const Matrix& a, const Vector& b, int max_iter = 0) {
    const Index n = a.cols();
    if (a.rows() != b.size()) throw DimensionMismatch("nnls: A and b sizes differ");
    if (max_iter <= 0) max_iter = static_cast<int>(30 * n + 30);
    // Lawson-Hanson threshold on the dual vector: 10 eps max(m, n) |A|_1 |b|.
    const double tol = 10.0 * std::numeric_limits<double>::epsilon() *
                       static_cast<double>(std::max(a.rows(), n)) * a.cwiseAbs().colwise().sum().maxCoeff() *
                       std::max(1.0, b.norm());
    Vector x = Vector::Zero(n);
    std::vector<char> passive(static_cast<std::size_t>(n), 0);

    auto solve_passive = [&](std::vector<Index>& cols) {
        Matrix sub(a.rows(), static_cast<Index>(cols.size()));
        for (Index j = 0; j < sub.cols(); ++j) sub.col(j) = a.col(cols[static_cast<std::size_t>(j)]);
        return Vector(sub.colPivHouseholderQr().solve(b));
    };

    for (int outer = 0; outer < max_iter; ++outer) {
        const Vector w = a.transpose() * (b - a * x);
        Index enter = -1;
        double best = tol;
        for (Index j = 0; j < n; ++j)
            if (!passive[static_cast<std::size_t>(j)] && w(j) > best) best = w(j), enter = j;
        if (enter < 0) return x;
        passive[static_cast<std::size_t>(enter)] = 1;

        for (int inner = 0; inner < max_iter; ++inner) {
            std::vector<Index> cols;
            for (Index j = 0; j < n; ++j)
                if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
            const Vector z = solve_passive(cols);
            if (inner == 0) {
                // Entering column cannot improve the fit: already optimal up to round-off.
                const auto pos = std::find(cols.begin(), cols.end(), enter) - cols.begin();
                if (z(static_cast<Index>(pos)) <= 0.0) {
                    passive[static_cast<std::size_t>(enter)] = 0;
                    return x;
                }
            }
            bool ok = true;
            for (Index k = 0; k < z.size(); ++k)
                if (z(k) <= 0.0) ok = false;
            if (ok) {
                x.setZero();
                for (Index k = 0; k < z.size(); ++k) x(cols[static_cast<std::size_t>(k)]) = z(k);
                break;
            }
            double alpha = 1.0;
            for (Index k = 0; k < z.size(); ++k) {
                const Index j = cols[static_cast<std::size_t>(k)];
                if (z(k) <= 0.0) alpha = std::min(alpha, x(j) / (x(j) - z(k)));
            }
            for (Index k = 0; k < z.size(); ++k) {
                const Index j = cols[static_cast<std::size_t>(k)];
                x(j) += alpha * (z(k) - x(j));
                if (x(j) <= tol * 1e-3) {
                    x(j) = 0.0;
                    passive[static_cast<std::size_t>(j)] = 0;
                }
            }
        }
    }
    throw ConvergenceError("nnls: iteration limit reached");
}

}  // namespace nlunmix

#endif  // NLUNMIX_SIMPLEX_QP_HPP
