#ifndef NLUNMIX_DUAL_SOLVER_HPP
#define NLUNMIX_DUAL_SOLVER_HPP

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "data_model.hpp"
#include "detail/runtime.hpp"
#include "kernels.hpp"
#include "simplex_qp.hpp"

namespace nlunmix {

// ---------------------------------------------------------------------------
// Generic concave QP with nonnegativity constraints
// ---------------------------------------------------------------------------

/// Concave quadratic w'Bw + c'w, maximized subject to w[i] >= 0 for i in nonneg.
struct QuadraticForm {
    Matrix b;
    Vector c;
    std::vector<Index> nonneg;

    Index size() const { return c.size(); }

    double objective(const Vector& w) const { return w.dot(b * w) + c.dot(w); }

    // Shape, symmetry and strict concavity (largest eigenvalue <= -1e-12).
    void validate() const {
        if (b.rows() != b.cols() || b.rows() != c.size()) throw DimensionMismatch("QuadraticForm: B and c sizes differ");
        for (Index i : nonneg)
            if (i < 0 || i >= c.size()) throw InvalidArgument("QuadraticForm: nonneg index out of range");
        const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
        if ((b - b.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
            throw InvalidArgument("QuadraticForm: B is not symmetric");
        Eigen::SelfAdjointEigenSolver<Matrix> eig(b, Eigen::EigenvaluesOnly);
        if (eig.eigenvalues().maxCoeff() > -1e-12) throw InvalidArgument("QuadraticForm: B is not negative definite");
    }
};

/// Largest violation of the KKT conditions of a QuadraticForm at w:
/// stationarity on free coordinates, sign of the gradient on bound ones,
/// feasibility and complementarity.
inline double kkt_residual(const QuadraticForm& q, const Vector& w) {
    const Vector grad = 2.0 * (q.b * w) + q.c;
    std::vector<char> bounded(static_cast<std::size_t>(q.size()), 0);
    for (Index i : q.nonneg) bounded[static_cast<std::size_t>(i)] = 1;
    double worst = 0.0;
    for (Index i = 0; i < q.size(); ++i) {
        if (!bounded[static_cast<std::size_t>(i)]) {
            worst = std::max(worst, std::abs(grad(i)));
        } else {
            worst = std::max(worst, -w(i));
            worst = std::max(worst, grad(i));
            worst = std::max(worst, std::abs(w(i) * grad(i)));
        }
    }
    return worst;
}

/// Maximizes a strictly concave QuadraticForm over its nonnegativity
/// constraints with a primal active-set method. Each step solves the
/// stationarity system on the free coordinates in closed form.
inline Vector solve_inner_qp(const QuadraticForm& q, int max_iter = 0) {
    q.validate();
    const Index n = q.size();
    if (max_iter <= 0) max_iter = static_cast<int>(10 * (n + 10));
    // Minimize 1/2 w'Hw - c'w with H = -2B.
    const Matrix h = -2.0 * q.b;
    std::vector<char> bounded(static_cast<std::size_t>(n), 0), fixed(static_cast<std::size_t>(n), 0);
    for (Index i : q.nonneg) bounded[static_cast<std::size_t>(i)] = fixed[static_cast<std::size_t>(i)] = 1;
    const double tol = 1e-13 * (1.0 + h.cwiseAbs().maxCoeff()) * (1.0 + q.c.cwiseAbs().maxCoeff());

    Vector w = Vector::Zero(n);
    for (int it = 0; it < max_iter; ++it) {
        std::vector<Index> free;
        for (Index i = 0; i < n; ++i)
            if (!fixed[static_cast<std::size_t>(i)]) free.push_back(i);
        const Index m = static_cast<Index>(free.size());
        Vector z = Vector::Zero(n);
        if (m > 0) {
            Matrix hff(m, m);
            Vector cf(m);
            for (Index i = 0; i < m; ++i) {
                cf(i) = q.c(free[static_cast<std::size_t>(i)]);
                for (Index j = 0; j < m; ++j) hff(i, j) = h(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(j)]);
            }
            const Vector zf = hff.llt().solve(cf);
            for (Index i = 0; i < m; ++i) z(free[static_cast<std::size_t>(i)]) = zf(i);
        }

        double alpha = 1.0;
        Index blocking = -1;
        for (Index i : free) {
            if (!bounded[static_cast<std::size_t>(i)] || z(i) >= 0.0) continue;
            const double t = w(i) / (w(i) - z(i));
            if (t < alpha) alpha = t, blocking = i;
        }
        if (blocking >= 0) {
            w += alpha * (z - w);
            w(blocking) = 0.0;
            fixed[static_cast<std::size_t>(blocking)] = 1;
            continue;
        }
        w = z;
        // Release the bound coordinate whose gradient points most into the
        // feasible region.
        const Vector grad = q.c - h * w;
        Index release = -1;
        double best = tol;
        for (Index i = 0; i < n; ++i)
            if (fixed[static_cast<std::size_t>(i)] && grad(i) > best) best = grad(i), release = i;
        if (release < 0) {
            const double res = kkt_residual(q, w);
            if (res > 1e-8 * (1.0 + q.c.norm()))
                throw ConvergenceError("solve_inner_qp: KKT residual " + std::to_string(res) + " too large");
            return w;
        }
        fixed[static_cast<std::size_t>(release)] = 0;
    }
    throw ConvergenceError("solve_inner_qp: iteration limit reached (ill-conditioned B?)");
}

// ---------------------------------------------------------------------------
// Dual problems of the two scales
// ---------------------------------------------------------------------------

/// Coarse dual for a fixed mu0, block vector w = [beta (L); gamma (P); lambda]:
///   B_C = -1/2 [K + I/mu0 + MM',  M,  -M1;  M',  I,  -1;  -1'M',  -1',  P]
///   c_C = [y; 0; -1].
/// B_C is only negative semidefinite: (beta, gamma, lambda) = (0, 1, 1) lies
/// in its null space.
inline QuadraticForm coarse_dual_form(const GramMatrix& k, const Matrix& m, double mu0, const Vector& y) {
    const Index l = m.rows(), p = m.cols(), n = l + p + 1;
    const Vector ones = Vector::Ones(p);
    Matrix b = Matrix::Zero(n, n);
    b.topLeftCorner(l, l) = k.values + Matrix::Identity(l, l) / mu0 + m * m.transpose();
    b.block(0, l, l, p) = m;
    b.block(l, 0, p, l) = m.transpose();
    b.block(0, l + p, l, 1) = -m * ones;
    b.block(l + p, 0, 1, l) = -(m * ones).transpose();
    b.block(l, l, p, p) = Matrix::Identity(p, p);
    b.block(l, l + p, p, 1) = -ones;
    b.block(l + p, l, 1, p) = -ones.transpose();
    b(l + p, l + p) = static_cast<double>(p);
    b *= -0.5;
    Vector c = Vector::Zero(n);
    c.head(l) = y;
    c(n - 1) = -1.0;
    QuadraticForm q{std::move(b), std::move(c), {}};
    for (Index i = 0; i < p; ++i) q.nonneg.push_back(l + i);
    return q;
}

/// Fine dual for fixed (mu1, mu2), block vector w = [beta (L); mu3 (P); gamma (P); lambda].
inline QuadraticForm fine_dual_form(const GramMatrix& k, const Matrix& m, const Matrix& pinv, double mu1,
                                    double mu2, const Vector& y, const Vector& a_d, const Vector& psi_c) {
    const Index l = m.rows(), p = m.cols(), n = l + 2 * p + 1;
    const Vector ones = Vector::Ones(p);
    const Matrix& kk = k.values;
    Matrix b = Matrix::Zero(n, n);
    b.topLeftCorner(l, l) = kk + Matrix::Identity(l, l) / mu1 + m * m.transpose() / mu2;
    b.block(0, l, l, p) = -kk * pinv.transpose();
    b.block(l, 0, p, l) = -pinv * kk;
    b.block(0, l + p, l, p) = m / mu2;
    b.block(l + p, 0, p, l) = m.transpose() / mu2;
    b.block(0, l + 2 * p, l, 1) = -m * ones / mu2;
    b.block(l + 2 * p, 0, 1, l) = -(m * ones).transpose() / mu2;
    b.block(l, l, p, p) = Matrix::Identity(p, p) / mu2 + pinv * kk * pinv.transpose();
    b.block(l + p, l + p, p, p) = Matrix::Identity(p, p) / mu2;
    b.block(l + p, l + 2 * p, p, 1) = -ones / mu2;
    b.block(l + 2 * p, l + p, 1, p) = -ones.transpose() / mu2;
    b(n - 1, n - 1) = static_cast<double>(p) / mu2;
    b *= -0.5;
    Vector c(n);
    c.head(l) = y - m * a_d;
    c.segment(l, p) = -pinv * psi_c;
    c.segment(l + p, p) = -a_d;
    c(n - 1) = a_d.sum() - 1.0;
    QuadraticForm q{std::move(b), std::move(c), {}};
    for (Index i = 0; i < p; ++i) q.nonneg.push_back(l + p + i);
    return q;
}

/// Attained dual value: sum over blocks of w'Bw + c'w minus the multiplier
/// terms, together with the multipliers and the packed block duals.
struct DualSolution {
    Matrix omega;            // one column per block
    std::vector<double> mu;  // {mu0} or {mu1, mu2}
    double objective = 0.0;
};

/// Inner maximizers of the coarse dual for one mu0, one column per block.
struct CoarseDuals {
    double mu0 = 0.0;
    Matrix beta;        // L x K
    Matrix gamma;       // P x K
    Vector lambda;      // K
    Matrix abundances;  // P x K, a = M'beta + gamma - lambda 1
    Vector block_objective;

    double beta_sq_sum() const { return beta.squaredNorm(); }

    Vector omega(Index i) const {
        Vector w(beta.rows() + gamma.rows() + 1);
        w << beta.col(i), gamma.col(i), lambda(i);
        return w;
    }
};

/// Solves the coarse inner problem for every block at a fixed mu0. The
/// unconstrained part is eliminated with one factorization of K + I/mu0,
/// leaving a P-dimensional simplex QP per block:
///   min 1/2 |a|^2 + 1/2 (y - Ma)' G (y - Ma),  G = (K + I/mu0)^{-1},
/// whose multipliers are gamma and lambda; beta = G (y - Ma).
class CoarseInnerSolver {
public:
    CoarseInnerSolver(const GramMatrix& k, const Matrix& m, double mu0) : k_(k), m_(m), mu0_(mu0) {
        if (!(mu0 > 0.0)) throw InvalidArgument("CoarseInnerSolver: mu0 must be positive");
        const Index l = m.rows();
        llt_.compute(k.values + Matrix::Identity(l, l) / mu0);
        if (llt_.info() != Eigen::Success) throw ConvergenceError("CoarseInnerSolver: K + I/mu0 not positive definite");
        gm_ = llt_.solve(m);
        h_ = Matrix::Identity(m.cols(), m.cols()) + m.transpose() * gm_;
    }

    CoarseDuals solve(const Matrix& y, unsigned threads = 1) const {
        if (y.rows() != m_.rows()) throw DimensionMismatch("CoarseInnerSolver: band count differs");
        const Index l = m_.rows(), p = m_.cols(), blocks = y.cols();
        const Matrix gy = llt_.solve(y);
        const Matrix f = m_.transpose() * gy;
        CoarseDuals out;
        out.mu0 = mu0_;
        out.beta.resize(l, blocks);
        out.gamma.resize(p, blocks);
        out.lambda.resize(blocks);
        out.abundances.resize(p, blocks);
        out.block_objective.resize(blocks);
        detail::parallel_for(static_cast<std::size_t>(blocks), threads, [&](std::size_t j) {
            const auto i = static_cast<Index>(j);
            const SimplexQpResult qp = simplex_qp(h_, f.col(i));
            const Vector beta = gy.col(i) - gm_ * qp.a;
            out.beta.col(i) = beta;
            out.gamma.col(i) = qp.gamma;
            out.lambda(i) = qp.lambda;
            const Vector a = m_.transpose() * beta + qp.gamma - Vector::Constant(p, qp.lambda);
            out.abundances.col(i) = a;
            out.block_objective(i) =
                -0.5 * (beta.dot(k_.values * beta) + beta.squaredNorm() / mu0_ + a.squaredNorm()) +
                beta.dot(y.col(i)) - qp.lambda;
        });
        return out;
    }

private:
    const GramMatrix& k_;
    const Matrix& m_;
    double mu0_;
    Eigen::LLT<Matrix> llt_;
    Matrix gm_;
    Matrix h_;
};

/// Inner maximizers of the fine dual for one (mu1, mu2), one column per pixel.
struct FineDuals {
    double mu1 = 0.0, mu2 = 0.0;
    Matrix beta;        // L x N
    Matrix mu3;         // P x N
    Matrix gamma;       // P x N
    Vector lambda;      // N
    Matrix shift;       // P x N, M'beta + gamma - lambda 1 = mu2 (a - a_D)
    Vector block_objective;

    double beta_sq_sum() const { return beta.squaredNorm(); }
    double shift_sq_sum() const { return shift.squaredNorm(); }
    double mu3_sq_sum() const { return mu3.squaredNorm(); }

    Vector omega(Index n) const {
        Vector w(beta.rows() + mu3.rows() + gamma.rows() + 1);
        w << beta.col(n), mu3.col(n), gamma.col(n), lambda(n);
        return w;
    }
};

/// Fine inner problem at fixed (mu1, mu2). With z = [beta; mu3] and
///   Q = diag(I/mu1, I/mu2) + [I; -M^+] K [I, -M^+'],
/// maximizing over z gives z = Q^{-1} [y - Ma; -M^+ psi_C], and what remains
/// for each pixel is the simplex QP
///   min mu2/2 |a - a_D|^2 + 1/2 [y - Ma; -M^+ psi_C]' Q^{-1} [y - Ma; -M^+ psi_C].
class FineInnerSolver {
public:
    FineInnerSolver(const GramMatrix& k, const Matrix& m, const Matrix& pinv, double mu1, double mu2)
        : k_(k), m_(m), pinv_(pinv), mu1_(mu1), mu2_(mu2) {
        if (!(mu1 > 0.0) || !(mu2 > 0.0)) throw InvalidArgument("FineInnerSolver: multipliers must be positive");
        const Index l = m.rows(), p = m.cols();
        Matrix lift(l + p, l);
        lift << Matrix::Identity(l, l), -pinv;
        Matrix q = lift * k.values * lift.transpose();
        q.topLeftCorner(l, l).diagonal().array() += 1.0 / mu1;
        q.bottomRightCorner(p, p).diagonal().array() += 1.0 / mu2;
        llt_.compute(q);
        if (llt_.info() != Eigen::Success) throw ConvergenceError("FineInnerSolver: Q not positive definite");
        Matrix rhs = Matrix::Zero(l + p, p);
        rhs.topRows(l) = m;
        zm_ = llt_.solve(rhs);
        h_ = mu2 * Matrix::Identity(p, p) + m.transpose() * zm_.topRows(l);
        h_ = 0.5 * (h_ + h_.transpose()).eval();
    }

    FineDuals solve(const Matrix& y, const Matrix& a_d, const Matrix& psi_c, unsigned threads = 1) const {
        const Index l = m_.rows(), p = m_.cols(), n = y.cols();
        if (y.rows() != l || a_d.rows() != p || psi_c.rows() != l || a_d.cols() != n || psi_c.cols() != n)
            throw DimensionMismatch("FineInnerSolver: input shapes disagree");
        Matrix rhs(l + p, n);
        rhs.topRows(l) = y;
        rhs.bottomRows(p) = -pinv_ * psi_c;
        const Matrix z0 = llt_.solve(rhs);
        const Matrix f = mu2_ * a_d + m_.transpose() * z0.topRows(l);
        FineDuals out;
        out.mu1 = mu1_;
        out.mu2 = mu2_;
        out.beta.resize(l, n);
        out.mu3.resize(p, n);
        out.gamma.resize(p, n);
        out.lambda.resize(n);
        out.shift.resize(p, n);
        out.block_objective.resize(n);
        detail::parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t j) {
            const auto i = static_cast<Index>(j);
            const SimplexQpResult qp = simplex_qp(h_, f.col(i));
            const Vector z = z0.col(i) - zm_ * qp.a;
            const Vector beta = z.head(l), mu3 = z.tail(p);
            out.beta.col(i) = beta;
            out.mu3.col(i) = mu3;
            out.gamma.col(i) = qp.gamma;
            out.lambda(i) = qp.lambda;
            const Vector shift = m_.transpose() * beta + qp.gamma - Vector::Constant(p, qp.lambda);
            out.shift.col(i) = shift;
            const Vector alpha = beta - pinv_.transpose() * mu3;
            const Vector ad = a_d.col(i);
            out.block_objective(i) =
                -0.5 * (alpha.dot(k_.values * alpha) + beta.squaredNorm() / mu1_ +
                        (shift.squaredNorm() + mu3.squaredNorm()) / mu2_) +
                beta.dot(y.col(i) - m_ * ad) - mu3.dot(pinv_ * psi_c.col(i)) - qp.gamma.dot(ad) +
                qp.lambda * (ad.sum() - 1.0);
        });
        return out;
    }

private:
    const GramMatrix& k_;
    const Matrix& m_;
    const Matrix& pinv_;
    double mu1_, mu2_;
    Eigen::LLT<Matrix> llt_;
    Matrix zm_;
    Matrix h_;
};

// ---------------------------------------------------------------------------
// Constraint residuals in the multipliers
// ---------------------------------------------------------------------------

struct CoarseResidualContext {
    double beta_sq_sum = 0.0;  // sum_i |beta_Ci|^2 at the inner maximizer
    Index blocks = 0;          // K
    double c0 = 0.0;
};

/// g0 = (1/mu0^2) sum_i |beta_Ci|^2 - K C0.
inline double g0_residual(double mu0, const CoarseResidualContext& ctx) {
    return ctx.beta_sq_sum / (mu0 * mu0) - static_cast<double>(ctx.blocks) * ctx.c0;
}

struct FineResidualContext {
    double beta_sq_sum = 0.0;   // sum_n |beta_n|^2
    double shift_sq_sum = 0.0;  // sum_n |M'beta_n + gamma_n - lambda_n 1|^2
    double mu3_sq_sum = 0.0;    // sum_n |mu3_n|^2
    Index pixels = 0;           // N
    double c1 = 0.0;
    double target = 0.0;        // C_Y - C_E
};

/// g1 = (1/mu1^2) sum |beta_n|^2 - N C1,
/// g2 = (1/mu2^2) sum (|M'beta_n + gamma_n - lambda_n 1|^2 + |mu3_n|^2) - N (C_Y - C_E).
inline std::array<double, 2> g_fine_residuals(double mu1, double mu2, const FineResidualContext& ctx) {
    const double n = static_cast<double>(ctx.pixels);
    return {ctx.beta_sq_sum / (mu1 * mu1) - n * ctx.c1,
            (ctx.shift_sq_sum + ctx.mu3_sq_sum) / (mu2 * mu2) - n * ctx.target};
}

// ---------------------------------------------------------------------------
// Bisection
// ---------------------------------------------------------------------------

struct BisectOptions {
    double tol = 1e-8;          // stop when the interval is tol times its initial width
    int max_iter = 200;
    double residual_tol = 0.0;  // also stop when |f| <= residual_tol
    bool log_scale = false;     // bisect log10 of the (positive) parameter
    int expansions = 0;         // times the bracket may grow by 10x when f has no sign change
};

struct Bisect1DResult {
    double root = 0.0;
    double lo = 0.0, hi = 0.0;
    double value = 0.0;  // f at the root
    int iterations = 0;
    int evaluations = 0;
};

/// Bisection keeping f(lo) f(hi) <= 0 at every step. Returns the midpoint of
/// the final interval.
template <class F>
Bisect1DResult bisect_1d(F&& f, double lo, double hi, const BisectOptions& opts = {}) {
    if (!(lo < hi)) throw InvalidArgument("bisect_1d: need lo < hi");
    if (opts.log_scale && !(lo > 0.0)) throw InvalidArgument("bisect_1d: log scale needs positive bounds");
    Bisect1DResult r;
    auto eval = [&](double x) {
        ++r.evaluations;
        return f(opts.log_scale ? std::pow(10.0, x) : x);
    };
    double a = opts.log_scale ? std::log10(lo) : lo;
    double b = opts.log_scale ? std::log10(hi) : hi;
    double fa = eval(a), fb = eval(b);
    for (int e = 0; e < opts.expansions && fa * fb > 0.0; ++e) {
        if (opts.log_scale) {
            a -= 1.0, b += 1.0;
        } else {
            const double w = b - a;
            a -= 4.5 * w, b += 4.5 * w;
        }
        fa = eval(a), fb = eval(b);
    }
    if (fa * fb > 0.0)
        throw BracketError("bisect_1d: no sign change on the bracket (f(lo) = " + std::to_string(fa) +
                           ", f(hi) = " + std::to_string(fb) + ")");
    const double width = b - a;
    double mid = 0.5 * (a + b), fm = 0.0;
    bool have_mid = false;
    if (fa == 0.0 || fb == 0.0) {
        mid = fa == 0.0 ? a : b;
        fm = 0.0;
        have_mid = true;
    }
    while (!have_mid && r.iterations < opts.max_iter) {
        mid = 0.5 * (a + b);
        fm = eval(mid);
        ++r.iterations;
        if (fm == 0.0 || std::abs(fm) <= opts.residual_tol) break;
        if ((fm < 0.0) == (fa < 0.0)) {
            a = mid, fa = fm;
        } else {
            b = mid, fb = fm;
        }
        if (b - a <= opts.tol * width) {
            mid = 0.5 * (a + b);
            fm = eval(mid);
            break;
        }
    }
    r.root = opts.log_scale ? std::pow(10.0, mid) : mid;
    r.lo = opts.log_scale ? std::pow(10.0, a) : a;
    r.hi = opts.log_scale ? std::pow(10.0, b) : b;
    r.value = fm;
    return r;
}

/// Axis-aligned rectangle [a1, a2] x [b1, b2].
struct Bracket2D {
    double a1 = 0.0, a2 = 0.0;
    double b1 = 0.0, b2 = 0.0;

    double area() const { return (a2 - a1) * (b2 - b1); }
    void validate() const {
        if (!(a1 < a2) || !(b1 < b2)) throw InvalidArgument("Bracket2D: need a1 < a2 and b1 < b2");
    }
};

struct Bisect2DOptions {
    int max_iter = 10;
    double rel_tol = 0.1;   // stop when the centre moves by less than this, relatively
    bool log_scale = false;
    int expansions = 0;
};

struct Bisect2DResult {
    double x = 0.0, y = 0.0;  // centre of the final rectangle
    Bracket2D rect;           // final rectangle, in parameter units
    int iterations = 0;
    int evaluations = 0;
    double last_change = 0.0;
};

/// Two-dimensional bisection on the Poincare-Miranda corner test: a rectangle
/// is kept when both g1 and g2 take both signs over its four vertices. Each
/// iteration halves along the first coordinate, then the second. When both
/// halves pass the test, or neither does, the half whose centre has the
/// smaller scaled residual is kept. Function values are cached per point.
template <class G>
Bisect2DResult bisect_2d(G&& g, Bracket2D rect, const Bisect2DOptions& opts = {}) {
    rect.validate();
    if (opts.log_scale && !(rect.a1 > 0.0 && rect.b1 > 0.0))
        throw InvalidArgument("bisect_2d: log scale needs positive corners");
    auto to_work = [&](double v) { return opts.log_scale ? std::log10(v) : v; };
    auto to_param = [&](double v) { return opts.log_scale ? std::pow(10.0, v) : v; };

    Bisect2DResult r;
    std::map<std::pair<double, double>, std::array<double, 2>> cache;
    auto eval = [&](double x, double y) {
        const auto key = std::make_pair(x, y);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        ++r.evaluations;
        const auto v = g(to_param(x), to_param(y));
        const std::array<double, 2> arr{v[0], v[1]};
        cache.emplace(key, arr);
        return arr;
    };
    auto changes_sign = [&](double a1, double a2, double b1, double b2) {
        const std::array<std::array<double, 2>, 4> v{eval(a1, b1), eval(a2, b1), eval(a1, b2), eval(a2, b2)};
        for (int c = 0; c < 2; ++c) {
            double lo = v[0][c], hi = v[0][c];
            for (const auto& vv : v) lo = std::min(lo, vv[c]), hi = std::max(hi, vv[c]);
            if (!(lo <= 0.0 && hi >= 0.0)) return false;
        }
        return true;
    };

    double a1 = to_work(rect.a1), a2 = to_work(rect.a2), b1 = to_work(rect.b1), b2 = to_work(rect.b2);
    bool ok = changes_sign(a1, a2, b1, b2);
    for (int e = 0; e < opts.expansions && !ok; ++e) {
        if (opts.log_scale) {
            a1 -= 1.0, a2 += 1.0, b1 -= 1.0, b2 += 1.0;
        } else {
            const double wa = a2 - a1, wb = b2 - b1;
            a1 -= 4.5 * wa, a2 += 4.5 * wa, b1 -= 4.5 * wb, b2 += 4.5 * wb;
        }
        ok = changes_sign(a1, a2, b1, b2);
    }
    if (!ok) throw BracketError("bisect_2d: corner sign test fails on the initial rectangle");

    // Scales for comparing residuals of the two components.
    std::array<double, 2> scale{0.0, 0.0};
    for (const auto& v : {eval(a1, b1), eval(a2, b1), eval(a1, b2), eval(a2, b2)})
        for (int c = 0; c < 2; ++c) scale[c] = std::max(scale[c], std::abs(v[c]));
    auto centre_residual = [&](double x1, double x2, double y1, double y2) {
        const auto v = eval(0.5 * (x1 + x2), 0.5 * (y1 + y2));
        double worst = 0.0;
        for (int c = 0; c < 2; ++c) worst = std::max(worst, std::abs(v[c]) / (scale[c] > 0.0 ? scale[c] : 1.0));
        return worst;
    };
    // True when the lower half [x1, xc] is kept. A half passing the corner
    // test alone is kept; otherwise the half with the smaller residual at its
    // centre wins.
    auto keep_lower = [&](bool lower_ok, bool upper_ok, double lower_res_args[4], double upper_res_args[4]) {
        if (lower_ok != upper_ok) return lower_ok;
        return centre_residual(lower_res_args[0], lower_res_args[1], lower_res_args[2], lower_res_args[3]) <=
               centre_residual(upper_res_args[0], upper_res_args[1], upper_res_args[2], upper_res_args[3]);
    };

    double cx = to_param(0.5 * (a1 + a2)), cy = to_param(0.5 * (b1 + b2));
    while (r.iterations < opts.max_iter) {
        const double ac = 0.5 * (a1 + a2);
        {
            double lo[4] = {a1, ac, b1, b2}, hi[4] = {ac, a2, b1, b2};
            if (keep_lower(changes_sign(a1, ac, b1, b2), changes_sign(ac, a2, b1, b2), lo, hi)) a2 = ac; else a1 = ac;
        }
        const double bc = 0.5 * (b1 + b2);
        {
            double lo[4] = {a1, a2, b1, bc}, hi[4] = {a1, a2, bc, b2};
            if (keep_lower(changes_sign(a1, a2, b1, bc), changes_sign(a1, a2, bc, b2), lo, hi)) b2 = bc; else b1 = bc;
        }
        ++r.iterations;
        const double nx = to_param(0.5 * (a1 + a2)), ny = to_param(0.5 * (b1 + b2));
        r.last_change = std::max(std::abs(nx - cx) / std::max(std::abs(cx), 1e-300),
                                 std::abs(ny - cy) / std::max(std::abs(cy), 1e-300));
        cx = nx, cy = ny;
        if (r.last_change < opts.rel_tol) break;
    }
    r.x = cx;
    r.y = cy;
    r.rect = Bracket2D{to_param(a1), to_param(a2), to_param(b1), to_param(b2)};
    return r;
}

}  // namespace nlunmix

#endif  // NLUNMIX_DUAL_SOLVER_HPP
