#ifndef NLUNMIX_UNMIXERS_HPP
#define NLUNMIX_UNMIXERS_HPP

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "data_model.hpp"
#include "detail/runtime.hpp"
#include "dual_solver.hpp"
#include "kernels.hpp"
#include "multiscale.hpp"
#include "simplex_qp.hpp"
#include "statistics.hpp"

namespace nlunmix {

/// Ordered key/value record of a run. Keys are "stage.quantity".
struct Diagnostics {
    std::vector<std::pair<std::string, double>> values;
    std::vector<std::string> warnings;

    void set(const std::string& key, double v) {
        for (auto& kv : values)
            if (kv.first == key) {
                kv.second = v;
                return;
            }
        values.emplace_back(key, v);
    }
    bool has(const std::string& key) const {
        for (const auto& kv : values)
            if (kv.first == key) return true;
        return false;
    }
    double get(const std::string& key) const {
        for (const auto& kv : values)
            if (kv.first == key) return kv.second;
        throw InvalidArgument("Diagnostics: no entry '" + key + "'");
    }
    void warn(const std::string& msg) {
        warnings.push_back(msg);
        log_message(LogLevel::warn, msg);
    }
    void merge(const Diagnostics& other) {
        for (const auto& kv : other.values) set(kv.first, kv.second);
        warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
    }

    // One "key = value" line per entry, then the warnings.
    std::string report() const {
        std::ostringstream os;
        os.precision(17);
        for (const auto& kv : values) os << kv.first << " = " << kv.second << '\n';
        for (const auto& w : warnings) os << "warning = " << w << '\n';
        return os.str();
    }
};

struct UnmixResult {
    AbundanceMap abundances;         // P x N
    NonlinearPart nonlinear;         // L x N, zero for linear methods
    Matrix residual;                 // L x N, Y - MA - Psi
    std::optional<DualSolution> dual;
    Diagnostics diagnostics;
    std::vector<std::pair<std::string, double>> timings;  // seconds per stage
};

struct BmuaConfig {
    KernelConfig kernel;
    // Modelling-error variance; negative selects 1e-8 times the mean pixel energy.
    double sigma_psi2 = -1.0;
    // Superpixel count search. Zero bounds default to N/8 and N/170.
    SuperpixelSearch superpixels;
    // Fixed segmentation, bypassing the count search.
    std::optional<SuperpixelMap> superpixel_map;
    // Known noise covariance, bypassing the residual-method estimate.
    std::optional<NoiseCovariance> noise;
    // Initial multiplier bracket (log scale) and its allowed 10x expansions.
    double mu_lo = 1e-4;
    double mu_hi = 1e4;
    int bracket_expansions = 3;
    BisectOptions coarse_bisect{1e-6, 60, 0.0, true, 3};
    Bisect2DOptions fine_bisect{10, 0.1, true, 3};
    // Alternating one-dimensional sweeps that centre the fine rectangle, and
    // its half-width in decades. Zero sweeps bisects the full range directly.
    int fine_search_sweeps = 3;
    double fine_search_halfwidth = 0.25;
    // Newton refinement of the bisection result on the concave dual, kept
    // only when it shrinks the constraint gaps. Zero iterations disables it.
    int fine_polish_iterations = 20;
    double fine_polish_tol = 1e-10;
    // Abundance entries below -simplex_tol after recovery are reported.
    double simplex_tol = 1e-6;
    unsigned threads = 1;

    void validate() const {
        kernel.validate();
        if (!(mu_lo > 0.0) || !(mu_hi > mu_lo)) throw InvalidArgument("BmuaConfig: need 0 < mu_lo < mu_hi");
        if (bracket_expansions < 0) throw InvalidArgument("BmuaConfig: bracket_expansions must be >= 0");
        if (!(coarse_bisect.tol > 0.0) || coarse_bisect.max_iter < 1)
            throw InvalidArgument("BmuaConfig: coarse bisection tolerance and iteration cap must be positive");
        if (!(fine_bisect.rel_tol > 0.0) || fine_bisect.max_iter < 1)
            throw InvalidArgument("BmuaConfig: fine bisection tolerance and iteration cap must be positive");
        if (!(simplex_tol > 0.0)) throw InvalidArgument("BmuaConfig: simplex_tol must be positive");
        if (fine_search_sweeps < 0 || !(fine_search_halfwidth > 0.0))
            throw InvalidArgument("BmuaConfig: fine search sweeps must be >= 0 and its half-width positive");
        if (fine_polish_iterations < 0 || !(fine_polish_tol > 0.0))
            throw InvalidArgument("BmuaConfig: fine polish iterations must be >= 0 and its tolerance positive");
        if (!(superpixels.eps >= 0.0 && superpixels.eps < 1.0)) throw InvalidArgument("BmuaConfig: eps must lie in [0, 1)");
    }
};

namespace detail {

// Clips round-off negatives and renormalizes each column onto the simplex.
inline void finalize_abundances(Matrix& a, double tol, Diagnostics& diag, const std::string& stage) {
    Index violations = 0;
    for (Index n = 0; n < a.cols(); ++n) {
        for (Index p = 0; p < a.rows(); ++p) {
            if (a(p, n) < -tol) ++violations;
            if (a(p, n) < 0.0) a(p, n) = 0.0;
        }
        const double s = a.col(n).sum();
        if (s > 0.0)
            a.col(n) /= s;
        else
            a.col(n).setConstant(1.0 / static_cast<double>(a.rows()));
    }
    if (violations > 0)
        diag.warn(stage + ": " + std::to_string(violations) + " abundance entries below -" + std::to_string(tol) +
                  " before clipping");
}

inline void check_endmembers(const Matrix& y, const EndmemberMatrix& m, const char* who) {
    if (m.count() < 1) throw InvalidArgument(std::string(who) + ": empty endmember matrix");
    if (y.rows() != m.bands())
        throw DimensionMismatch(std::string(who) + ": image has " + std::to_string(y.rows()) +
                                " bands, endmembers have " + std::to_string(m.bands()));
}

inline Matrix pack_omega(const CoarseDuals& d) {
    Matrix omega(d.beta.rows() + d.gamma.rows() + 1, d.beta.cols());
    for (Index i = 0; i < d.beta.cols(); ++i) omega.col(i) = d.omega(i);
    return omega;
}

inline Matrix pack_omega(const FineDuals& d) {
    Matrix omega(d.beta.rows() + d.mu3.rows() + d.gamma.rows() + 1, d.beta.cols());
    for (Index i = 0; i < d.beta.cols(); ++i) omega.col(i) = d.omega(i);
    return omega;
}

/// Approximate common root of (g1, g2) on [lo, hi]^2 from alternating
/// log-scale bisections: g1 = 0 in the first multiplier with the second
/// fixed, then g2 = 0 in the second. Empty when a sweep finds no sign change.
template <class G>
std::optional<std::pair<double, double>> alternate_roots(G&& g, double lo, double hi, int sweeps) {
    if (sweeps <= 0) return std::nullopt;
    BisectOptions opts;
    opts.log_scale = true;
    opts.tol = 0.005;
    opts.max_iter = 20;
    double x = std::sqrt(lo * hi), y = x;
    try {
        for (int s = 0; s < sweeps; ++s) {
            x = bisect_1d([&](double v) { return g(v, y)[0]; }, lo, hi, opts).root;
            y = bisect_1d([&](double v) { return g(x, v)[1]; }, lo, hi, opts).root;
        }
    } catch (const BracketError&) {
        return std::nullopt;
    }
    return std::make_pair(x, y);
}

/// Value, gradient and relative constraint gaps of a two-multiplier dual.
struct DualPoint {
    double mu1 = 0.0, mu2 = 0.0;
    double value = 0.0;
    std::array<double, 2> grad{};  // with respect to (mu1, mu2)
    std::array<double, 2> gap{};   // relative constraint gaps
    double worst_gap() const { return std::max(gap[0], gap[1]); }
};

/// Damped Newton ascent on a concave dual in log-multiplier coordinates.
/// The Hessian comes from forward differences of the exact gradient and a
/// Levenberg term keeps each step an ascent step. Stops once both relative
/// gaps are below tol, or when no step improves the dual.
template <class Eval>
DualPoint polish_dual(Eval&& eval, DualPoint x, int max_iter, double tol, int& evaluations) {
    auto log_grad = [](const DualPoint& p) { return Eigen::Vector2d(p.mu1 * p.grad[0], p.mu2 * p.grad[1]); };
    constexpr double h = 1e-5;
    for (int it = 0; it < max_iter && x.worst_gap() > tol; ++it) {
        const Eigen::Vector2d g = log_grad(x);
        Eigen::Matrix2d hess;
        for (int i = 0; i < 2; ++i) {
            const double f = std::exp(h);
            const DualPoint xp = eval(i == 0 ? x.mu1 * f : x.mu1, i == 1 ? x.mu2 * f : x.mu2);
            ++evaluations;
            hess.col(i) = (log_grad(xp) - g) / h;
        }
        const Eigen::Matrix2d neg = -0.5 * (hess + hess.transpose());
        const double scale = std::max(neg.cwiseAbs().maxCoeff(), 1e-300);
        double lambda = neg.determinant() > 0.0 && neg.trace() > 0.0 ? 0.0 : 1e-3 * scale;
        bool moved = false;
        for (int tries = 0; tries < 30 && !moved; ++tries) {
            Eigen::Vector2d step = (neg + lambda * Eigen::Matrix2d::Identity()).ldlt().solve(g);
            if (!step.allFinite()) step = g / scale;
            const double len = step.cwiseAbs().maxCoeff();
            if (len > 2.0) step *= 2.0 / len;
            const DualPoint y = eval(x.mu1 * std::exp(step(0)), x.mu2 * std::exp(step(1)));
            ++evaluations;
            const double slack = 1e-14 * std::max(1.0, std::abs(x.value));
            if (y.value > x.value + slack || (y.value >= x.value - slack && y.worst_gap() < x.worst_gap())) {
                x = y;
                moved = true;
            } else {
                lambda = std::max(10.0 * lambda, 1e-6 * scale);
            }
        }
        if (!moved) break;
    }
    return x;
}

class StageTimer {
public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// FCLS
// ---------------------------------------------------------------------------

/// Fully constrained least squares per pixel. The sum-to-one constraint is
/// folded into a nonnegative least-squares problem as a row weighted by 1e4.
inline UnmixResult fcls(const Matrix& y, const EndmemberMatrix& m, unsigned threads = 1) {
    detail::check_endmembers(y, m, "fcls");
    constexpr double kWeight = 1e4;
    const Index l = m.bands(), p = m.count(), n = y.cols();
    Matrix aug(l + 1, p);
    aug.row(0).setConstant(kWeight);
    aug.bottomRows(l) = m.matrix();
    UnmixResult r;
    r.abundances.values.resize(p, n);
    detail::parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t j) {
        const auto i = static_cast<Index>(j);
        Vector b(l + 1);
        b(0) = kWeight;
        b.tail(l) = y.col(i);
        r.abundances.values.col(i) = nnls(aug, b);
    });
    detail::finalize_abundances(r.abundances.values, 1e-6, r.diagnostics, "fcls");
    r.nonlinear.values = Matrix::Zero(l, n);
    r.residual = y - m.matrix() * r.abundances.values;
    r.diagnostics.set("fcls.residual_energy", r.residual.squaredNorm() / static_cast<double>(std::max<Index>(n, 1)));
    return r;
}

inline UnmixResult fcls(const SpectralImage& img, const EndmemberMatrix& m, unsigned threads = 1) {
    return fcls(img.data(), m, threads);
}

// ---------------------------------------------------------------------------
// K-Hype
// ---------------------------------------------------------------------------

namespace detail {

// Builds a kernel result from coarse-form duals at multiplier mu0.
inline UnmixResult kernel_result_from(const CoarseDuals& d, const Matrix& y, const EndmemberMatrix& m,
                                      const GramMatrix& k, double tol, const std::string& stage) {
    UnmixResult r;
    r.abundances.values = d.abundances;
    finalize_abundances(r.abundances.values, tol, r.diagnostics, stage);
    r.nonlinear.values = k.values * d.beta;
    r.residual = y - m.matrix() * r.abundances.values - r.nonlinear.values;
    return r;
}

}  // namespace detail

/// K-Hype: per-pixel LS-SVR unmixing with fixed regularization mu, i.e.
/// min 1/2 (|a|^2 + |psi|_H^2 + |xi|^2 / mu) under simplex constraints.
inline UnmixResult khype(const Matrix& y, const EndmemberMatrix& m, double mu, const KernelConfig& cfg = {},
                         unsigned threads = 1) {
    if (!(mu > 0.0) || !std::isfinite(mu)) throw InvalidArgument("khype: mu must be positive");
    detail::check_endmembers(y, m, "khype");
    const GramMatrix k = gram_matrix(m, cfg);
    const CoarseInnerSolver solver(k, m.matrix(), 1.0 / mu);
    const CoarseDuals d = solver.solve(y, threads);
    UnmixResult r = detail::kernel_result_from(d, y, m, k, 1e-6, "khype");
    r.dual = DualSolution{detail::pack_omega(d), {mu}, d.block_objective.sum()};
    r.diagnostics.set("khype.mu", mu);
    r.diagnostics.set("khype.residual_energy", r.residual.squaredNorm() / static_cast<double>(std::max<Index>(y.cols(), 1)));
    return r;
}

inline UnmixResult khype(const SpectralImage& img, const EndmemberMatrix& m, double mu, const KernelConfig& cfg = {},
                         unsigned threads = 1) {
    return khype(img.data(), m, mu, cfg, threads);
}

/// Regularization grid used to tune K-Hype.
inline std::vector<double> khype_default_grid() { return {0.001, 0.002, 0.005, 0.01, 0.02, 0.1, 1.0}; }

struct KhypeSweep {
    std::vector<std::pair<double, double>> table;  // (mu, abundance RMSE)
    std::size_t best = 0;
    UnmixResult best_result;

    double best_mu() const { return table.at(best).first; }
    double best_rmse() const { return table.at(best).second; }
};

/// Runs K-Hype over a grid and keeps the value with the smallest abundance
/// RMSE against known abundances. Ties keep the earlier grid entry.
inline KhypeSweep khype_grid_search(const SpectralImage& img, const EndmemberMatrix& m, const std::vector<double>& grid,
                                   const Matrix& truth, const KernelConfig& cfg = {}, unsigned threads = 1) {
    if (grid.empty()) throw InvalidArgument("khype_grid_search: empty grid");
    for (double mu : grid)
        if (!(mu > 0.0) || !std::isfinite(mu)) throw InvalidArgument("khype_grid_search: grid values must be positive");
    if (truth.rows() != m.count() || truth.cols() != img.pixels())
        throw DimensionMismatch("khype_grid_search: reference abundances have the wrong shape");
    KhypeSweep sweep;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        UnmixResult r = khype(img, m, grid[i], cfg, threads);
        const double err = std::sqrt((r.abundances.values - truth).squaredNorm() / static_cast<double>(truth.size()));
        sweep.table.emplace_back(grid[i], err);
        if (i == 0 || err < sweep.table[sweep.best].second) {
            sweep.best = i;
            sweep.best_result = std::move(r);
        }
    }
    return sweep;
}

// ---------------------------------------------------------------------------
// Multiscale stages
// ---------------------------------------------------------------------------

/// Coarse stage: K-Hype-like unmixing of superpixel means where the
/// regularization multiplier mu0 is found by bisection so that the mean
/// residual energy equals C0.
inline UnmixResult bmua_coarse(const Matrix& yc, const EndmemberMatrix& m, double c0, const BmuaConfig& cfg) {
    cfg.validate();
    if (!(c0 > 0.0) || !std::isfinite(c0)) throw InvalidArgument("bmua_coarse: C0 must be positive");
    detail::check_endmembers(yc, m, "bmua_coarse");
    const GramMatrix k = gram_matrix(m, cfg.kernel);
    const Index blocks = yc.cols();

    auto g0 = [&](double mu0) {
        const CoarseDuals d = CoarseInnerSolver(k, m.matrix(), mu0).solve(yc, cfg.threads);
        return g0_residual(mu0, {d.beta_sq_sum(), blocks, c0});
    };
    BisectOptions opts = cfg.coarse_bisect;
    opts.log_scale = true;
    opts.expansions = cfg.bracket_expansions;
    const Bisect1DResult root = bisect_1d(g0, cfg.mu_lo, cfg.mu_hi, opts);
    const double mu0 = root.root;

    const CoarseDuals d = CoarseInnerSolver(k, m.matrix(), mu0).solve(yc, cfg.threads);
    UnmixResult r = detail::kernel_result_from(d, yc, m, k, cfg.simplex_tol, "coarse");
    const double objective = d.block_objective.sum() - 0.5 * mu0 * static_cast<double>(blocks) * c0;
    r.dual = DualSolution{detail::pack_omega(d), {mu0}, objective};
    const double attained = d.beta_sq_sum() / (mu0 * mu0) / static_cast<double>(blocks);
    r.diagnostics.set("coarse.mu0", mu0);
    r.diagnostics.set("coarse.c0", c0);
    r.diagnostics.set("coarse.constraint", attained);
    r.diagnostics.set("coarse.relative_gap", std::abs(attained - c0) / c0);
    r.diagnostics.set("coarse.iterations", root.iterations);
    r.diagnostics.set("coarse.evaluations", root.evaluations);
    r.diagnostics.set("coarse.dual_objective", objective);
    return r;
}

/// Fine stage: per-pixel unmixing anchored to the expanded coarse solution.
/// (mu1, mu2) are found by two-dimensional bisection so that the residual
/// energy equals C1 and the deviation from the coarse solution equals
/// C_Y - C_E.
inline UnmixResult bmua_fine(const Matrix& y, const EndmemberMatrix& m, const Matrix& a_d, const Matrix& psi_d,
                             const ScaleConstants& consts, const BmuaConfig& cfg) {
    cfg.validate();
    detail::check_endmembers(y, m, "bmua_fine");
    const Index n = y.cols();
    if (a_d.rows() != m.count() || a_d.cols() != n)
        throw DimensionMismatch("bmua_fine: coarse abundances have the wrong shape");
    if (psi_d.rows() != m.bands() || psi_d.cols() != n)
        throw DimensionMismatch("bmua_fine: coarse nonlinear part has the wrong shape");
    if (!(consts.c1 > 0.0)) throw InvalidArgument("bmua_fine: C1 must be positive");
    const double target = consts.fine_target();
    const GramMatrix k = gram_matrix(m, cfg.kernel);

    auto solve_at = [&](double mu1, double mu2) {
        return FineInnerSolver(k, m.matrix(), m.pinv(), mu1, mu2).solve(y, a_d, psi_d, cfg.threads);
    };
    auto residuals = [&](const FineDuals& d) {
        return g_fine_residuals(d.mu1, d.mu2,
                                {d.beta_sq_sum(), d.shift_sq_sum(), d.mu3_sq_sum(), n, consts.c1, target});
    };
    auto g = [&](double mu1, double mu2) { return residuals(solve_at(mu1, mu2)); };

    int search_evaluations = 0;
    auto counted = [&](double mu1, double mu2) {
        ++search_evaluations;
        return g(mu1, mu2);
    };
    const auto centre = detail::alternate_roots(counted, cfg.mu_lo, cfg.mu_hi, cfg.fine_search_sweeps);

    Bisect2DOptions opts = cfg.fine_bisect;
    opts.log_scale = true;
    opts.expansions = cfg.bracket_expansions;
    const Bracket2D full{cfg.mu_lo, cfg.mu_hi, cfg.mu_lo, cfg.mu_hi};
    Bisect2DResult root;
    bool located = false;
    if (centre) {
        const double h = std::pow(10.0, cfg.fine_search_halfwidth);
        try {
            root = bisect_2d(g, Bracket2D{centre->first / h, centre->first * h, centre->second / h, centre->second * h},
                             opts);
            located = true;
        } catch (const BracketError&) {
        }
    }
    if (!located) root = bisect_2d(g, full, opts);
    double mu1 = root.x, mu2 = root.y;

    const double nn = static_cast<double>(n);
    auto dual_point = [&](double a, double b) {
        const FineDuals fd = solve_at(a, b);
        const double att1 = fd.beta_sq_sum() / (a * a) / nn;
        const double att2 = (fd.shift_sq_sum() + fd.mu3_sq_sum()) / (b * b) / nn;
        detail::DualPoint p;
        p.mu1 = a;
        p.mu2 = b;
        p.value = fd.block_objective.sum() - 0.5 * nn * (a * consts.c1 + b * target);
        p.grad = {0.5 * nn * (att1 - consts.c1), 0.5 * nn * (att2 - target)};
        p.gap = {std::abs(att1 - consts.c1) / consts.c1, std::abs(att2 - target) / target};
        return p;
    };
    int polish_evaluations = 0, polish_used = 0;
    if (cfg.fine_polish_iterations > 0) {
        const detail::DualPoint start = dual_point(mu1, mu2);
        const detail::DualPoint best =
            detail::polish_dual(dual_point, start, cfg.fine_polish_iterations, cfg.fine_polish_tol, polish_evaluations);
        if (best.worst_gap() < start.worst_gap()) {
            mu1 = best.mu1;
            mu2 = best.mu2;
            polish_used = 1;
        }
    }

    const FineDuals d = solve_at(mu1, mu2);
    UnmixResult r;
    if (!located) r.diagnostics.warn("fine: rectangle search failed, bisecting the full multiplier range");
    r.abundances.values = a_d + d.shift / mu2;
    detail::finalize_abundances(r.abundances.values, cfg.simplex_tol, r.diagnostics, "fine");
    r.nonlinear.values = k.values * (d.beta - m.pinv().transpose() * d.mu3);
    r.residual = y - m.matrix() * r.abundances.values - r.nonlinear.values;
    const double objective = d.block_objective.sum() - 0.5 * nn * (mu1 * consts.c1 + mu2 * target);
    r.dual = DualSolution{detail::pack_omega(d), {mu1, mu2}, objective};

    const double attained1 = d.beta_sq_sum() / (mu1 * mu1) / nn;
    const double attained2 = (d.shift_sq_sum() + d.mu3_sq_sum()) / (mu2 * mu2) / nn;
    r.diagnostics.set("fine.mu1", mu1);
    r.diagnostics.set("fine.mu2", mu2);
    r.diagnostics.set("fine.c1", consts.c1);
    r.diagnostics.set("fine.constraint1", attained1);
    r.diagnostics.set("fine.relative_gap1", std::abs(attained1 - consts.c1) / consts.c1);
    r.diagnostics.set("fine.target", target);
    r.diagnostics.set("fine.constraint2", attained2);
    r.diagnostics.set("fine.relative_gap2", std::abs(attained2 - target) / target);
    r.diagnostics.set("fine.iterations", root.iterations);
    r.diagnostics.set("fine.evaluations", root.evaluations);
    r.diagnostics.set("fine.search_evaluations", search_evaluations);
    r.diagnostics.set("fine.polish_evaluations", polish_evaluations);
    r.diagnostics.set("fine.polish_used", polish_used);
    r.diagnostics.set("fine.dual_objective", objective);
    return r;
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Blind multiscale unmixing: noise estimate, superpixel selection, blind
/// constants, coarse stage, expansion and fine stage. Failures are rethrown
/// as StageError tagged with the stage name.
inline UnmixResult bmua_n(const SpectralImage& img, const EndmemberMatrix& m, const BmuaConfig& cfg = {}) {
    UnmixResult out;
    auto run = [&](const std::string& stage, auto&& fn) {
        detail::StageTimer timer;
        try {
            fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
        out.timings.emplace_back(stage, timer.seconds());
    };

    run("validate", [&] {
        cfg.validate();
        detail::check_endmembers(img.data(), m, "bmua_n");
    });

    NoiseCovariance noise;
    run("noise", [&] { noise = cfg.noise ? *cfg.noise : estimate_noise_cov(img); });
    const double sigma_psi2 = cfg.sigma_psi2 >= 0.0 ? cfg.sigma_psi2 : default_sigma_psi2(img);

    SuperpixelMap map;
    run("superpixels", [&] {
        if (cfg.superpixel_map) {
            map = *cfg.superpixel_map;
            if (map.width() != img.width() || map.height() != img.height())
                throw DimensionMismatch("superpixel map does not match the image");
            return;
        }
        SuperpixelSearch search = cfg.superpixels;
        const Index n = img.pixels();
        if (search.k_min <= 0) search.k_min = std::max<Index>(1, n / 8);
        if (search.k_max <= 0) search.k_max = std::max<Index>(1, n / 170);
        SuperpixelSelection sel = select_num_superpixels(img, search);
        out.diagnostics.set("superpixels.requested", static_cast<double>(sel.requested));
        map = std::move(sel.map);
    });
    out.diagnostics.set("superpixels.count", static_cast<double>(map.count()));
    out.diagnostics.set("superpixels.mean_size", map.mean_size());

    Matrix yc, y_d;
    ScaleConstants consts;
    run("constants", [&] {
        yc = coarsen(img.data(), map);
        y_d = expand(yc, map);
        consts = compute_scale_constants(m.pinv(), img, y_d, noise, sigma_psi2, map.mean_size(),
                                         map.harmonic_mean_size());
    });
    out.diagnostics.set("constants.trace_noise", noise.trace());
    out.diagnostics.set("constants.sigma_psi2", sigma_psi2);
    out.diagnostics.set("constants.c0", consts.c0);
    out.diagnostics.set("constants.c1", consts.c1);
    out.diagnostics.set("constants.cy", consts.cy);
    out.diagnostics.set("constants.ce", consts.ce);
    for (const auto& w : consts.warnings) out.diagnostics.warnings.push_back(w);

    UnmixResult coarse;
    run("coarse", [&] { coarse = bmua_coarse(yc, m, consts.c0, cfg); });
    out.diagnostics.merge(coarse.diagnostics);

    UnmixResult fine;
    run("fine", [&] {
        const Matrix a_d = expand(coarse.abundances.values, map);
        const Matrix psi_d = expand(coarse.nonlinear.values, map);
        fine = bmua_fine(img.data(), m, a_d, psi_d, consts, cfg);
    });
    out.diagnostics.merge(fine.diagnostics);

    const Matrix ac_fine = coarsen(fine.abundances.values, map);
    const double drift = (ac_fine - coarse.abundances.values).colwise().norm().mean();
    out.diagnostics.set("consistency.coarse_drift", drift);
    if (drift > 3.0 * std::sqrt(std::max(consts.cy, 0.0)))
        log_message(LogLevel::info, "coarse/fine drift " + std::to_string(drift) + " exceeds 3 sqrt(C_Y)");

    out.abundances = std::move(fine.abundances);
    out.nonlinear = std::move(fine.nonlinear);
    out.residual = std::move(fine.residual);
    out.dual = std::move(fine.dual);
    return out;
}

}  // namespace nlunmix

#endif  // NLUNMIX_UNMIXERS_HPP
