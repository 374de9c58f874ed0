#include <gtest/gtest.h>

#include <random>

#include <nlunmix/metrics.hpp>
#include <nlunmix/multiscale.hpp>
#include <nlunmix/simulation.hpp>
#include <nlunmix/unmixers.hpp>

using namespace nlunmix;

namespace {

struct SmallScene {
    EndmemberMatrix m;
    Scene scene;
};

SmallScene small_scene(MixingModel model, double snr, std::uint64_t seed, Index w = 20, Index h = 20) {
    SceneSpec s;
    s.width = w;
    s.height = h;
    s.model = model;
    s.snr_db = snr;
    s.seed = seed;
    s.smoothness = 4.0;
    EndmemberMatrix m = synthetic_endmembers(3, 40, 7);
    return {m, generate_scene(s, m)};
}

bool on_simplex(const Matrix& a, double tol = 1e-6) {
    return a.minCoeff() >= -1e-9 && (a.colwise().sum().array() - 1.0).abs().maxCoeff() <= tol;
}

// 1/2 sum (|a|^2 + beta'K beta) for coarse-form solutions.
double coarse_primal(const UnmixResult& r, const GramMatrix& k, Index l) {
    const Matrix beta = r.dual->omega.topRows(l);
    return 0.5 * (r.abundances.values.squaredNorm() + (beta.transpose() * k.values * beta).trace());
}

}  // namespace

TEST(Fcls, IdentityEndmembers) {
    Matrix y(2, 1);
    y << 0.3, 0.7;
    const UnmixResult r = fcls(y, EndmemberMatrix(Matrix::Identity(2, 2)));
    EXPECT_NEAR(r.abundances.values(0, 0), 0.3, 1e-9);
    EXPECT_NEAR(r.abundances.values(1, 0), 0.7, 1e-9);
    EXPECT_TRUE(r.nonlinear.values.isZero());
    EXPECT_FALSE(r.dual.has_value());
}

TEST(Fcls, NoiselessLinearSceneIsExact) {
    const SmallScene s = small_scene(MixingModel::lmm, std::numeric_limits<double>::infinity(), 1);
    const UnmixResult r = fcls(s.scene.image, s.m);
    EXPECT_LE(rmse(s.scene.abundances.values, r.abundances.values), 1e-6);
    EXPECT_TRUE(on_simplex(r.abundances.values));
}

TEST(Fcls, OutsideHullMatchesGridOracle) {
    Matrix mm(3, 2);
    mm << 0.2, 0.6, 0.5, 0.3, 0.9, 0.4;
    const EndmemberMatrix m(mm);
    std::srand(4);
    for (int t = 0; t < 20; ++t) {
        const Vector y = Vector::Random(3) + Vector::Constant(3, 0.5);
        const UnmixResult r = fcls(Matrix(y), m);
        double best = std::numeric_limits<double>::infinity(), best_a = 0.0;
        for (int i = 0; i <= 1000; ++i) {
            const double a = i / 1000.0;
            const double e = (y - a * mm.col(0) - (1.0 - a) * mm.col(1)).squaredNorm();
            if (e < best) best = e, best_a = a;
        }
        EXPECT_NEAR(r.abundances.values(0, 0), best_a, 1e-3);
        EXPECT_TRUE(on_simplex(r.abundances.values));
    }
}

TEST(Khype, SingleEndmemberGivesOne) {
    const EndmemberMatrix m(Matrix(Vector::LinSpaced(10, 0.1, 0.9)));
    std::srand(5);
    const Matrix y = Matrix::Random(10, 6).cwiseAbs();
    const UnmixResult r = khype(y, m, 0.01);
    EXPECT_LT((r.abundances.values.array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Khype, PrimalEqualsDualAndReconstructionHolds) {
    const SmallScene s = small_scene(MixingModel::blmm, 30.0, 2, 8, 8);
    for (double mu : {0.001, 0.1, 1.0}) {
        for (const KernelConfig cfg : {KernelConfig{}, KernelConfig::centered(3)}) {
            const UnmixResult r = khype(s.scene.image, s.m, mu, cfg);
            const GramMatrix k = gram_matrix(s.m, cfg);
            const Matrix beta = r.dual->omega.topRows(40);
            const double primal = coarse_primal(r, k, 40) + 0.5 * r.residual.squaredNorm() / mu;
            EXPECT_NEAR(primal, r.dual->objective, 1e-8 * std::abs(primal));
            EXPECT_LT((r.residual - mu * beta).cwiseAbs().maxCoeff(), 1e-8);
            EXPECT_LT((s.scene.image.data() - s.m.matrix() * r.abundances.values - r.nonlinear.values - r.residual)
                          .cwiseAbs()
                          .maxCoeff(),
                      1e-8);
            EXPECT_TRUE(on_simplex(r.abundances.values));
            EXPECT_EQ(r.diagnostics.get("khype.mu"), mu);
        }
    }
    EXPECT_THROW(khype(s.scene.image, s.m, 0.0), InvalidArgument);
}

TEST(Khype, GridSearchKeepsBestValue) {
    const SmallScene s = small_scene(MixingModel::lmm, std::numeric_limits<double>::infinity(), 3, 10, 10);
    const KhypeSweep sweep =
        khype_grid_search(s.scene.image, s.m, khype_default_grid(), s.scene.abundances.values, KernelConfig::centered(3));
    ASSERT_EQ(sweep.table.size(), 7u);
    for (const auto& row : sweep.table) EXPECT_LE(sweep.best_rmse(), row.second);
    EXPECT_DOUBLE_EQ(rmse(s.scene.abundances.values, sweep.best_result.abundances.values), sweep.best_rmse());
    const KhypeSweep one = khype_grid_search(s.scene.image, s.m, {0.05}, s.scene.abundances.values);
    EXPECT_EQ(one.best_mu(), 0.05);
    EXPECT_THROW(khype_grid_search(s.scene.image, s.m, {}, s.scene.abundances.values), InvalidArgument);
    EXPECT_THROW(khype_grid_search(s.scene.image, s.m, {0.1, -1.0}, s.scene.abundances.values), InvalidArgument);
}

TEST(BmuaCoarse, RecoversKhypeMultiplier) {
    const SmallScene s = small_scene(MixingModel::blmm, 25.0, 4, 6, 6);
    const double mu = 0.02;
    const UnmixResult kh = khype(s.scene.image, s.m, mu);
    const double c0 = kh.residual.squaredNorm() / 36.0;
    BmuaConfig cfg;
    cfg.coarse_bisect.tol = 1e-12;
    cfg.coarse_bisect.max_iter = 200;
    const UnmixResult r = bmua_coarse(s.scene.image.data(), s.m, c0, cfg);
    EXPECT_NEAR(r.diagnostics.get("coarse.mu0"), 1.0 / mu, 1e-6 / mu);
    EXPECT_LE(r.diagnostics.get("coarse.relative_gap"), 0.15);
    EXPECT_LE(rmse(kh.abundances.values, r.abundances.values), 1e-3);
}

TEST(BmuaCoarse, StrongDuality) {
    const SmallScene s = small_scene(MixingModel::pnmm, 30.0, 5, 4, 4);
    const GramMatrix k = gram_matrix(s.m);
    const double c0 = khype(s.scene.image, s.m, 0.05).residual.squaredNorm() / 16.0;
    BmuaConfig cfg;
    cfg.coarse_bisect.tol = 1e-13;
    cfg.coarse_bisect.max_iter = 300;
    const UnmixResult r = bmua_coarse(s.scene.image.data(), s.m, c0, cfg);
    const double primal = coarse_primal(r, k, 40);
    EXPECT_GT(r.dual->mu[0], 0.0);
    EXPECT_NEAR(primal, r.dual->objective, 1e-4 * std::abs(primal));
    EXPECT_LT((r.residual - r.dual->omega.topRows(40) / r.dual->mu[0]).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(BmuaCoarse, UnattainableTargetIsBracketError) {
    const SmallScene s = small_scene(MixingModel::pnmm, 30.0, 5, 4, 4);
    EXPECT_THROW(bmua_coarse(s.scene.image.data(), s.m, 1e-9, BmuaConfig{}), BracketError);
}

TEST(BmuaCoarse, SmallC0RecoversMeanAbundance) {
    const SmallScene s = small_scene(MixingModel::lmm, std::numeric_limits<double>::infinity(), 6, 10, 10);
    const Matrix yc = s.scene.image.data().rowwise().mean();
    const Vector mean_a = s.scene.abundances.values.rowwise().mean();
    BmuaConfig cfg;
    cfg.kernel = KernelConfig::centered(3);
    const UnmixResult r = bmua_coarse(yc, s.m, 1e-8 * yc.squaredNorm(), cfg);
    // The kernel penalty pulls estimates toward the uniform point by about
    // 0.18 times their distance from it.
    const double spread = (mean_a.array() - 1.0 / 3.0).abs().maxCoeff();
    EXPECT_LT((r.abundances.values.col(0) - mean_a).cwiseAbs().maxCoeff(), 0.25 * spread + 1e-3);
}

TEST(BmuaCoarse, ZeroImageStaysOnSimplex) {
    const EndmemberMatrix m = synthetic_endmembers(3, 20, 1);
    const UnmixResult r = bmua_coarse(Matrix::Zero(20, 3), m, 1e-4, BmuaConfig{});
    EXPECT_TRUE(on_simplex(r.abundances.values));
    EXPECT_THROW(bmua_coarse(Matrix::Zero(20, 3), m, 0.0, BmuaConfig{}), InvalidArgument);
}

TEST(BmuaFine, AnchoredToExactCoarseSolution) {
    const SmallScene s = small_scene(MixingModel::lmm, 40.0, 7, 8, 8);
    ScaleConstants consts;
    // With the abundances pinned, the attainable residual energy lies between
    // the part of the noise outside the kernel span and the realized noise.
    consts.c1 = 0.85 * s.scene.noise.trace();
    consts.cy = 1e-6;
    consts.ce = 0.0;
    BmuaConfig cfg;
    cfg.kernel = KernelConfig::centered(3);
    const UnmixResult r = bmua_fine(s.scene.image.data(), s.m, s.scene.abundances.values, Matrix::Zero(40, 64), consts,
                                    cfg);
    EXPECT_LE(rmse(s.scene.abundances.values, r.abundances.values), 1e-2);
    EXPECT_TRUE(on_simplex(r.abundances.values));
}

TEST(BmuaFine, ConstraintsMetWithTrueNoiseEnergy) {
    const SmallScene s = small_scene(MixingModel::blmm, 20.0, 8);
    std::vector<int> labels(400);
    for (Index r = 0; r < 20; ++r)
        for (Index c = 0; c < 20; ++c) labels[static_cast<std::size_t>(r * 20 + c)] = static_cast<int>((r / 4) * 5 + c / 4);
    const SuperpixelMap map(20, 20, labels);
    const Matrix yc = coarsen(s.scene.image.data(), map);
    const Matrix y_d = expand(yc, map);
    BmuaConfig cfg;
    cfg.kernel = KernelConfig::centered(3);
    const ScaleConstants consts = compute_scale_constants(s.m.pinv(), s.scene.image, y_d, s.scene.noise, 0.0,
                                                          map.mean_size(), map.harmonic_mean_size());
    const UnmixResult coarse = bmua_coarse(yc, s.m, consts.c0, cfg);
    const UnmixResult r = bmua_fine(s.scene.image.data(), s.m, expand(coarse.abundances.values, map),
                                    expand(coarse.nonlinear.values, map), consts, cfg);
    EXPECT_LE(r.diagnostics.get("fine.relative_gap1"), 0.15);
    EXPECT_LE(r.diagnostics.get("fine.relative_gap2"), 0.15);
    EXPECT_GT(r.dual->mu[0], 0.0);
    EXPECT_GT(r.dual->mu[1], 0.0);
    EXPECT_TRUE(on_simplex(r.abundances.values));
    EXPECT_LT((s.scene.image.data() - s.m.matrix() * r.abundances.values - r.nonlinear.values - r.residual)
                  .cwiseAbs()
                  .maxCoeff(),
              1e-8);
}

TEST(BmuaFine, SinglePixelSelfConsistent) {
    Matrix mm(4, 2);
    mm << 0.2, 0.7, 0.4, 0.5, 0.8, 0.3, 0.6, 0.9;
    const EndmemberMatrix m(mm);
    Vector a(2);
    a << 0.35, 0.65;
    Vector noise(4);
    noise << 0.02, -0.01, 0.015, -0.005;
    const Matrix y = mm * a + mm.col(0).cwiseProduct(mm.col(1)) * 0.2 + noise;
    Vector a_d(2);
    a_d << 0.5, 0.5;
    const GramMatrix k = gram_matrix(m);
    // Constants chosen as the constraint values attained at (mu1, mu2) = (3, 0.5).
    const FineDuals d = FineInnerSolver(k, mm, m.pinv(), 3.0, 0.5).solve(y, Matrix(a_d), Matrix::Zero(4, 1));
    ScaleConstants consts;
    consts.c1 = d.beta_sq_sum() / 9.0;
    consts.cy = (d.shift_sq_sum() + d.mu3_sq_sum()) / 0.25;
    const UnmixResult r = bmua_fine(y, m, Matrix(a_d), Matrix::Zero(4, 1), consts, BmuaConfig{});
    EXPECT_LE(r.diagnostics.get("fine.relative_gap1"), 1e-8);
    EXPECT_LE(r.diagnostics.get("fine.relative_gap2"), 1e-8);
    EXPECT_NEAR(r.diagnostics.get("fine.mu1"), 3.0, 1e-5);
    EXPECT_NEAR(r.diagnostics.get("fine.mu2"), 0.5, 1e-5);

    // Without the Newton refinement the bisection alone stops near the
    // generating multipliers but not on them.
    BmuaConfig plain;
    plain.fine_polish_iterations = 0;
    const UnmixResult b = bmua_fine(y, m, Matrix(a_d), Matrix::Zero(4, 1), consts, plain);
    EXPECT_EQ(b.diagnostics.get("fine.polish_used"), 0.0);
    EXPECT_GE(b.diagnostics.get("fine.relative_gap1"), r.diagnostics.get("fine.relative_gap1"));
    EXPECT_NEAR(r.abundances.values.sum(), 1.0, 1e-6);
    EXPECT_GE(r.abundances.values.minCoeff(), 0.0);

    // At the generating multipliers both constraints are tight, so the dual
    // value equals the primal objective.
    const Vector alpha = d.beta.col(0) - m.pinv().transpose() * d.mu3.col(0);
    const double primal = 0.5 * alpha.dot(k.values * alpha);
    const double dual = d.block_objective.sum() - 0.5 * (3.0 * consts.c1 + 0.5 * consts.cy);
    EXPECT_NEAR(primal, dual, 1e-10 * std::abs(primal));
}

TEST(BmuaFine, ShapeErrors) {
    const EndmemberMatrix m = synthetic_endmembers(2, 10, 3);
    ScaleConstants consts;
    consts.c1 = 1e-3;
    consts.cy = 1e-3;
    EXPECT_THROW(bmua_fine(Matrix::Ones(10, 3), m, Matrix::Ones(2, 2), Matrix::Zero(10, 3), consts, BmuaConfig{}),
                 DimensionMismatch);
    EXPECT_THROW(bmua_fine(Matrix::Ones(10, 3), m, Matrix::Ones(2, 3), Matrix::Zero(9, 3), consts, BmuaConfig{}),
                 DimensionMismatch);
}

TEST(BmuaN, PipelineDiagnosticsAndDeterminism) {
    const SmallScene s = small_scene(MixingModel::blmm, 20.0, 9, 24, 24);
    BmuaConfig cfg;
    cfg.kernel = KernelConfig::centered(3);
    const UnmixResult a = bmua_n(s.scene.image, s.m, cfg);
    const UnmixResult b = bmua_n(s.scene.image, s.m, cfg);
    EXPECT_EQ(a.diagnostics.values, b.diagnostics.values);
    EXPECT_TRUE((a.abundances.values.array() == b.abundances.values.array()).all());
    for (const char* key : {"coarse.mu0", "fine.mu1", "fine.mu2"}) EXPECT_GT(a.diagnostics.get(key), 0.0) << key;
    for (const char* key : {"superpixels.count", "constants.c0", "constants.c1", "consistency.coarse_drift"})
        EXPECT_TRUE(a.diagnostics.has(key)) << key;
    EXPECT_TRUE(on_simplex(a.abundances.values));
    EXPECT_EQ(a.timings.size(), 6u);
    EXPECT_LE(a.diagnostics.get("coarse.relative_gap"), 0.15);
}

TEST(BmuaN, StageErrorsAreTagged) {
    const SmallScene s = small_scene(MixingModel::lmm, 30.0, 10, 10, 10);
    const EndmemberMatrix wrong = synthetic_endmembers(3, 30, 1);
    try {
        bmua_n(s.scene.image, wrong);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "validate");
    }
    BmuaConfig cfg;
    cfg.superpixel_map = SuperpixelMap(5, 20, std::vector<int>(100, 0));
    try {
        bmua_n(s.scene.image, s.m, cfg);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "superpixels");
    }
}

TEST(DiagnosticsTest, SetGetMergeReport) {
    Diagnostics d;
    d.set("a.x", 1.0);
    d.set("a.x", 2.0);
    d.set("b.y", 3.0);
    EXPECT_EQ(d.values.size(), 2u);
    EXPECT_EQ(d.get("a.x"), 2.0);
    EXPECT_THROW(d.get("missing"), InvalidArgument);
    Diagnostics e;
    e.set("c.z", 4.0);
    e.warnings.push_back("careful");
    d.merge(e);
    EXPECT_TRUE(d.has("c.z"));
    EXPECT_EQ(d.report(), "a.x = 2\nb.y = 3\nc.z = 4\nwarning = careful\n");
}

TEST(PolishDual, ConvergesOnConcaveQuadratic) {
    // d = -(u^2 + v^2 + u v) with u = mu1 - 2, v = mu2 - 3 has its maximum at (2, 3).
    auto eval = [](double mu1, double mu2) {
        const double u = mu1 - 2.0, v = mu2 - 3.0;
        detail::DualPoint p;
        p.mu1 = mu1;
        p.mu2 = mu2;
        p.value = -(u * u + v * v + u * v);
        p.grad = {-(2.0 * u + v), -(2.0 * v + u)};
        p.gap = {std::abs(p.grad[0]), std::abs(p.grad[1])};
        return p;
    };
    int evaluations = 0;
    const detail::DualPoint r = detail::polish_dual(eval, eval(0.5, 20.0), 50, 1e-10, evaluations);
    EXPECT_NEAR(r.mu1, 2.0, 1e-8);
    EXPECT_NEAR(r.mu2, 3.0, 1e-8);
    EXPECT_GT(evaluations, 0);

    int none = 0;
    const detail::DualPoint same = detail::polish_dual(eval, eval(2.0, 3.0), 50, 1e-10, none);
    EXPECT_EQ(none, 0);
    EXPECT_EQ(same.mu1, 2.0);
}
