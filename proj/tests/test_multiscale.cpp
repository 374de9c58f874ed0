#include <gtest/gtest.h>

#include <random>
#include <set>

#include <nlunmix/multiscale.hpp>

using namespace nlunmix;

namespace {

// 4-connectivity check of every superpixel by flood fill.
bool all_connected(const SuperpixelMap& map) {
    const Index w = map.width(), h = map.height();
    for (const auto& members : map.members()) {
        std::set<Index> inside(members.begin(), members.end()), seen{members.front()};
        std::vector<Index> stack{members.front()};
        while (!stack.empty()) {
            const Index p = stack.back();
            stack.pop_back();
            const Index x = p % w, y = p / w;
            const Index nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[1] < 0 || q[0] >= w || q[1] >= h) continue;
                const Index id = q[1] * w + q[0];
                if (inside.count(id) && seen.insert(id).second) stack.push_back(id);
            }
        }
        if (seen.size() != members.size()) return false;
    }
    return true;
}

SpectralImage two_halves(Index w, Index h) {
    Matrix y(3, w * h);
    for (Index n = 0; n < w * h; ++n) {
        const bool left = n % w < w / 2;
        y.col(n) = left ? Vector(Vector::Constant(3, 0.2)) : Vector(Vector::LinSpaced(3, 0.9, 0.5));
    }
    return SpectralImage(w, h, y);
}

SuperpixelMap random_map(std::mt19937_64& rng, Index n) {
    std::uniform_int_distribution<int> dk(1, static_cast<int>(n));
    const int k = dk(rng);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % k);
    std::shuffle(labels.begin(), labels.end(), rng);
    return SuperpixelMap(n, 1, labels);
}

}  // namespace

TEST(SuperpixelMapTest, RejectsBadLabels) {
    EXPECT_THROW(SuperpixelMap(2, 2, {0, 1, 2}), DimensionMismatch);
    EXPECT_THROW(SuperpixelMap(2, 1, {0, 2}), InvalidArgument);
    EXPECT_THROW(SuperpixelMap(2, 1, {0, -1}), InvalidArgument);
}

TEST(SuperpixelMapTest, SizeStatistics) {
    const SuperpixelMap map(4, 1, {0, 0, 0, 1});
    EXPECT_EQ(map.count(), 2);
    EXPECT_DOUBLE_EQ(map.mean_size(), 2.0);
    EXPECT_DOUBLE_EQ(map.harmonic_mean_size(), 2.0 / (1.0 / 3.0 + 1.0));
}

TEST(Slic, SingleSuperpixel) {
    std::srand(1);
    const SpectralImage img(6, 5, Matrix::Random(4, 30).cwiseAbs());
    const SuperpixelMap map = slic_segment(img, 1);
    EXPECT_EQ(map.count(), 1);
    EXPECT_EQ(map.sizes()[0], 30);
}

TEST(Slic, OnePixelPerSuperpixel) {
    std::srand(2);
    const SpectralImage img(4, 4, Matrix::Random(3, 16).cwiseAbs());
    const SuperpixelMap map = slic_segment(img, 16);
    EXPECT_EQ(map.count(), 16);
    for (Index s : map.sizes()) EXPECT_EQ(s, 1);
}

TEST(Slic, RecoversTwoConstantHalves) {
    const SuperpixelMap map = slic_segment(two_halves(4, 4), 2);
    ASSERT_EQ(map.count(), 2);
    for (Index n = 0; n < 16; ++n) {
        const bool left = n % 4 < 2;
        EXPECT_EQ(map.label(n) == map.label(0), left) << "pixel " << n;
    }
}

TEST(Slic, RegionsAreConnectedAndPartition) {
    std::srand(3);
    const SpectralImage img(20, 15, Matrix::Random(5, 300).cwiseAbs());
    for (Index k : {3, 10, 37, 80}) {
        const SuperpixelMap map = slic_segment(img, k);
        Index total = 0;
        for (Index s : map.sizes()) total += s;
        EXPECT_EQ(total, 300);
        EXPECT_TRUE(all_connected(map)) << "k = " << k;
    }
}

TEST(Slic, TooManySuperpixels) {
    const SpectralImage img(2, 2, Matrix::Ones(2, 4));
    EXPECT_THROW(slic_segment(img, 5), InvalidArgument);
    EXPECT_THROW(slic_segment(img, 0), InvalidArgument);
}

TEST(Coarsen, MeansAndConstants) {
    Matrix x(1, 4);
    x << 1, 2, 3, 5;
    const SuperpixelMap one(4, 1, {0, 0, 0, 0});
    EXPECT_DOUBLE_EQ(coarsen(x, one)(0, 0), 2.75);
    const SuperpixelMap two(4, 1, {1, 0, 1, 0});
    const Matrix c = coarsen(Matrix::Constant(3, 4, 0.4), two);
    EXPECT_TRUE((c.array() - 0.4).abs().maxCoeff() < 1e-15);
    EXPECT_THROW(coarsen(Matrix::Ones(2, 3), two), DimensionMismatch);
}

TEST(Coarsen, SingletonsPermuteColumns) {
    Matrix x(2, 3);
    x << 1, 2, 3, 4, 5, 6;
    const SuperpixelMap map(3, 1, {2, 0, 1});
    const Matrix c = coarsen(x, map);
    EXPECT_EQ(c.col(2), x.col(0));
    EXPECT_EQ(c.col(0), x.col(1));
    EXPECT_EQ(c.col(1), x.col(2));
}

TEST(Expand, ReplicatesByLabel) {
    Matrix xc(1, 2);
    xc << 1, 5;
    const SuperpixelMap map(3, 1, {0, 0, 1});
    Matrix expected(1, 3);
    expected << 1, 1, 5;
    EXPECT_EQ(expand(xc, map), expected);
    const SuperpixelMap one(3, 1, {0, 0, 0});
    Vector v(2);
    v << 0.3, 0.7;
    const Matrix e = expand(Matrix(v), one);
    for (Index n = 0; n < 3; ++n) EXPECT_EQ(Vector(e.col(n)), v);
    EXPECT_THROW(expand(Matrix::Ones(1, 3), map), DimensionMismatch);
}

TEST(MultiscaleAlgebra, RoundTripsAndSimplex) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const SuperpixelMap map = random_map(rng, 25);
        std::srand(static_cast<unsigned>(trial));
        const Matrix xc = Matrix::Random(3, map.count());
        EXPECT_LT((coarsen(expand(xc, map), map) - xc).cwiseAbs().maxCoeff(), 1e-12);
        const Matrix x = Matrix::Random(3, 25);
        const Matrix once = expand(coarsen(x, map), map);
        EXPECT_LT((expand(coarsen(once, map), map) - once).cwiseAbs().maxCoeff(), 1e-12);
        Matrix a = Matrix::Random(4, 25).cwiseAbs();
        for (Index n = 0; n < 25; ++n) a.col(n) /= a.col(n).sum();
        const Matrix ac = coarsen(a, map);
        EXPECT_GE(ac.minCoeff(), 0.0);
        EXPECT_LT((ac.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
}

TEST(MultiscaleAlgebra, AveragingReducesNoiseVariance) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Index n = 40000, s = 8;
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i / s);
    const SuperpixelMap map(n, 1, labels);
    Matrix x(1, n);
    for (Index i = 0; i < n; ++i) x(0, i) = normal(rng);
    const Matrix c = coarsen(x, map);
    const double var = c.squaredNorm() / static_cast<double>(c.cols());
    const double k = static_cast<double>(c.cols());
    // Sample variance of K chi-square draws has relative std sqrt(2 / K).
    EXPECT_NEAR(var, 1.0 / s, 3.0 * std::sqrt(2.0 / k) / s);
}

TEST(Homogeneity, OrthonormalPixelsGiveUnitRatio) {
    Matrix y = Matrix::Zero(3, 2);
    y(0, 0) = 1.0;
    y(1, 1) = 1.0;
    const SpectralImage img(2, 1, y);
    EXPECT_NEAR(homogeneity(img, SuperpixelMap(2, 1, {0, 0})), 1.0, 1e-12);
}

TEST(Homogeneity, RankOneAndSingletonAreCapped) {
    const SpectralImage flat(2, 1, Matrix::Constant(3, 2, 0.5));
    EXPECT_DOUBLE_EQ(homogeneity(flat, SuperpixelMap(2, 1, {0, 0})), kHomRatioCap);
    Matrix y(2, 2);
    y << 1, 0, 0, 1;
    const SpectralImage img(2, 1, y);
    EXPECT_DOUBLE_EQ(homogeneity(img, SuperpixelMap(2, 1, {0, 1})), kHomRatioCap);
}

TEST(SelectSuperpixels, ConstantImagePicksSmallestCount) {
    const SpectralImage img(8, 8, Matrix::Constant(3, 64, 0.3));
    SuperpixelSearch search;
    search.k_min = 4;
    search.k_max = 16;
    const SuperpixelSelection sel = select_num_superpixels(img, search);
    EXPECT_EQ(sel.requested, 4);
    for (const auto& c : sel.profile.candidates) EXPECT_DOUBLE_EQ(c.hom, kHomRatioCap);
    search.prefer_more_superpixels = true;
    const SuperpixelSelection more = select_num_superpixels(img, search);
    for (const auto& c : more.profile.candidates) EXPECT_LE(c.count, more.map.count());
}

TEST(SelectSuperpixels, TwoMaterialSceneRespectsBorder) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal(0.0, 1e-3);
    SpectralImage base = two_halves(16, 16);
    Matrix y = base.data();
    for (Index i = 0; i < y.size(); ++i) y.data()[i] += normal(rng);
    const SpectralImage img(16, 16, y);
    SuperpixelSearch search;
    search.k_min = 2;
    search.k_max = 32;
    const SuperpixelSelection sel = select_num_superpixels(img, search);
    double best = 0.0;
    for (const auto& c : sel.profile.candidates) best = std::max(best, c.hom);
    EXPECT_GE(homogeneity(img, sel.map), 0.9 * best);
    for (const auto& members : sel.map.members()) {
        const bool left = members.front() % 16 < 8;
        for (Index p : members) EXPECT_EQ(p % 16 < 8, left);
    }
}

TEST(SelectSuperpixels, ZeroToleranceIsArgmax) {
    std::srand(4);
    const SpectralImage img(12, 12, Matrix::Random(4, 144).cwiseAbs());
    SuperpixelSearch search;
    search.k_min = 3;
    search.k_max = 40;
    search.eps = 0.0;
    const SuperpixelSelection sel = select_num_superpixels(img, search);
    double best = 0.0;
    for (const auto& c : sel.profile.candidates) best = std::max(best, c.hom);
    EXPECT_DOUBLE_EQ(homogeneity(img, sel.map), best);
    search.eps = 1.0;
    EXPECT_THROW(select_num_superpixels(img, search), InvalidArgument);
}
