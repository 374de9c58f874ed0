#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlunmix/data_model.hpp>
#include <nlunmix/image_io.hpp>

using namespace nlunmix;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "nlunmix_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_raw_cube(const std::filesystem::path& path, std::uint32_t bands, std::uint32_t w, std::uint32_t h,
                    const std::vector<float>& payload) {
    std::ofstream os(path, std::ios::binary);
    os.write("NLUXCUBE", 8);
    for (std::uint32_t v : {bands, w, h})
        for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
    for (float f : payload) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int i = 0; i < 4; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
}

}  // namespace

TEST(PseudoInverse, IdentityGivesIdentity) {
    const Matrix i2 = Matrix::Identity(2, 2);
    EXPECT_TRUE(pseudo_inverse(i2).isApprox(i2, 1e-15));
}

TEST(PseudoInverse, DiagonalInverse) {
    Matrix m(2, 2);
    m << 2, 0, 0, 4;
    Matrix expected(2, 2);
    expected << 0.5, 0, 0, 0.25;
    EXPECT_LT((pseudo_inverse(m) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PseudoInverse, TallMatrixMatchesNormalEquations) {
    Matrix m(3, 2);
    m << 1, 0, 0, 1, 0, 0;
    Matrix expected(2, 3);
    expected << 1, 0, 0, 0, 1, 0;
    EXPECT_LT((pseudo_inverse(m) - expected).cwiseAbs().maxCoeff(), 1e-15);

    Matrix g(3, 2);
    g << 1, 2, 3, 4, 5, 7;
    const Matrix oracle = (g.transpose() * g).inverse() * g.transpose();
    EXPECT_LT((pseudo_inverse(g) - oracle).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((pseudo_inverse(g) * g - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PseudoInverse, RandomFullRankIsLeftInverse) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> dl(1, 50);
    for (int trial = 0; trial < 100; ++trial) {
        const int l = dl(rng);
        const int p = std::uniform_int_distribution<int>(1, std::min(8, l))(rng);
        std::srand(static_cast<unsigned>(trial + 1));
        const Matrix m = Matrix::Random(l, p);
        EXPECT_LT((pseudo_inverse(m) * m - Matrix::Identity(p, p)).cwiseAbs().maxCoeff(), 1e-8) << "trial " << trial;
    }
}

TEST(PseudoInverse, RankDeficiencyIsRejected) {
    Matrix dup(3, 2);
    dup << 1, 1, 2, 2, 3, 3;
    EXPECT_THROW(pseudo_inverse(dup), RankDeficient);
    EXPECT_THROW(pseudo_inverse(Matrix::Ones(2, 3)), RankDeficient);
    EXPECT_THROW(EndmemberMatrix{dup}, RankDeficient);
}

TEST(EndmemberMatrixTest, CachesPseudoInverse) {
    const EndmemberMatrix m(Matrix::Identity(2, 2));
    EXPECT_EQ(m.bands(), 2);
    EXPECT_EQ(m.count(), 2);
    EXPECT_TRUE(m.pinv().isApprox(Matrix::Identity(2, 2)));
}

TEST(SpectralImageTest, ValidatesShapeAndValues) {
    EXPECT_THROW(SpectralImage(2, 2, Matrix::Zero(3, 3)), DimensionMismatch);
    EXPECT_THROW(SpectralImage(1, 1, Matrix::Zero(1, 1)), InvalidArgument);
    Matrix bad = Matrix::Zero(2, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(SpectralImage(1, 1, bad), InvalidArgument);
}

TEST(SpectralImageTest, RowMajorPixelOrder) {
    const SpectralImage img(3, 2, Matrix::Zero(2, 6));
    EXPECT_EQ(img.row_of(4), 1);
    EXPECT_EQ(img.col_of(4), 1);
    EXPECT_EQ(img.row_of(2), 0);
    EXPECT_EQ(img.col_of(2), 2);
}

TEST(ImageIo, SinglePixelHeader) {
    const auto path = temp_path("single.cube");
    write_raw_cube(path, 2, 1, 1, {0.1f, 0.2f});
    const SpectralImage img = load_image(path.string());
    EXPECT_EQ(img.bands(), 2);
    EXPECT_EQ(img.pixels(), 1);
    EXPECT_EQ(img.data()(0, 0), static_cast<double>(0.1f));
    EXPECT_EQ(img.data()(1, 0), static_cast<double>(0.2f));
}

TEST(ImageIo, BandInterleavedLayout) {
    const auto path = temp_path("layout.cube");
    std::vector<float> payload;
    for (int i = 0; i < 12; ++i) payload.push_back(static_cast<float>(i));
    write_raw_cube(path, 3, 2, 2, payload);
    const SpectralImage img = load_image(path.string());
    EXPECT_EQ(img.bands(), 3);
    EXPECT_EQ(img.pixels(), 4);
    for (Index n = 0; n < 4; ++n)
        for (Index b = 0; b < 3; ++b) EXPECT_EQ(img.data()(b, n), static_cast<double>(3 * n + b));
}

TEST(ImageIo, ShortPayloadIsDimensionMismatch) {
    const auto path = temp_path("short.cube");
    write_raw_cube(path, 3, 2, 2, std::vector<float>(11, 0.5f));
    EXPECT_THROW(load_image(path.string()), DimensionMismatch);
}

TEST(ImageIo, MissingFileAndNonFinite) {
    EXPECT_THROW(load_image(temp_path("does_not_exist.cube").string()), IoError);
    const auto path = temp_path("nan.cube");
    write_raw_cube(path, 2, 1, 1, {0.1f, std::numeric_limits<float>::quiet_NaN()});
    EXPECT_THROW(load_image(path.string()), InvalidArgument);
}

TEST(ImageIo, RoundTripIsBitExact) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0.0f, 1.5f);
    Matrix data(5, 12);
    for (Index i = 0; i < data.size(); ++i) data.data()[i] = static_cast<double>(u(rng));
    const SpectralImage img(4, 3, data);
    const auto path = temp_path("roundtrip.cube");
    save_image(path.string(), img);
    const SpectralImage back = load_image(path.string());
    EXPECT_EQ(back.width(), 4);
    EXPECT_EQ(back.height(), 3);
    EXPECT_TRUE((back.data().array() == img.data().array()).all());
}

TEST(ImageIo, EndmemberCsvRoundTrip) {
    Matrix m(3, 2);
    m << 0.1, 0.7, 0.25, 0.5, 1.0 / 3.0, 0.9;
    const auto path = temp_path("m.csv");
    save_endmembers(path.string(), EndmemberMatrix(m));
    const EndmemberMatrix back = load_endmembers(path.string());
    EXPECT_TRUE((back.matrix().array() == m.array()).all());
}

TEST(ImageIo, CsvRejectsRaggedRows) {
    const auto path = temp_path("ragged.csv");
    std::ofstream(path) << "1,2\n3\n";
    EXPECT_THROW(read_csv_matrix(path.string()), DimensionMismatch);
}
