#ifndef NLUNMIX_DATA_MODEL_HPP
#define NLUNMIX_DATA_MODEL_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <utility>

#include "errors.hpp"

namespace nlunmix {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Left pseudo-inverse M^+ (P x L) of a full column rank L x P matrix, so that
/// M^+ M = I_P. Computed from an SVD; singular values below 1e-12 * sigma_max
/// count as zero and make the matrix rank deficient.
inline Matrix pseudo_inverse(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw InvalidArgument("pseudo_inverse: empty matrix");
    if (m.cols() > m.rows())
        throw RankDeficient("pseudo_inverse: more columns (" + std::to_string(m.cols()) +
                            ") than rows (" + std::to_string(m.rows()) + ")");
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double cutoff = 1e-12 * s(0);
    if (s(0) == 0.0 || s(s.size() - 1) <= cutoff)
        throw RankDeficient("pseudo_inverse: matrix is rank deficient");
    return svd.matrixV() * s.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
}

/// L-band reflectance cube stored column-per-pixel (L x N). Pixel n sits at
/// row n / width, column n % width.
class SpectralImage {
public:
    SpectralImage() = default;

    SpectralImage(Index width, Index height, Matrix data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (width_ <= 0 || height_ <= 0) throw InvalidArgument("SpectralImage: empty spatial extent");
        if (data_.cols() != width_ * height_)
            throw DimensionMismatch("SpectralImage: data has " + std::to_string(data_.cols()) +
                                    " columns, expected " + std::to_string(width_ * height_));
        if (data_.rows() < 2) throw InvalidArgument("SpectralImage: at least two bands required");
        if (!data_.allFinite()) throw InvalidArgument("SpectralImage: non-finite reflectance");
    }

    Index bands() const { return data_.rows(); }
    Index width() const { return width_; }
    Index height() const { return height_; }
    Index pixels() const { return data_.cols(); }
    const Matrix& data() const { return data_; }
    auto pixel(Index n) const { return data_.col(n); }
    Index row_of(Index n) const { return n / width_; }
    Index col_of(Index n) const { return n % width_; }

private:
    Index width_ = 0;
    Index height_ = 0;
    Matrix data_;
};

/// Endmember signatures M (L x P, one material per column) with the cached
/// left pseudo-inverse.
class EndmemberMatrix {
public:
    EndmemberMatrix() = default;

    explicit EndmemberMatrix(Matrix m) : m_(std::move(m)), pinv_(pseudo_inverse(m_)) {
        if (!m_.allFinite()) throw InvalidArgument("EndmemberMatrix: non-finite entry");
    }

    Index bands() const { return m_.rows(); }
    Index count() const { return m_.cols(); }
    const Matrix& matrix() const { return m_; }
    const Matrix& pinv() const { return pinv_; }

private:
    Matrix m_;
    Matrix pinv_;
};

// P x N fractional abundances.
struct AbundanceMap {
    Matrix values;
};

// L x N nonlinear contributions; column n holds psi_n evaluated at the rows of M.
struct NonlinearPart {
    Matrix values;
};

}  // namespace nlunmix

#endif  // NLUNMIX_DATA_MODEL_HPP
