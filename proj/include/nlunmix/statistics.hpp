#ifndef NLUNMIX_STATISTICS_HPP
#define NLUNMIX_STATISTICS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "detail/runtime.hpp"

namespace nlunmix {

/// Noise covariance shared by all pixels (L x L, symmetric PSD).
struct NoiseCovariance {
    Matrix sigma;

    double trace() const { return sigma.trace(); }
};

/// Residual-method noise estimate. Each band is regressed (with intercept) on
/// all other bands across pixels; the residual variances form a diagonal
/// covariance. The normal equations carry a ridge of 1e-6 times the mean
/// band energy.
inline NoiseCovariance estimate_noise_cov(const SpectralImage& img) {
    const Index l = img.bands(), n = img.pixels();
    if (n <= l)
        throw InvalidArgument("estimate_noise_cov: need more pixels (" + std::to_string(n) + ") than bands (" +
                              std::to_string(l) + ")");
    const Matrix centered = img.data().colwise() - img.data().rowwise().mean();
    const Matrix gram = centered * centered.transpose();
    const double ridge = 1e-6 * gram.trace() / static_cast<double>(l);
    const Matrix damped = gram + ridge * Matrix::Identity(l, l);
    // For the damped system, the coefficients regressing band j on the others
    // are w = -P(-j, j) / P(j, j) with P = damped^{-1}, so [1; -w] is column j
    // of P scaled by 1 / P(j, j).
    const Matrix prec = damped.llt().solve(Matrix::Identity(l, l));

    NoiseCovariance out{Matrix::Zero(l, l)};
    const double dof = static_cast<double>(n - l);
    for (Index j = 0; j < l; ++j) {
        const Vector coef = prec.col(j) / prec(j, j);
        const double rss = coef.dot(gram * coef);
        out.sigma(j, j) = std::max(rss, 0.0) / dof;
    }
    return out;
}

// C1 = tr(Sigma_e) + sigma_psi^2.
inline double compute_C1(const NoiseCovariance& noise, double sigma_psi2) {
    if (sigma_psi2 < 0.0) throw InvalidArgument("compute_C1: sigma_psi2 must be >= 0");
    return noise.trace() + sigma_psi2;
}

// C0 = tr(Sigma_e) / S + sigma_psi^2.
inline double compute_C0(const NoiseCovariance& noise, double sigma_psi2, double mean_size) {
    if (mean_size < 1.0) throw InvalidArgument("compute_C0: superpixel size must be >= 1");
    if (sigma_psi2 < 0.0) throw InvalidArgument("compute_C0: sigma_psi2 must be >= 0");
    return noise.trace() / mean_size + sigma_psi2;
}

/// C_Y = (1/N) sum_n |M^+ (y_n - y_Dn)|^2, where y_D is the image replicated
/// from its superpixel means.
inline double compute_CY(const Matrix& pinv, const Matrix& y, const Matrix& y_d) {
    if (y.rows() != y_d.rows() || y.cols() != y_d.cols())
        throw DimensionMismatch("compute_CY: image and coarse replica differ in shape");
    if (pinv.cols() != y.rows()) throw DimensionMismatch("compute_CY: pseudo-inverse width differs from bands");
    return (pinv * (y - y_d)).colwise().squaredNorm().sum() / static_cast<double>(y.cols());
}

inline double compute_CY(const Matrix& pinv, const SpectralImage& img, const Matrix& y_d) {
    return compute_CY(pinv, img.data(), y_d);
}

// Symmetric PSD square root; negative eigenvalues beyond round-off are rejected.
inline Matrix psd_sqrt(const Matrix& s) {
    if (s.isDiagonal()) {
        if ((s.diagonal().array() < 0.0).any()) throw InvalidArgument("psd_sqrt: negative variance");
        return Matrix(s.diagonal().cwiseSqrt().asDiagonal());
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
    const Vector& ev = eig.eigenvalues();
    const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    if (ev.minCoeff() < -tol) throw InvalidArgument("psd_sqrt: matrix is not positive semidefinite");
    return eig.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

// C_E = |M^+ Sigma_e^{1/2}|_F^2 (S - 1) / S.
inline double compute_CE(const Matrix& pinv, const NoiseCovariance& noise, double mean_size) {
    if (mean_size < 1.0) throw InvalidArgument("compute_CE: superpixel size must be >= 1");
    if (pinv.cols() != noise.sigma.rows()) throw DimensionMismatch("compute_CE: pseudo-inverse width differs");
    return (pinv * psd_sqrt(noise.sigma)).squaredNorm() * (mean_size - 1.0) / mean_size;
}

/// Constants fixing the quadratic equality constraints of both scales.
struct ScaleConstants {
    double c0 = 0.0;
    double c1 = 0.0;
    double cy = 0.0;
    double ce = 0.0;
    double sigma_psi2 = 0.0;
    double mean_size = 1.0;      // S = N / K
    double harmonic_size = 1.0;  // size used for C0
    NoiseCovariance noise;
    std::vector<std::string> warnings;

    // Right-hand side of the fine-scale abundance constraint, clamped when
    // C_Y - C_E is not positive.
    double fine_target() const {
        const double d = cy - ce;
        return d > 0.0 ? d : 1e-12 * cy;
    }
};

// 1e-8 * (1/N) sum_n |y_n|^2.
inline double default_sigma_psi2(const SpectralImage& img) {
    return 1e-8 * img.data().squaredNorm() / static_cast<double>(img.pixels());
}

/// All blind constants from an image, its coarse replica and the superpixel
/// sizes. C0 uses the harmonic mean size, which is what the coarse noise
/// energy averages to when superpixel sizes differ; C_E uses N / K, for which
/// its expression is exact.
inline ScaleConstants compute_scale_constants(const Matrix& pinv, const SpectralImage& img, const Matrix& y_d,
                                              const NoiseCovariance& noise, double sigma_psi2, double mean_size,
                                              double harmonic_size) {
    ScaleConstants k;
    k.noise = noise;
    k.sigma_psi2 = sigma_psi2;
    k.mean_size = mean_size;
    k.harmonic_size = harmonic_size;
    k.c1 = compute_C1(noise, sigma_psi2);
    k.c0 = compute_C0(noise, sigma_psi2, harmonic_size);
    k.cy = compute_CY(pinv, img, y_d);
    k.ce = compute_CE(pinv, noise, mean_size);
    if (k.cy - k.ce <= 0.0) {
        k.warnings.push_back("C_Y - C_E = " + std::to_string(k.cy - k.ce) + " is not positive; clamped to 1e-12 * C_Y");
        log_message(LogLevel::warn, k.warnings.back());
    }
    return k;
}

}  // namespace nlunmix

#endif  // NLUNMIX_STATISTICS_HPP
