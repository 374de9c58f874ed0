#ifndef NLUNMIX_SIMULATION_HPP
#define NLUNMIX_SIMULATION_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "statistics.hpp"

namespace nlunmix {

enum class MixingModel { lmm, blmm, pnmm };

inline std::string to_string(MixingModel m) {
    switch (m) {
        case MixingModel::lmm: return "lmm";
        case MixingModel::blmm: return "blmm";
        case MixingModel::pnmm: return "pnmm";
    }
    return "unknown";
}

inline MixingModel parse_mixing_model(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "lmm") return MixingModel::lmm;
    if (s == "blmm") return MixingModel::blmm;
    if (s == "pnmm") return MixingModel::pnmm;
    throw InvalidArgument("unknown mixing model '" + s + "' (expected lmm, blmm or pnmm)");
}

struct SceneSpec {
    Index width = 50;
    Index height = 50;
    Index endmembers = 3;
    MixingModel model = MixingModel::blmm;
    double snr_db = 20.0;  // +infinity for a noiseless scene
    std::uint64_t seed = 0;
    double smoothness = 8.0;  // correlation length of the abundance fields, pixels
    double pnmm_exponent = 0.7;

    void validate() const {
        if (width < 1 || height < 1) throw InvalidArgument("SceneSpec: empty spatial extent");
        if (endmembers < 1) throw InvalidArgument("SceneSpec: need at least one endmember");
        if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
            throw InvalidArgument("SceneSpec: snr_db must be a number above -infinity");
        if (!(smoothness > 0.0)) throw InvalidArgument("SceneSpec: smoothness must be positive");
        if (!(pnmm_exponent > 0.0)) throw InvalidArgument("SceneSpec: PNMM exponent must be positive");
    }
};

namespace detail {

// Independent generator streams derived from one seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

// Gaussian kernel of standard deviation sigma truncated at 3 sigma (or the
// image extent) and normalized over the taps that fall inside the image.
inline Matrix blur_axis(const Matrix& f, double sigma, bool along_rows) {
    const Index rows = f.rows(), cols = f.cols();
    const Index extent = along_rows ? cols : rows;
    const Index radius = std::min<Index>(extent - 1, static_cast<Index>(std::ceil(3.0 * sigma)));
    std::vector<double> w(static_cast<std::size_t>(radius + 1));
    for (Index d = 0; d <= radius; ++d) w[static_cast<std::size_t>(d)] = std::exp(-0.5 * (d / sigma) * (d / sigma));
    Matrix out(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) {
            const Index pos = along_rows ? c : r;
            double acc = 0.0, norm = 0.0;
            for (Index q = std::max<Index>(0, pos - radius); q <= std::min(extent - 1, pos + radius); ++q) {
                const double wt = w[static_cast<std::size_t>(std::abs(q - pos))];
                acc += wt * (along_rows ? f(r, q) : f(q, c));
                norm += wt;
            }
            out(r, c) = acc / norm;
        }
    return out;
}

}  // namespace detail

/// Spatially correlated abundances: P blurred white-noise fields, each scaled
/// to unit root-mean-square, squared and normalized per pixel.
inline AbundanceMap gen_abundances(const SceneSpec& spec) {
    spec.validate();
    const Index p = spec.endmembers, n = spec.width * spec.height;
    AbundanceMap a{Matrix::Ones(p, n)};
    if (p == 1) return a;
    auto rng = detail::make_rng(spec.seed, 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index k = 0; k < p; ++k) {
        Matrix field(spec.height, spec.width);
        for (Index r = 0; r < spec.height; ++r)
            for (Index c = 0; c < spec.width; ++c) field(r, c) = normal(rng);
        field = detail::blur_axis(detail::blur_axis(field, spec.smoothness, true), spec.smoothness, false);
        const double rms = std::sqrt(field.squaredNorm() / static_cast<double>(n));
        for (Index r = 0; r < spec.height; ++r)
            for (Index c = 0; c < spec.width; ++c) {
                const double v = field(r, c) / rms;
                a.values(k, r * spec.width + c) = std::max(v * v, 1e-12);
            }
    }
    for (Index j = 0; j < n; ++j) a.values.col(j) /= a.values.col(j).sum();
    return a;
}

/// Smooth reflectance-like spectra in [0, 1]. Every spectrum mixes a shared
/// background (weight `shared`) with its own features; both are sums of
/// shifted sigmoids. Each result is mapped affinely into a random sub-range
/// of [0.05, 0.98]. A larger `shared` gives more correlated signatures, as
/// is typical of measured libraries.
inline EndmemberMatrix synthetic_endmembers(Index p, Index bands = 224, std::uint64_t seed = 0, double shared = 0.0) {
    if (p < 1) throw InvalidArgument("synthetic_endmembers: need at least one endmember");
    if (bands < p || bands < 2) throw InvalidArgument("synthetic_endmembers: need at least max(P, 2) bands");
    if (!(shared >= 0.0 && shared < 1.0)) throw InvalidArgument("synthetic_endmembers: shared must lie in [0, 1)");
    auto rng = detail::make_rng(seed, 2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto sigmoid_sum = [&](int terms) {
        Vector s = Vector::Zero(bands);
        for (int j = 0; j < terms; ++j) {
            const double height = -0.4 + unit(rng);
            const double centre = unit(rng);
            const double width = 0.02 + 0.08 * unit(rng);
            for (Index b = 0; b < bands; ++b) {
                const double t = static_cast<double>(b) / static_cast<double>(bands - 1);
                s(b) += height / (1.0 + std::exp(-(t - centre) / width));
            }
        }
        const double lo = s.minCoeff(), hi = s.maxCoeff();
        return Vector((s.array() - lo) / (hi - lo > 1e-12 ? hi - lo : 1.0));
    };
    const Vector background = sigmoid_sum(4);
    Matrix m(bands, p);
    for (Index k = 0; k < p; ++k) {
        const Vector s = shared * background + (1.0 - shared) * sigmoid_sum(4);
        const double lo = 0.05 + 0.25 * unit(rng), hi = 0.7 + 0.28 * unit(rng);
        const double smin = s.minCoeff(), smax = s.maxCoeff();
        const double span = smax - smin > 1e-12 ? smax - smin : 1.0;
        m.col(k) = ((s.array() - smin) / span * (hi - lo) + lo).matrix();
    }
    return EndmemberMatrix(std::move(m));
}

/// Mixes abundances with the chosen model:
///   LMM  y = Ma
///   BLMM y = Ma + sum_{i<j} a_i a_j (m_i o m_j)
///   PNMM y = (Ma)^exponent elementwise
inline SpectralImage mix(const EndmemberMatrix& m, const AbundanceMap& a, Index width, Index height,
                         MixingModel model, double pnmm_exponent = 0.7) {
    const Matrix& mm = m.matrix();
    const Matrix& av = a.values;
    if (av.rows() != m.count()) throw DimensionMismatch("mix: abundance rows differ from endmember count");
    if (av.cols() != width * height) throw DimensionMismatch("mix: abundance columns differ from width * height");
    Matrix y = mm * av;
    if (model == MixingModel::blmm) {
        for (Index i = 0; i < m.count(); ++i)
            for (Index j = i + 1; j < m.count(); ++j) {
                const Vector prod = mm.col(i).cwiseProduct(mm.col(j));
                y += prod * av.row(i).cwiseProduct(av.row(j));
            }
    } else if (model == MixingModel::pnmm) {
        if ((y.array() < 0.0).any()) throw InvalidArgument("mix: PNMM needs nonnegative linear mixtures");
        y = y.array().pow(pnmm_exponent).matrix();
    }
    return SpectralImage(width, height, std::move(y));
}

struct NoisyImage {
    SpectralImage image;
    NoiseCovariance noise;  // true covariance v I
};

/// Adds white Gaussian noise of per-band variance
/// v = sum y^2 / (L N 10^(snr/10)). An infinite SNR leaves the image unchanged.
inline NoisyImage add_noise(const SpectralImage& img, double snr_db, std::uint64_t seed) {
    const Index l = img.bands(), n = img.pixels();
    const double energy = img.data().squaredNorm();
    if (!(energy > 0.0)) throw InvalidArgument("add_noise: image is identically zero");
    if (std::isnan(snr_db)) throw InvalidArgument("add_noise: SNR is not a number");
    if (snr_db == std::numeric_limits<double>::infinity()) return {img, NoiseCovariance{Matrix::Zero(l, l)}};
    const double v = energy / (static_cast<double>(l) * static_cast<double>(n) * std::pow(10.0, snr_db / 10.0));
    auto rng = detail::make_rng(seed, 3);
    std::normal_distribution<double> normal(0.0, std::sqrt(v));
    Matrix y = img.data();
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < l; ++i) y(i, j) += normal(rng);
    return {SpectralImage(img.width(), img.height(), std::move(y)), NoiseCovariance{v * Matrix::Identity(l, l)}};
}

struct Scene {
    SceneSpec spec;
    EndmemberMatrix endmembers;
    AbundanceMap abundances;
    SpectralImage clean;
    SpectralImage image;
    NoiseCovariance noise;
};

/// Abundances, mixing and noise for one spec and endmember set.
inline Scene generate_scene(const SceneSpec& spec, const EndmemberMatrix& m) {
    spec.validate();
    if (m.count() != spec.endmembers)
        throw DimensionMismatch("generate_scene: endmember count differs from the spec");
    Scene s{spec, m, gen_abundances(spec), {}, {}, {}};
    s.clean = mix(m, s.abundances, spec.width, spec.height, spec.model, spec.pnmm_exponent);
    NoisyImage noisy = add_noise(s.clean, spec.snr_db, spec.seed);
    s.image = std::move(noisy.image);
    s.noise = std::move(noisy.noise);
    return s;
}

}  // namespace nlunmix

#endif  // NLUNMIX_SIMULATION_HPP
