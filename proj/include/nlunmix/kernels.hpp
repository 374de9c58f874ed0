#ifndef NLUNMIX_KERNELS_HPP
#define NLUNMIX_KERNELS_HPP

#include <cmath>
#include <string>

#include "data_model.hpp"

namespace nlunmix {

// Polynomial kernel k(u, v) = (u'v + c)^d. Inputs may optionally be shifted
// and rescaled first, k(u, v) = ((u - s)'(v - s) / r + c)^d; the defaults
// s = 0 and r = 1 give the plain form.
struct KernelConfig {
    int degree = 2;
    double offset = 1.0;
    double input_shift = 0.0;
    double input_scale = 1.0;

    bool is_plain() const { return input_shift == 0.0 && input_scale == 1.0; }

    // Inputs centered at 1/2 and divided by P^2 for P endmembers.
    static KernelConfig centered(Index p, int degree = 2, double offset = 1.0) {
        if (p < 1) throw InvalidArgument("KernelConfig::centered: need at least one endmember");
        const double pp = static_cast<double>(p);
        return KernelConfig{degree, offset, 0.5, pp * pp};
    }

    void validate() const {
        if (degree < 1) throw InvalidArgument("KernelConfig: degree must be >= 1");
        if (!(offset >= 0.0) || !std::isfinite(offset))
            throw InvalidArgument("KernelConfig: offset must be finite and >= 0");
        if (!std::isfinite(input_shift)) throw InvalidArgument("KernelConfig: input_shift must be finite");
        if (!(input_scale > 0.0) || !std::isfinite(input_scale))
            throw InvalidArgument("KernelConfig: input_scale must be positive");
    }
};

template <class U, class V>
double poly_kernel(const Eigen::MatrixBase<U>& u, const Eigen::MatrixBase<V>& v, const KernelConfig& cfg) {
    if (u.size() != v.size()) throw DimensionMismatch("poly_kernel: vector lengths differ");
    if (cfg.is_plain()) return std::pow(u.dot(v) + cfg.offset, cfg.degree);
    const double dot = (u.array() - cfg.input_shift).matrix().dot((v.array() - cfg.input_shift).matrix());
    return std::pow(dot / cfg.input_scale + cfg.offset, cfg.degree);
}

/// Gram matrix over the rows of M: K(i, j) = k(m_i, m_j), where m_i is the
/// P-dimensional row of band i. Shared by every pixel of a problem.
struct GramMatrix {
    Matrix values;

    Index size() const { return values.rows(); }
};

inline GramMatrix gram_matrix(const Matrix& m, const KernelConfig& cfg = {}) {
    cfg.validate();
    const Index l = m.rows();
    Matrix k(l, l);
    // Upper triangle mirrored so K is exactly symmetric.
    for (Index j = 0; j < l; ++j)
        for (Index i = 0; i <= j; ++i) k(i, j) = k(j, i) = poly_kernel(m.row(i), m.row(j), cfg);
    return GramMatrix{std::move(k)};
}

inline GramMatrix gram_matrix(const EndmemberMatrix& m, const KernelConfig& cfg = {}) {
    return gram_matrix(m.matrix(), cfg);
}

/// Values psi(m_l), l = 1..L, of psi = sum_l beta_l k(., m_l).
inline Vector eval_nonlinear(const GramMatrix& k, const Vector& beta) {
    if (beta.size() != k.size()) throw DimensionMismatch("eval_nonlinear: beta length differs from K");
    return k.values * beta;
}

// Squared RKHS norm beta' K beta of the same expansion.
inline double rkhs_norm2(const GramMatrix& k, const Vector& beta) {
    if (beta.size() != k.size()) throw DimensionMismatch("rkhs_norm2: beta length differs from K");
    return beta.dot(k.values * beta);
}

}  // namespace nlunmix

#endif  // NLUNMIX_KERNELS_HPP
