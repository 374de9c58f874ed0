#ifndef NLUNMIX_METRICS_HPP
#define NLUNMIX_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "data_model.hpp"

namespace nlunmix {

// sqrt(|X - Xhat|_F^2 / numel).
inline double rmse(const Matrix& x, const Matrix& xhat) {
    if (x.rows() != xhat.rows() || x.cols() != xhat.cols())
        throw DimensionMismatch("rmse: shapes differ (" + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                                " vs " + std::to_string(xhat.rows()) + "x" + std::to_string(xhat.cols()) + ")");
    if (x.size() == 0) throw InvalidArgument("rmse: empty matrices");
    return std::sqrt((x - xhat).squaredNorm() / static_cast<double>(x.size()));
}

// Spectral angle in radians, as 2 atan2(|u - v|, |u + v|) of the unit
// vectors, which stays accurate near 0 and pi where acos does not.
inline double sam(const Vector& y, const Vector& yhat) {
    if (y.size() != yhat.size()) throw DimensionMismatch("sam: vector lengths differ");
    const double ny = y.norm(), nh = yhat.norm();
    if (ny == 0.0 || nh == 0.0) throw InvalidArgument("sam: zero vector");
    const Vector u = y / ny, v = yhat / nh;
    return 2.0 * std::atan2((u - v).norm(), (u + v).norm());
}

/// Symmetric Kullback-Leibler divergence between the vectors normalized to
/// probability distributions, entries floored at 1e-12 beforehand.
inline double sid(const Vector& y, const Vector& yhat) {
    if (y.size() != yhat.size()) throw DimensionMismatch("sid: vector lengths differ");
    if ((y.array() < 0.0).any() || (yhat.array() < 0.0).any()) throw InvalidArgument("sid: negative entries");
    const Vector p0 = y.cwiseMax(1e-12), q0 = yhat.cwiseMax(1e-12);
    const Vector p = p0 / p0.sum(), q = q0 / q0.sum();
    double d = 0.0;
    for (Index i = 0; i < p.size(); ++i) d += (p(i) - q(i)) * std::log(p(i) / q(i));
    return std::max(d, 0.0);
}

inline double radians_to_degrees(double r) { return r * 180.0 / std::numbers::pi; }

struct EvalReport {
    double rmse_a = 0.0;
    double rmse_y = 0.0;
    double sam_mean = 0.0;  // radians
    double sid_mean = 0.0;

    std::string to_text() const {
        std::ostringstream os;
        os.precision(10);
        os << "rmse_a = " << rmse_a << '\n'
           << "rmse_y = " << rmse_y << '\n'
           << "sam_mean_deg = " << radians_to_degrees(sam_mean) << '\n'
           << "sid_mean = " << sid_mean << '\n';
        return os.str();
    }
    static std::string csv_header() { return "rmse_a,rmse_y,sam_mean_deg,sid_mean"; }
    std::string csv_row() const {
        std::ostringstream os;
        os.precision(10);
        os << rmse_a << ',' << rmse_y << ',' << radians_to_degrees(sam_mean) << ',' << sid_mean;
        return os.str();
    }
};

/// Abundance RMSE plus reconstruction RMSE, mean SAM and mean SID over
/// pixels. Negative reconstruction entries are clipped to zero for SID.
inline EvalReport evaluate(const Matrix& a_true, const Matrix& a_est, const Matrix& y, const Matrix& y_hat) {
    EvalReport r;
    r.rmse_a = rmse(a_true, a_est);
    r.rmse_y = rmse(y, y_hat);
    double sam_sum = 0.0, sid_sum = 0.0;
    for (Index n = 0; n < y.cols(); ++n) {
        sam_sum += sam(y.col(n), y_hat.col(n));
        sid_sum += sid(y.col(n).cwiseMax(0.0), y_hat.col(n).cwiseMax(0.0));
    }
    r.sam_mean = sam_sum / static_cast<double>(y.cols());
    r.sid_mean = sid_sum / static_cast<double>(y.cols());
    return r;
}

}  // namespace nlunmix

#endif  // NLUNMIX_METRICS_HPP
