#ifndef NLUNMIX_MULTISCALE_HPP
#define NLUNMIX_MULTISCALE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "data_model.hpp"

namespace nlunmix {

/// Pixel -> superpixel labeling. It defines the averaging transform W
/// (coarsen) and its replication conjugate W* (expand).
class SuperpixelMap {
public:
    SuperpixelMap() = default;

    // Labels must cover [0, count) with every superpixel nonempty.
    SuperpixelMap(Index width, Index height, std::vector<int> labels)
        : width_(width), height_(height), labels_(std::move(labels)) {
        if (static_cast<Index>(labels_.size()) != width_ * height_)
            throw DimensionMismatch("SuperpixelMap: label count differs from width * height");
        int max_label = -1;
        for (int l : labels_) {
            if (l < 0) throw InvalidArgument("SuperpixelMap: negative label");
            max_label = std::max(max_label, l);
        }
        sizes_.assign(static_cast<std::size_t>(max_label + 1), 0);
        for (int l : labels_) ++sizes_[static_cast<std::size_t>(l)];
        for (Index s : sizes_)
            if (s == 0) throw InvalidArgument("SuperpixelMap: labels are not contiguous");
    }

    Index width() const { return width_; }
    Index height() const { return height_; }
    Index pixels() const { return static_cast<Index>(labels_.size()); }
    Index count() const { return static_cast<Index>(sizes_.size()); }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<Index>& sizes() const { return sizes_; }
    int label(Index n) const { return labels_[static_cast<std::size_t>(n)]; }

    // Mean superpixel size N / K.
    double mean_size() const { return static_cast<double>(pixels()) / static_cast<double>(count()); }

    // Harmonic mean of the superpixel sizes, K / sum_i 1/|N_i|.
    double harmonic_mean_size() const {
        double inv = 0.0;
        for (Index s : sizes_) inv += 1.0 / static_cast<double>(s);
        return static_cast<double>(count()) / inv;
    }

    // Pixel indices of every superpixel, in increasing pixel order.
    std::vector<std::vector<Index>> members() const {
        std::vector<std::vector<Index>> out(sizes_.size());
        for (std::size_t i = 0; i < sizes_.size(); ++i) out[i].reserve(static_cast<std::size_t>(sizes_[i]));
        for (Index n = 0; n < pixels(); ++n) out[static_cast<std::size_t>(label(n))].push_back(n);
        return out;
    }

private:
    Index width_ = 0;
    Index height_ = 0;
    std::vector<int> labels_;
    std::vector<Index> sizes_;
};

/// X W: column i of the result is the mean of the columns of X labeled i.
/// The mean is accumulated incrementally so a block of identical columns
/// averages back to exactly that column.
inline Matrix coarsen(const Matrix& x, const SuperpixelMap& map) {
    if (x.cols() != map.pixels())
        throw DimensionMismatch("coarsen: matrix has " + std::to_string(x.cols()) + " columns, map has " +
                                std::to_string(map.pixels()) + " pixels");
    Matrix out = Matrix::Zero(x.rows(), map.count());
    std::vector<Index> seen(static_cast<std::size_t>(map.count()), 0);
    for (Index n = 0; n < x.cols(); ++n) {
        const int i = map.label(n);
        const double k = static_cast<double>(++seen[static_cast<std::size_t>(i)]);
        out.col(i) += (x.col(n) - out.col(i)) / k;
    }
    return out;
}

/// Xc W*: every pixel receives the column of its superpixel.
inline Matrix expand(const Matrix& xc, const SuperpixelMap& map) {
    if (xc.cols() != map.count())
        throw DimensionMismatch("expand: matrix has " + std::to_string(xc.cols()) + " columns, map has " +
                                std::to_string(map.count()) + " superpixels");
    Matrix out(xc.rows(), map.pixels());
    for (Index n = 0; n < map.pixels(); ++n) out.col(n) = xc.col(map.label(n));
    return out;
}

// Mean pixel norm scaled by 0.05.
inline double default_compactness(const SpectralImage& img) {
    return 0.05 * img.data().colwise().norm().mean();
}

struct SlicOptions {
    double compactness = -1.0;  // <= 0 selects default_compactness()
    int iterations = 10;
};

namespace detail {

// Relabels 4-connected components; components smaller than min_size are
// absorbed by an adjacent component. Labels come out consecutive.
inline std::vector<int> enforce_connectivity(Index width, Index height, const std::vector<int>& labels,
                                             Index min_size) {
    const Index n = width * height;
    std::vector<int> out(static_cast<std::size_t>(n), -1);
    std::vector<Index> component;
    const int dx[4] = {-1, 0, 1, 0};
    const int dy[4] = {0, -1, 0, 1};
    int next = 0;
    for (Index start = 0; start < n; ++start) {
        if (out[static_cast<std::size_t>(start)] >= 0) continue;
        // A label already assigned next to the component seed.
        int adjacent = -1;
        const Index sx = start % width, sy = start / width;
        for (int d = 0; d < 4; ++d) {
            const Index x = sx + dx[d], y = sy + dy[d];
            if (x < 0 || y < 0 || x >= width || y >= height) continue;
            const int l = out[static_cast<std::size_t>(y * width + x)];
            if (l >= 0) adjacent = l;
        }
        component.clear();
        component.push_back(start);
        out[static_cast<std::size_t>(start)] = next;
        const int original = labels[static_cast<std::size_t>(start)];
        for (std::size_t head = 0; head < component.size(); ++head) {
            const Index p = component[head];
            const Index px = p % width, py = p / width;
            for (int d = 0; d < 4; ++d) {
                const Index x = px + dx[d], y = py + dy[d];
                if (x < 0 || y < 0 || x >= width || y >= height) continue;
                const Index q = y * width + x;
                if (out[static_cast<std::size_t>(q)] < 0 && labels[static_cast<std::size_t>(q)] == original) {
                    out[static_cast<std::size_t>(q)] = next;
                    component.push_back(q);
                }
            }
        }
        if (static_cast<Index>(component.size()) < min_size && adjacent >= 0) {
            for (Index p : component) out[static_cast<std::size_t>(p)] = adjacent;
        } else {
            ++next;
        }
    }
    return out;
}

}  // namespace detail

/// SLIC over the full spectral vectors. Seeds start on a regular grid of
/// about K cells; assignment uses the squared distance
///   |y - c|^2 + (compactness / step)^2 * |p - p_c|^2
/// inside a 2*step window around each center. The resulting count can differ
/// slightly from K after connectivity enforcement.
inline SuperpixelMap slic_segment(const SpectralImage& img, Index k, const SlicOptions& opts = {}) {
    const Index w = img.width(), h = img.height(), n = img.pixels();
    if (k < 1 || k > n)
        throw InvalidArgument("slic_segment: superpixel count " + std::to_string(k) + " outside [1, " +
                              std::to_string(n) + "]");
    const Matrix& y = img.data();
    const double compactness = opts.compactness > 0.0 ? opts.compactness : default_compactness(img);

    const Index nx = std::clamp<Index>(
        static_cast<Index>(std::llround(std::sqrt(static_cast<double>(k) * w / h))), 1, w);
    const Index ny = std::clamp<Index>(static_cast<Index>(std::llround(static_cast<double>(k) / nx)), 1, h);
    const double step_x = static_cast<double>(w) / nx;
    const double step_y = static_cast<double>(h) / ny;
    const double step = std::sqrt(step_x * step_y);
    const double spatial_weight = (compactness / step) * (compactness / step);
    const Index clusters = nx * ny;

    auto grad = [&](Index x, Index yy) {
        const Index xl = std::max<Index>(x - 1, 0), xr = std::min<Index>(x + 1, w - 1);
        const Index yu = std::max<Index>(yy - 1, 0), yd = std::min<Index>(yy + 1, h - 1);
        return (y.col(yy * w + xr) - y.col(yy * w + xl)).squaredNorm() +
               (y.col(yd * w + x) - y.col(yu * w + x)).squaredNorm();
    };

    Matrix centers(y.rows(), clusters);
    std::vector<double> cx(static_cast<std::size_t>(clusters)), cy(static_cast<std::size_t>(clusters));
    for (Index iy = 0; iy < ny; ++iy)
        for (Index ix = 0; ix < nx; ++ix) {
            const Index c = iy * nx + ix;
            Index px = std::clamp<Index>(static_cast<Index>(std::floor((ix + 0.5) * step_x)), 0, w - 1);
            Index py = std::clamp<Index>(static_cast<Index>(std::floor((iy + 0.5) * step_y)), 0, h - 1);
            if (std::min(step_x, step_y) >= 3.0) {
                // Move the seed off edges: lowest gradient in its 3x3 neighbourhood.
                Index bx = px, by = py;
                double best = grad(px, py);
                for (Index oy = -1; oy <= 1; ++oy)
                    for (Index ox = -1; ox <= 1; ++ox) {
                        const Index qx = px + ox, qy = py + oy;
                        if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
                        const double g = grad(qx, qy);
                        if (g < best) best = g, bx = qx, by = qy;
                    }
                px = bx, py = by;
            }
            centers.col(c) = y.col(py * w + px);
            cx[static_cast<std::size_t>(c)] = static_cast<double>(px);
            cy[static_cast<std::size_t>(c)] = static_cast<double>(py);
        }

    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index p = 0; p < n; ++p) {
        const Index ix = std::min<Index>(static_cast<Index>((p % w) / step_x), nx - 1);
        const Index iy = std::min<Index>(static_cast<Index>((p / w) / step_y), ny - 1);
        labels[static_cast<std::size_t>(p)] = static_cast<int>(iy * nx + ix);
    }

    std::vector<double> dist(static_cast<std::size_t>(n));
    for (int it = 0; it < opts.iterations; ++it) {
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        for (Index c = 0; c < clusters; ++c) {
            const double ccx = cx[static_cast<std::size_t>(c)], ccy = cy[static_cast<std::size_t>(c)];
            const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(ccx - step_x)));
            const Index x1 = std::min<Index>(w - 1, static_cast<Index>(std::ceil(ccx + step_x)));
            const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(ccy - step_y)));
            const Index y1 = std::min<Index>(h - 1, static_cast<Index>(std::ceil(ccy + step_y)));
            for (Index yy = y0; yy <= y1; ++yy)
                for (Index xx = x0; xx <= x1; ++xx) {
                    const Index p = yy * w + xx;
                    const double ds = (xx - ccx) * (xx - ccx) + (yy - ccy) * (yy - ccy);
                    const double d = (y.col(p) - centers.col(c)).squaredNorm() + spatial_weight * ds;
                    if (d < dist[static_cast<std::size_t>(p)]) {
                        dist[static_cast<std::size_t>(p)] = d;
                        labels[static_cast<std::size_t>(p)] = static_cast<int>(c);
                    }
                }
        }
        Matrix sums = Matrix::Zero(y.rows(), clusters);
        std::vector<double> sx(static_cast<std::size_t>(clusters), 0.0), sy(static_cast<std::size_t>(clusters), 0.0);
        std::vector<Index> counts(static_cast<std::size_t>(clusters), 0);
        for (Index p = 0; p < n; ++p) {
            const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(p)]);
            sums.col(static_cast<Index>(c)) += y.col(p);
            sx[c] += static_cast<double>(p % w);
            sy[c] += static_cast<double>(p / w);
            ++counts[c];
        }
        for (Index c = 0; c < clusters; ++c) {
            const auto cc = static_cast<std::size_t>(c);
            if (counts[cc] == 0) continue;
            const double inv = 1.0 / static_cast<double>(counts[cc]);
            centers.col(c) = sums.col(c) * inv;
            cx[cc] = sx[cc] * inv;
            cy[cc] = sy[cc] * inv;
        }
    }

    const Index min_size = n / (4 * clusters);
    return SuperpixelMap(w, h, detail::enforce_connectivity(w, h, labels, min_size));
}

inline constexpr double kHomRatioCap = 1e6;

/// Mean over superpixels of sigma_1 / sigma_2 of the matricized superpixel
/// (bands x members). sigma_2 is floored at 1e-6 * sigma_1 and each ratio is
/// capped at 1e6; single-pixel and all-zero superpixels contribute the cap.
inline double homogeneity(const SpectralImage& img, const SuperpixelMap& map) {
    if (img.pixels() != map.pixels()) throw DimensionMismatch("homogeneity: image and map sizes differ");
    const Matrix& y = img.data();
    double total = 0.0;
    for (const auto& members : map.members()) {
        const Index m = static_cast<Index>(members.size());
        if (m < 2) {
            total += kHomRatioCap;
            continue;
        }
        Matrix block(y.rows(), m);
        for (Index j = 0; j < m; ++j) block.col(j) = y.col(members[static_cast<std::size_t>(j)]);
        // Squared singular values from the smaller Gram matrix.
        const Matrix gram = m <= y.rows() ? Matrix(block.transpose() * block) : Matrix(block * block.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
        const Vector& ev = eig.eigenvalues();  // ascending
        const double s1 = std::sqrt(std::max(ev(ev.size() - 1), 0.0));
        const double s2 = std::sqrt(std::max(ev(ev.size() - 2), 0.0));
        if (s1 == 0.0) {
            total += kHomRatioCap;
            continue;
        }
        total += std::min(s1 / std::max(s2, 1e-6 * s1), kHomRatioCap);
    }
    return total / static_cast<double>(map.count());
}

struct SuperpixelSearch {
    Index k_min = 0;  // bounds on the superpixel count; order does not matter
    Index k_max = 0;
    double eps = 0.1;
    int grid_size = 12;
    // Among candidates within (1 - eps) of the best Hom, take the smallest
    // count (largest superpixels) unless this is set.
    bool prefer_more_superpixels = false;
    SlicOptions slic;
};

struct HomogeneityCandidate {
    Index requested = 0;  // count handed to SLIC
    Index count = 0;      // count after connectivity enforcement
    double hom = 0.0;
};

struct HomogeneityProfile {
    std::vector<HomogeneityCandidate> candidates;
};

struct SuperpixelSelection {
    Index requested = 0;
    SuperpixelMap map;
    HomogeneityProfile profile;
};

// Logarithmically spaced integer counts in [lo, hi], deduplicated.
inline std::vector<Index> superpixel_count_grid(Index a, Index b, int size) {
    const Index lo = std::min(a, b), hi = std::max(a, b);
    if (lo < 1) throw InvalidArgument("superpixel_count_grid: bounds must be >= 1");
    if (size < 1) throw InvalidArgument("superpixel_count_grid: empty grid");
    std::vector<Index> grid;
    for (int i = 0; i < size; ++i) {
        const double t = size == 1 ? 0.0 : static_cast<double>(i) / (size - 1);
        const double v = std::exp(std::log(static_cast<double>(lo)) * (1.0 - t) + std::log(static_cast<double>(hi)) * t);
        grid.push_back(std::clamp<Index>(static_cast<Index>(std::llround(v)), lo, hi));
    }
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

/// Evaluates Hom on a log grid of superpixel counts and keeps the candidate
/// of largest average size whose Hom is within (1 - eps) of the best.
inline SuperpixelSelection select_num_superpixels(const SpectralImage& img, const SuperpixelSearch& search) {
    if (!(search.eps >= 0.0 && search.eps < 1.0))
        throw InvalidArgument("select_num_superpixels: eps must lie in [0, 1)");
    const Index lo = std::max<Index>(1, std::min(search.k_min, search.k_max));
    const Index hi = std::min(img.pixels(), std::max(search.k_min, search.k_max));
    if (hi < lo) throw InvalidArgument("select_num_superpixels: empty candidate grid");
    const auto grid = superpixel_count_grid(lo, hi, search.grid_size);

    SuperpixelSelection out;
    std::vector<SuperpixelMap> maps;
    double best = -std::numeric_limits<double>::infinity();
    for (Index k : grid) {
        SuperpixelMap map = slic_segment(img, k, search.slic);
        const double hom = homogeneity(img, map);
        out.profile.candidates.push_back({k, map.count(), hom});
        maps.push_back(std::move(map));
        best = std::max(best, hom);
    }
    const double threshold = (1.0 - search.eps) * best;
    std::size_t chosen = 0;
    bool found = false;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (out.profile.candidates[i].hom < threshold) continue;
        if (!found || (search.prefer_more_superpixels ? maps[i].count() > maps[chosen].count()
                                                      : maps[i].count() < maps[chosen].count())) {
            chosen = i;
            found = true;
        }
    }
    out.requested = grid[chosen];
    out.map = std::move(maps[chosen]);
    return out;
}

}  // namespace nlunmix

#endif  // NLUNMIX_MULTISCALE_HPP
