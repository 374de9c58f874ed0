#ifndef NLUNMIX_IMAGE_IO_HPP
#define NLUNMIX_IMAGE_IO_HPP

// Binary cube format (all integers little-endian):
//   bytes 0-7   magic "NLUXCUBE"
//   bytes 8-11  uint32 band count
//   bytes 12-15 uint32 width
//   bytes 16-19 uint32 height
//   then band count * width * height float32 values, band-interleaved-by-pixel
//   (all bands of pixel 0, then pixel 1, ...), pixels in row-major order.
// Images, abundance maps (bands = P) and label maps (bands = 1) share it.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "data_model.hpp"

namespace nlunmix {

inline constexpr char kCubeMagic[8] = {'N', 'L', 'U', 'X', 'C', 'U', 'B', 'E'};

// Raw cube as stored on disk; data is bands x (width * height).
struct Cube {
    Index width = 0;
    Index height = 0;
    Matrix data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_cube(const std::string& path, const Cube& cube) {
    if (cube.data.cols() != cube.width * cube.height)
        throw DimensionMismatch("save_cube: data columns do not match width * height");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_cube: cannot open " + path);
    os.write(kCubeMagic, sizeof kCubeMagic);
    detail::put_u32(os, static_cast<std::uint32_t>(cube.data.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(cube.width));
    detail::put_u32(os, static_cast<std::uint32_t>(cube.height));
    for (Index n = 0; n < cube.data.cols(); ++n)
        for (Index l = 0; l < cube.data.rows(); ++l)
            detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(cube.data(l, n))));
    if (!os) throw IoError("save_cube: write failed for " + path);
}

inline Cube load_cube(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_cube: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 20 || !std::equal(kCubeMagic, kCubeMagic + 8, bytes.begin()))
        throw IoError("load_cube: bad header in " + path);
    const std::uint64_t bands = detail::get_u32(&bytes[8]);
    const std::uint64_t width = detail::get_u32(&bytes[12]);
    const std::uint64_t height = detail::get_u32(&bytes[16]);
    if (bands == 0 || width == 0 || height == 0) throw IoError("load_cube: zero dimension in " + path);
    const std::uint64_t count = bands * width * height;
    if (bytes.size() - 20 != count * 4)
        throw DimensionMismatch("load_cube: payload holds " + std::to_string((bytes.size() - 20) / 4) +
                                " values, header declares " + std::to_string(count));
    Cube cube{static_cast<Index>(width), static_cast<Index>(height),
              Matrix(static_cast<Index>(bands), static_cast<Index>(width * height))};
    const unsigned char* p = &bytes[20];
    for (Index n = 0; n < cube.data.cols(); ++n)
        for (Index l = 0; l < cube.data.rows(); ++l, p += 4) {
            const float v = std::bit_cast<float>(detail::get_u32(p));
            if (!std::isfinite(v)) throw InvalidArgument("load_cube: non-finite value in " + path);
            cube.data(l, n) = v;
        }
    return cube;
}

inline SpectralImage load_image(const std::string& path) {
    Cube c = load_cube(path);
    return SpectralImage(c.width, c.height, std::move(c.data));
}

inline void save_image(const std::string& path, const SpectralImage& img) {
    save_cube(path, Cube{img.width(), img.height(), img.data()});
}

inline Matrix read_csv_matrix(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("read_csv_matrix: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError("read_csv_matrix: bad number '" + cell + "' in " + path);
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw DimensionMismatch("read_csv_matrix: ragged rows in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty() || rows.front().empty()) throw IoError("read_csv_matrix: empty file " + path);
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
    return m;
}

inline void write_csv_matrix(const std::string& path, const Matrix& m) {
    std::ofstream os(path);
    if (!os) throw IoError("write_csv_matrix: cannot open " + path);
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
        os << '\n';
    }
}

/// Endmembers from a CSV with one row per band and one column per material.
inline EndmemberMatrix load_endmembers(const std::string& path) {
    return EndmemberMatrix(read_csv_matrix(path));
}

inline void save_endmembers(const std::string& path, const EndmemberMatrix& m) {
    write_csv_matrix(path, m.matrix());
}

}  // namespace nlunmix

#endif  // NLUNMIX_IMAGE_IO_HPP
