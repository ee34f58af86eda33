#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "gml/common.hpp"

namespace gml {

/// Dense row-major matrix of 64-bit floats. The only tensor type in the
/// library; vectors are 1xN or Nx1 matrices.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, double fill)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
        Matrix m(static_cast<int>(rows_init.size()),
                 rows_init.size() ? static_cast<int>(rows_init.begin()->size()) : 0);
        int i = 0;
        for (const auto& r : rows_init) {
            if (static_cast<int>(r.size()) != m.cols)
                throw DimensionError("from_rows: ragged initializer");
            int j = 0;
            for (double v : r) m.at(i, j++) = v;
            ++i;
        }
        return m;
    }

    int size() const { return rows * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
    double* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool bit_equal(const Matrix& o) const {
        return same_shape(o) &&
               std::memcmp(data.data(), o.data.data(), data.size() * sizeof(double)) == 0;
    }
};

inline bool all_finite(const Matrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline void require_shape(const Matrix& a, const Matrix& b, const char* where) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(where) + ": shape mismatch " +
                             std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                             std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

// out = a*b, or out += a*b when accumulate. Skips zero multipliers, which
// pays off on mostly-zero adjacency operands.
inline void matmul_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false) {
    if (a.cols != b.rows)
        throw DimensionError("matmul: inner dims " + std::to_string(a.cols) + " vs " +
                             std::to_string(b.rows));
    if (out.rows != a.rows || out.cols != b.cols) out = Matrix(a.rows, b.cols);
    else if (!accumulate) out.fill(0.0);
    for (int i = 0; i < a.rows; ++i) {
        double* o = out.row(i);
        const double* ar = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) o[j] += av * br[j];
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_into(out, a, b);
    return out;
}

// out (+)= a * b^T
inline void matmul_nt_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false) {
    if (a.cols != b.cols) throw DimensionError("matmul_nt: inner dims");
    if (out.rows != a.rows || out.cols != b.rows) out = Matrix(a.rows, b.rows);
    else if (!accumulate) out.fill(0.0);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* o = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            o[j] += s;
        }
    }
}

// out (+)= a^T * b
inline void matmul_tn_into(Matrix& out, const Matrix& a, const Matrix& b, bool accumulate = false) {
    if (a.rows != b.rows) throw DimensionError("matmul_tn: inner dims");
    if (out.rows != a.cols || out.cols != b.cols) out = Matrix(a.cols, b.cols);
    else if (!accumulate) out.fill(0.0);
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* o = out.row(i);
            for (int j = 0; j < b.cols; ++j) o[j] += av * br[j];
        }
    }
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline double dot_flat(const Matrix& a, const Matrix& b) {
    require_shape(a, b, "dot_flat");
    double s = 0.0;
    for (int i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double squared_norm(const Matrix& a) { return dot_flat(a, a); }

inline double frobenius_norm(const Matrix& a) { return std::sqrt(squared_norm(a)); }

inline bool is_symmetric(const Matrix& a, double tol = 0.0) {
    if (a.rows != a.cols) return false;
    for (int i = 0; i < a.rows; ++i)
        for (int j = i + 1; j < a.cols; ++j)
            if (std::abs(a.at(i, j) - a.at(j, i)) > tol) return false;
    return true;
}

} // namespace gml
