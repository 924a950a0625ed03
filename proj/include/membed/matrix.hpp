#pragma once

#include <cstddef>
#include <vector>

namespace membed {

// Dense row-major matrix of doubles. Sized for desk-scale workloads:
// plain loops, no BLAS, no expression templates.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// C = A * B. Shapes (m,k)·(k,n) -> (m,n). Throws DimensionError on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A^T * B. Shapes (k,m)·(k,n) -> (m,n).
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// C = A * B^T. Shapes (m,k)·(n,k) -> (m,n).
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Column sums, returned as a length-cols vector.
std::vector<double> col_sums(const Matrix& a);

// Elementwise product, shapes must match.
Matrix hadamard(const Matrix& a, const Matrix& b);

// True iff every element is finite.
bool all_finite(const Matrix& a);
bool all_finite(const std::vector<double>& v);

}  // namespace membed
