#include "membed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "membed/errors.hpp"

namespace membed {

Matrix l2_normalize_rows(const Matrix& a, std::vector<double>& norms, double eps) {
    Matrix out(a.rows(), a.cols());
    norms.resize(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* src = a.row(i);
        double sq = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) sq += src[j] * src[j];
        const double norm = std::sqrt(sq);
        if (!(norm >= eps)) {
            throw DegenerateRowError(
                "l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                    std::to_string(norm) + " below threshold",
                static_cast<int>(i));
        }
        norms[i] = norm;
        double* dst = out.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) dst[j] = src[j] / norm;
    }
    return out;
}

Matrix l2_normalize_rows(const Matrix& a, double eps) {
    std::vector<double> norms;
    return l2_normalize_rows(a, norms, eps);
}

Matrix l2_normalize_rows_backward(const Matrix& grad_unit, const Matrix& unit,
                                  const std::vector<double>& norms) {
    if (grad_unit.rows() != unit.rows() || grad_unit.cols() != unit.cols() ||
        norms.size() != unit.rows()) {
        throw DimensionError("l2_normalize_rows_backward: mismatched shapes");
    }
    Matrix out(unit.rows(), unit.cols());
    for (std::size_t i = 0; i < unit.rows(); ++i) {
        const double* g = grad_unit.row(i);
        const double* u = unit.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < unit.cols(); ++j) dot += g[j] * u[j];
        double* dst = out.row(i);
        for (std::size_t j = 0; j < unit.cols(); ++j)
            dst[j] = (g[j] - dot * u[j]) / norms[i];
    }
    return out;
}

double softmax_xent(const Matrix& logits, const std::vector<int>& labels,
                    Matrix* grad) {
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    if (labels.size() != n)
        throw DimensionError("softmax_xent: labels size does not match rows");
    if (grad) *grad = Matrix(n, c);

    double total = 0.0;
    std::vector<double> probs(c);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw ValueError("softmax_xent: label " + std::to_string(y) +
                             " out of range for " + std::to_string(c) + " classes");
        const double* z = logits.row(i);
        const double zmax = *std::max_element(z, z + c);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[j] = std::exp(z[j] - zmax);
            denom += probs[j];
        }
        total += -(z[y] - zmax - std::log(denom));
        if (grad) {
            double* g = grad->row(i);
            for (std::size_t j = 0; j < c; ++j) g[j] = probs[j] / denom / double(n);
            g[y] -= 1.0 / double(n);
        }
    }
    const double loss = total / double(n);
    if (!std::isfinite(loss)) throw NonFiniteError("softmax_xent: non-finite loss");
    return loss;
}

std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

bool close(double a, double b, double rel_tol, double abs_tol) {
    return std::abs(a - b) <= rel_tol * std::max(std::abs(a), std::abs(b)) + abs_tol;
}

}  // namespace membed
