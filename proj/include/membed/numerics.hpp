#pragma once

#include <functional>
#include <vector>

#include "membed/matrix.hpp"

namespace membed {

// Row-wise L2 normalization. Returns the unit-norm matrix and writes each
// row's original norm into `norms` (sized rows()). A row with norm < eps is
// an error: the caller is expected to keep degenerate vectors out of the
// pipeline rather than have them silently rescaled.
Matrix l2_normalize_rows(const Matrix& a, std::vector<double>& norms,
                         double eps = 1e-12);
Matrix l2_normalize_rows(const Matrix& a, double eps = 1e-12);

// Backward of row normalization: given upstream gradient w.r.t. the unit
// rows, the original norms, and the unit rows themselves, returns the
// gradient w.r.t. the raw rows. Projects out the radial component.
Matrix l2_normalize_rows_backward(const Matrix& grad_unit, const Matrix& unit,
                                  const std::vector<double>& norms);

// Mean softmax cross-entropy over rows of logits against integer labels.
// Probabilities use the max-shifted exponential for stability. If grad is
// non-null it receives d(mean loss)/d(logits), shape of `logits`.
double softmax_xent(const Matrix& logits, const std::vector<int>& labels,
                    Matrix* grad = nullptr);

// Central-difference gradient of a scalar function at x, one coordinate at
// a time. Used as the independent oracle for analytic gradients.
std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5);

// True iff |a - b| <= rel_tol * max(|a|, |b|) + abs_tol. The comparison
// used for all analytic-vs-numeric gradient checks.
bool close(double a, double b, double rel_tol = 1e-5, double abs_tol = 1e-10);

}  // namespace membed
