#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace nmce {

/// Dense row-major double matrix used for features, weights and covariances.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a value leaves the finite range or a factorization breaks down.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Matrix& m)
{
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(const Matrix& m)
{
    return m.allFinite();
}

inline void require_finite(const Matrix& m, const char* what)
{
    if (!m.allFinite()) {
        throw NumericalError(std::string(what) + ": non-finite entry in " + shape_string(m) + " result");
    }
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or false when a pivot is not positive.
inline bool cholesky_lower(const Matrix& a, Matrix& l)
{
    const Eigen::Index n = a.rows();
    l = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (Eigen::Index k = 0; k < j; ++k) {
            diag -= l(j, k) * l(j, k);
        }
        if (!(diag > 0.0) || !std::isfinite(diag)) {
            return false;
        }
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (Eigen::Index k = 0; k < j; ++k) {
                s -= l(i, k) * l(j, k);
            }
            l(i, j) = s / ljj;
        }
    }
    return true;
}

/// Inverse of an SPD matrix from its lower Cholesky factor.
inline Matrix cholesky_inverse(const Matrix& l)
{
    const Eigen::Index n = l.rows();
    Matrix identity = Matrix::Identity(n, n);
    Matrix y = l.triangularView<Eigen::Lower>().solve(identity);
    return l.transpose().triangularView<Eigen::Upper>().solve(y);
}

struct LogdetResult {
    double value = 0.0;
    Matrix inverse;
    bool jittered = false;
};

inline constexpr double kCholeskyJitter = 1e-10;

/// log det of a symmetric positive definite matrix via Cholesky. One retry with a
/// small diagonal jitter is allowed before giving up.
inline LogdetResult logdet_cholesky(const Matrix& a)
{
    if (a.rows() != a.cols()) {
        throw ShapeError("logdet: matrix is not square (" + shape_string(a) + ")");
    }
    LogdetResult out;
    Matrix l;
    if (!cholesky_lower(a, l)) {
        Matrix shifted = a;
        shifted.diagonal().array() += kCholeskyJitter;
        if (!cholesky_lower(shifted, l)) {
            throw NumericalError("logdet: Cholesky factorization failed on " + shape_string(a) +
                                 " matrix (not positive definite)");
        }
        out.jittered = true;
    }
    out.value = 2.0 * l.diagonal().array().log().sum();
    out.inverse = cholesky_inverse(l);
    out.inverse = 0.5 * (out.inverse + out.inverse.transpose()).eval();
    return out;
}

inline Vector singular_values(const Matrix& m)
{
    if (m.size() == 0) {
        return Vector();
    }
    Eigen::BDCSVD<Matrix> svd(m);
    return svd.singularValues();
}

} // namespace nmce
