#pragma once

// Coding-rate objectives over unit-sphere features.
//
//   R(Z)        = 1/2 logdet(I + d/eps^2 * (1/m) ZᵀZ)
//   R_c(Z, Γ)   = sum_j (m_j/m) * 1/2 logdet(I + d/(eps^2 m_j) * Zᵀ diag(Γ_j) Z)
//   ΔR          = R - R_c
//   D(Z, Z')    = mean_i (1 - cos(z_i, z'_i))
//   TCR         = -R([Z; Z']) + λ D
//   NMCE        = R_c(Z̄, Γ̄) - R(Z̄) + λ D,   Z̄ = normalize((Z + Z') / 2)

#include "nmce/autodiff.hpp"
#include "nmce/linalg.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nmce {

struct CodingRateParams {
    double epsilon = 0.01;
    Eigen::Index d_emb = 1;

    CodingRateParams() = default;
    CodingRateParams(double eps, Eigen::Index dim) : epsilon(eps), d_emb(dim) { validate(); }

    void validate() const
    {
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
            throw std::invalid_argument("coding rate: epsilon must be positive");
        }
        if (d_emb < 1) {
            throw std::invalid_argument("coding rate: d_emb must be at least 1");
        }
    }

    /// The d/eps^2 prefactor.
    double scale() const { return static_cast<double>(d_emb) / (epsilon * epsilon); }
};

inline constexpr double kUnitRowTolerance = 1e-6;
inline constexpr double kAssignmentRowTolerance = 1e-6;
inline constexpr double kEmptyClusterMass = 1e-8;

/// m×d features whose rows lie on the unit sphere.
class FeatureBatch {
public:
    explicit FeatureBatch(Matrix z) : z_(std::move(z))
    {
        require_finite(z_, "FeatureBatch");
        for (Eigen::Index i = 0; i < z_.rows(); ++i) {
            const double n = z_.row(i).norm();
            if (std::abs(n - 1.0) > kUnitRowTolerance) {
                throw std::invalid_argument("FeatureBatch: row " + std::to_string(i) + " has norm " +
                                            std::to_string(n) + ", expected 1");
            }
        }
    }

    const Matrix& matrix() const { return z_; }
    Eigen::Index rows() const { return z_.rows(); }
    Eigen::Index dim() const { return z_.cols(); }

private:
    Matrix z_;
};

/// m×n nonnegative cluster probabilities, rows summing to one.
class SoftAssignment {
public:
    explicit SoftAssignment(Matrix gamma) : gamma_(std::move(gamma))
    {
        require_finite(gamma_, "SoftAssignment");
        if (gamma_.cols() < 1) {
            throw std::invalid_argument("SoftAssignment: needs at least one cluster");
        }
        if ((gamma_.array() < 0.0).any()) {
            throw std::invalid_argument("SoftAssignment: negative probability");
        }
        for (Eigen::Index i = 0; i < gamma_.rows(); ++i) {
            const double s = gamma_.row(i).sum();
            if (std::abs(s - 1.0) > kAssignmentRowTolerance) {
                throw std::invalid_argument("SoftAssignment: row " + std::to_string(i) + " sums to " +
                                            std::to_string(s));
            }
        }
    }

    const Matrix& matrix() const { return gamma_; }
    Eigen::Index rows() const { return gamma_.rows(); }
    Eigen::Index clusters() const { return gamma_.cols(); }

private:
    Matrix gamma_;
};

namespace detail {

inline void check_dim(const ad::Var& z, const CodingRateParams& p, const char* what)
{
    p.validate();
    if (z.cols() != p.d_emb) {
        throw ShapeError(std::string(what) + ": features have " + std::to_string(z.cols()) +
                         " columns but d_emb is " + std::to_string(p.d_emb));
    }
    if (z.rows() < 1) {
        throw ShapeError(std::string(what) + ": empty batch");
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Differentiable forms

inline ad::Var coding_rate(const ad::Var& z, const CodingRateParams& p)
{
    detail::check_dim(z, p, "coding_rate");
    return ad::scale(ad::logdet_spd(ad::identity_plus(ad::second_moment(z), p.scale())), 0.5);
}

inline ad::Var per_cluster_rate(const ad::Var& z, const ad::Var& gamma, const CodingRateParams& p)
{
    detail::check_dim(z, p, "per_cluster_rate");
    if (gamma.rows() != z.rows()) {
        throw ShapeError("per_cluster_rate: " + std::to_string(gamma.rows()) + " assignment rows for " +
                         std::to_string(z.rows()) + " features");
    }
    ad::Tape& tape = z.tape();
    const double m = static_cast<double>(z.rows());
    ad::Var total;
    for (Eigen::Index j = 0; j < gamma.cols(); ++j) {
        if (gamma.value().col(j).sum() < kEmptyClusterMass) {
            continue;
        }
        ad::Var weights = ad::column(gamma, j);
        ad::Var mass = ad::sum(weights);
        ad::Var cov = ad::scalar_mul(ad::weighted_gram(z, weights), ad::reciprocal(mass));
        ad::Var rate = ad::scale(ad::logdet_spd(ad::identity_plus(cov, p.scale())), 0.5);
        ad::Var term = ad::scale(ad::scalar_mul(rate, mass), 1.0 / m);
        total = total.valid() ? ad::add(total, term) : term;
    }
    if (!total.valid()) {
        total = tape.constant(Matrix::Zero(1, 1));
    }
    return total;
}

inline ad::Var rate_reduction(const ad::Var& z, const ad::Var& gamma, const CodingRateParams& p)
{
    return ad::sub(coding_rate(z, p), per_cluster_rate(z, gamma, p));
}

/// Mean of 1 - cos over aligned rows. Zero iff every pair points the same way.
inline ad::Var constraint_d(const ad::Var& z, const ad::Var& z_prime)
{
    require_same_shape(z.value(), z_prime.value(), "constraint_d");
    ad::Var cosines = ad::row_dot(ad::row_normalize(z), ad::row_normalize(z_prime));
    return ad::add_constant(ad::scale(ad::mean(cosines), -1.0), 1.0);
}

/// A loss together with the values of its components.
struct LossTerms {
    ad::Var loss;
    double total_rate = 0.0;
    double cluster_rate = 0.0;
    double constraint = 0.0;
};

/// -R over both views stacked (2m rows) plus λ·D.
inline LossTerms tcr_loss(const ad::Var& z, const ad::Var& z_prime, const CodingRateParams& p, double lambda)
{
    if (!(lambda >= 0.0)) {
        throw std::invalid_argument("tcr_loss: lambda must be non-negative");
    }
    ad::Var rate = coding_rate(ad::vstack(z, z_prime), p);
    ad::Var d = constraint_d(z, z_prime);
    LossTerms out;
    out.loss = ad::add(ad::scale(rate, -1.0), ad::scale(d, lambda));
    out.total_rate = rate.scalar();
    out.constraint = d.scalar();
    return out;
}

/// Row-normalized mean of two views.
inline ad::Var average_features(const ad::Var& z, const ad::Var& z_prime)
{
    return ad::row_normalize(ad::scale(ad::add(z, z_prime), 0.5));
}

/// R_c - R on the view-averaged features plus λ·D between the views.
/// `gamma_avg` is the view-averaged soft assignment.
inline LossTerms nmce_loss(const ad::Var& z, const ad::Var& z_prime, const ad::Var& gamma_avg,
                           const CodingRateParams& p, double lambda)
{
    if (!(lambda >= 0.0)) {
        throw std::invalid_argument("nmce_loss: lambda must be non-negative");
    }
    ad::Var z_avg = average_features(z, z_prime);
    ad::Var rate = coding_rate(z_avg, p);
    ad::Var cluster = per_cluster_rate(z_avg, gamma_avg, p);
    ad::Var d = constraint_d(z, z_prime);
    LossTerms out;
    out.loss = ad::add(ad::sub(cluster, rate), ad::scale(d, lambda));
    out.total_rate = rate.scalar();
    out.cluster_rate = cluster.scalar();
    out.constraint = d.scalar();
    return out;
}

// ---------------------------------------------------------------------------
// Value forms

inline double coding_rate(const FeatureBatch& z, const CodingRateParams& p)
{
    ad::Tape tape;
    return coding_rate(tape.constant(z.matrix()), p).scalar();
}

inline double per_cluster_rate(const FeatureBatch& z, const SoftAssignment& gamma, const CodingRateParams& p)
{
    ad::Tape tape;
    return per_cluster_rate(tape.constant(z.matrix()), tape.constant(gamma.matrix()), p).scalar();
}

inline double rate_reduction(const FeatureBatch& z, const SoftAssignment& gamma, const CodingRateParams& p)
{
    ad::Tape tape;
    return rate_reduction(tape.constant(z.matrix()), tape.constant(gamma.matrix()), p).scalar();
}

inline double constraint_d(const FeatureBatch& z, const FeatureBatch& z_prime)
{
    ad::Tape tape;
    return constraint_d(tape.constant(z.matrix()), tape.constant(z_prime.matrix())).scalar();
}

inline double tcr_loss(const FeatureBatch& z, const FeatureBatch& z_prime, const CodingRateParams& p, double lambda)
{
    ad::Tape tape;
    return tcr_loss(tape.constant(z.matrix()), tape.constant(z_prime.matrix()), p, lambda).loss.scalar();
}

inline double nmce_loss(const FeatureBatch& z, const FeatureBatch& z_prime, const SoftAssignment& gamma_avg,
                        const CodingRateParams& p, double lambda)
{
    ad::Tape tape;
    return nmce_loss(tape.constant(z.matrix()), tape.constant(z_prime.matrix()), tape.constant(gamma_avg.matrix()),
                     p, lambda)
        .loss.scalar();
}

struct IdentityCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double abs_diff = 0.0;
};

/// logdet(I + ZᵀZ) by Cholesky against sum_i log(1 + sigma_i^2) by SVD.
inline IdentityCheck singular_value_identity_check(const Matrix& z)
{
    Matrix gram = Matrix::Identity(z.cols(), z.cols());
    gram.noalias() += z.transpose() * z;
    IdentityCheck out;
    out.lhs = logdet_cholesky(gram).value;
    const Vector sigma = singular_values(z);
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        out.rhs += std::log1p(sigma(i) * sigma(i));
    }
    out.abs_diff = std::abs(out.lhs - out.rhs);
    return out;
}

} // namespace nmce
