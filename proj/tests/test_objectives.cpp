#include "nmce/adam.hpp"
#include "nmce/gradcheck.hpp"
#include "nmce/objectives.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace nmce;
using ad::Tape;
using ad::Var;

namespace {

Matrix one_hot(const std::vector<int>& labels, int n)
{
    Matrix g = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), n);
    for (std::size_t i = 0; i < labels.size(); ++i) g(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    return g;
}

Matrix random_assignment(Eigen::Index m, Eigen::Index n, Rng& rng)
{
    Matrix g = oracle::random_matrix(m, n, rng).array().exp();
    for (Eigen::Index i = 0; i < m; ++i) g.row(i) /= g.row(i).sum();
    return g;
}

std::vector<int> random_labels(std::size_t m, int n, Rng& rng)
{
    std::uniform_int_distribution<int> pick(0, n - 1);
    std::vector<int> out(m);
    for (int& v : out) v = pick(rng);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Domain types

TEST(Types, FeatureBatchRequiresUnitRows)
{
    EXPECT_THROW(FeatureBatch(Matrix::Ones(2, 2)), std::invalid_argument);
    EXPECT_NO_THROW(FeatureBatch(Matrix::Identity(3, 3)));
}

TEST(Types, SoftAssignmentValidatesRows)
{
    EXPECT_THROW(SoftAssignment(Matrix::Ones(2, 2)), std::invalid_argument);
    Matrix neg(1, 2);
    neg << 1.5, -0.5;
    EXPECT_THROW(SoftAssignment{neg}, std::invalid_argument);
    EXPECT_NO_THROW(SoftAssignment(Matrix::Constant(4, 2, 0.5)));
}

TEST(Types, CodingRateParamsValidated)
{
    EXPECT_THROW(CodingRateParams(0.0, 3), std::invalid_argument);
    EXPECT_THROW(CodingRateParams(0.1, 0), std::invalid_argument);
    EXPECT_DOUBLE_EQ(CodingRateParams(0.5, 3).scale(), 12.0);
}

// ---------------------------------------------------------------------------
// coding_rate

TEST(CodingRate, ZeroFeaturesGiveZero)
{
    Tape t;
    EXPECT_DOUBLE_EQ(coding_rate(t.constant(Matrix::Zero(5, 3)), CodingRateParams(0.1, 3)).scalar(), 0.0);
}

TEST(CodingRate, IdentityClosedForm)
{
    // cov = I/d, so I + (d/1)(I/d) = 2I: (d/2) ln 2
    EXPECT_NEAR(coding_rate(FeatureBatch(Matrix::Identity(2, 2)), CodingRateParams(1.0, 2)), std::numbers::ln2, 1e-15);
    EXPECT_NEAR(coding_rate(FeatureBatch(Matrix::Identity(5, 5)), CodingRateParams(1.0, 5)), 2.5 * std::numbers::ln2,
                1e-14);
}

TEST(CodingRate, MatchesSvdOracle)
{
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index m = 3 + trial, d = 1 + trial % 6;
        const Matrix z = oracle::random_unit_rows(m, d, rng);
        const double eps = trial % 2 ? 0.01 : 0.5;
        EXPECT_NEAR(coding_rate(FeatureBatch(z), CodingRateParams(eps, d)), oracle::coding_rate_svd(z, eps), 1e-8);
    }
}

TEST(CodingRate, RotationInvariant)
{
    Rng rng(2);
    const Matrix z = oracle::random_unit_rows(20, 5, rng);
    const Matrix q = oracle::random_orthogonal(5, rng);
    const CodingRateParams p(0.1, 5);
    EXPECT_NEAR(coding_rate(FeatureBatch(z), p), coding_rate(FeatureBatch(z * q), p), 1e-8);
}

// ---------------------------------------------------------------------------
// per_cluster_rate / rate_reduction

TEST(PerClusterRate, SingleClusterEqualsCodingRate)
{
    Rng rng(3);
    const Matrix z = oracle::random_unit_rows(12, 4, rng);
    const CodingRateParams p(0.2, 4);
    EXPECT_NEAR(per_cluster_rate(FeatureBatch(z), SoftAssignment(Matrix::Ones(12, 1)), p),
                coding_rate(FeatureBatch(z), p), 1e-12);
}

TEST(PerClusterRate, HardAssignmentMatchesPerClusterOracle)
{
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix z = oracle::random_unit_rows(15, 4, rng);
        const auto labels = random_labels(15, 3, rng);
        const double eps = 0.05 + 0.1 * trial;
        EXPECT_NEAR(per_cluster_rate(FeatureBatch(z), SoftAssignment(one_hot(labels, 3)), CodingRateParams(eps, 4)),
                    oracle::hard_cluster_rate(z, labels, eps), 1e-10);
    }
}

TEST(PerClusterRate, EmptyColumnIsIgnored)
{
    Rng rng(5);
    const Matrix z = oracle::random_unit_rows(10, 3, rng);
    const Matrix g = random_assignment(10, 2, rng);
    Matrix padded = Matrix::Zero(10, 3);
    padded.col(0) = g.col(0);
    padded.col(2) = g.col(1);
    const CodingRateParams p(0.3, 3);
    EXPECT_NEAR(per_cluster_rate(FeatureBatch(z), SoftAssignment(g), p),
                per_cluster_rate(FeatureBatch(z), SoftAssignment(padded), p), 1e-14);
}

TEST(PerClusterRate, UniformSoftAssignmentEqualsCodingRate)
{
    Rng rng(6);
    const Matrix z = oracle::random_unit_rows(16, 4, rng);
    const CodingRateParams p(0.1, 4);
    for (int n : {2, 3, 5}) {
        EXPECT_NEAR(per_cluster_rate(FeatureBatch(z), SoftAssignment(Matrix::Constant(16, n, 1.0 / n)), p),
                    coding_rate(FeatureBatch(z), p), 1e-8);
    }
}

TEST(RateReduction, SingleClusterIsZero)
{
    Rng rng(7);
    const Matrix z = oracle::random_unit_rows(8, 3, rng);
    EXPECT_EQ(rate_reduction(FeatureBatch(z), SoftAssignment(Matrix::Ones(8, 1)), CodingRateParams(0.1, 3)), 0.0);
}

TEST(RateReduction, OrthogonalRankOneClustersPositive)
{
    Matrix z = Matrix::Zero(6, 3);
    z.topRows(3).col(0).setOnes();
    z.bottomRows(3).col(1).setOnes();
    const double dr = rate_reduction(FeatureBatch(z), SoftAssignment(one_hot({0, 0, 0, 1, 1, 1}, 2)),
                                     CodingRateParams(0.5, 3));
    EXPECT_GT(dr, 0.1);
}

TEST(RateReduction, NonNegativeForHardAssignments)
{
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        std::uniform_int_distribution<int> mdist(2, 32), ndist(1, 4), ddist(1, 6);
        const Eigen::Index m = mdist(rng), d = ddist(rng);
        const int n = ndist(rng);
        const Matrix z = oracle::random_unit_rows(m, d, rng);
        const auto labels = random_labels(static_cast<std::size_t>(m), n, rng);
        EXPECT_GE(rate_reduction(FeatureBatch(z), SoftAssignment(one_hot(labels, n)), CodingRateParams(0.3, d)), -1e-10);
    }
}

// ---------------------------------------------------------------------------
// constraint_d

TEST(ConstraintD, ClosedFormCases)
{
    Rng rng(9);
    const Matrix z = oracle::random_unit_rows(10, 4, rng);
    EXPECT_NEAR(constraint_d(FeatureBatch(z), FeatureBatch(z)), 0.0, 1e-15);
    EXPECT_NEAR(constraint_d(FeatureBatch(z), FeatureBatch(-z)), 2.0, 1e-15);
    Matrix a = Matrix::Zero(2, 2), b = Matrix::Zero(2, 2);
    a << 1, 0, 0, 1;
    b << 0, 1, -1, 0;
    EXPECT_NEAR(constraint_d(FeatureBatch(a), FeatureBatch(b)), 1.0, 1e-15);
}

TEST(ConstraintD, RotationInvariant)
{
    Rng rng(10);
    const Matrix z = oracle::random_unit_rows(10, 4, rng);
    const Matrix z2 = oracle::random_unit_rows(10, 4, rng);
    const Matrix q = oracle::random_orthogonal(4, rng);
    EXPECT_NEAR(constraint_d(FeatureBatch(z), FeatureBatch(z2)), constraint_d(FeatureBatch(z * q), FeatureBatch(z2 * q)),
                1e-12);
}

TEST(ConstraintD, ShapeMismatchRejected)
{
    EXPECT_THROW(constraint_d(FeatureBatch(Matrix::Identity(3, 3)), FeatureBatch(Matrix::Identity(2, 2))), ShapeError);
}

// ---------------------------------------------------------------------------
// TCR and NMCE

TEST(TcrLoss, ZeroLambdaIsMinusRate)
{
    Rng rng(10);
    const Matrix a = oracle::random_unit_rows(5, 2, rng);
    const Matrix b = oracle::random_unit_rows(5, 2, rng);
    Matrix both(10, 2);
    both << a, b;
    Tape t;
    const double loss = tcr_loss(t.constant(a), t.constant(b), CodingRateParams(0.1, 2), 0.0).loss.scalar();
    EXPECT_NEAR(loss, -oracle::coding_rate_svd(both, 0.1), 1e-12);
}

TEST(TcrLoss, AlignedViewsGiveMinusRateOfBothViews)
{
    Rng rng(11);
    const Matrix z = oracle::random_unit_rows(9, 3, rng);
    Matrix both(18, 3);
    both << z, z;
    const CodingRateParams p(0.2, 3);
    EXPECT_NEAR(tcr_loss(FeatureBatch(z), FeatureBatch(z), p, 50.0), -oracle::coding_rate_svd(both, 0.2), 1e-10);
}

TEST(TcrLoss, DecreasesWhileTrainingLinearEncoder)
{
    Rng rng(12);
    const Matrix x = oracle::random_matrix(64, 6, rng);
    std::vector<Matrix> w{oracle::random_matrix(6, 4, rng, 0.3)};
    const CodingRateParams p(0.5, 4);
    AdamState adam;
    std::vector<double> history;
    for (int step = 0; step < 100; ++step) {
        const Matrix v1 = x + 0.05 * oracle::random_matrix(64, 6, rng);
        const Matrix v2 = x + 0.05 * oracle::random_matrix(64, 6, rng);
        Tape t;
        Var wv = t.variable(w[0]);
        Var z1 = ad::row_normalize(ad::matmul(t.constant(v1), wv));
        Var z2 = ad::row_normalize(ad::matmul(t.constant(v2), wv));
        LossTerms terms = tcr_loss(z1, z2, p, 10.0);
        t.backward(terms.loss);
        history.push_back(terms.loss.scalar());
        adam_step(w, std::vector<Matrix>{wv.grad()}, adam, 0.01, 0.0);
    }
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += history[static_cast<std::size_t>(i)];
        tail += history[history.size() - 1 - static_cast<std::size_t>(i)];
    }
    EXPECT_LT(tail, head);
}

TEST(NmceLoss, SingleClusterNoConstraintIsZero)
{
    Rng rng(13);
    const Matrix z = oracle::random_unit_rows(7, 3, rng);
    EXPECT_NEAR(nmce_loss(FeatureBatch(z), FeatureBatch(z), SoftAssignment(Matrix::Ones(7, 1)), CodingRateParams(0.1, 3),
                          0.0),
                0.0, 1e-12);
}

TEST(NmceLoss, EqualsMinusRateReductionOfAverageplusConstraint)
{
    Rng rng(14);
    const Matrix z = oracle::random_unit_rows(10, 4, rng);
    Matrix z2 = z + 0.2 * oracle::random_matrix(10, 4, rng);
    for (Eigen::Index i = 0; i < 10; ++i) z2.row(i).normalize();
    Matrix avg = 0.5 * (z + z2);
    for (Eigen::Index i = 0; i < 10; ++i) avg.row(i).normalize();
    const Matrix g = random_assignment(10, 3, rng);
    const CodingRateParams p(0.3, 4);
    const double lambda = 7.0;
    const double expected = -rate_reduction(FeatureBatch(avg), SoftAssignment(g), p) +
                            lambda * constraint_d(FeatureBatch(z), FeatureBatch(z2));
    EXPECT_NEAR(nmce_loss(FeatureBatch(z), FeatureBatch(z2), SoftAssignment(g), p, lambda), expected, 1e-12);
}

// ---------------------------------------------------------------------------
// Gradients (16×4 batches)

class LossGradients : public ::testing::TestWithParam<double> {
protected:
    double check(const LossBuilder& fn, const std::vector<Matrix>& params)
    {
        GradCheckOptions opts;
        opts.max_coordinates = 1000;
        return finite_diff_check(fn, params, opts).max_rel_error;
    }
    Rng rng{15};
    Matrix z = oracle::random_matrix(16, 4, rng);
    Matrix z2 = z + 0.3 * oracle::random_matrix(16, 4, rng);
    Matrix logits = oracle::random_matrix(16, 3, rng);
};

TEST_P(LossGradients, AllObjectives)
{
    const CodingRateParams p(GetParam(), 4);
    using ad::row_normalize;
    using ad::softmax_rows;
    EXPECT_LT(check([&](Tape&, std::span<const Var> v) { return coding_rate(row_normalize(v[0]), p); }, {z}), 1e-4);
    EXPECT_LT(check([&](Tape&, std::span<const Var> v) { return per_cluster_rate(row_normalize(v[0]), softmax_rows(v[1]), p); },
                    {z, logits}),
              1e-4);
    EXPECT_LT(check([&](Tape&, std::span<const Var> v) { return rate_reduction(row_normalize(v[0]), softmax_rows(v[1]), p); },
                    {z, logits}),
              1e-4);
    EXPECT_LT(check([&](Tape&, std::span<const Var> v) { return constraint_d(row_normalize(v[0]), row_normalize(v[1])); },
                    {z, z2}),
              1e-4);
    EXPECT_LT(check([&](Tape&, std::span<const Var> v) { return tcr_loss(row_normalize(v[0]), row_normalize(v[1]), p, 3.0).loss; },
                    {z, z2}),
              1e-4);
    EXPECT_LT(check(
                  [&](Tape&, std::span<const Var> v) {
                      return nmce_loss(row_normalize(v[0]), row_normalize(v[1]), softmax_rows(v[2]), p, 3.0).loss;
                  },
                  {z, z2, logits}),
              1e-4);
}

INSTANTIATE_TEST_SUITE_P(Epsilons, LossGradients, ::testing::Values(0.01, 0.1, 0.5));

// ---------------------------------------------------------------------------
// logdet(I + ZᵀZ) = sum log(1 + sigma_i^2)

TEST(SingularValueIdentity, ClosedFormCases)
{
    const IdentityCheck zero = singular_value_identity_check(Matrix::Zero(4, 3));
    EXPECT_EQ(zero.lhs, 0.0);
    EXPECT_EQ(zero.rhs, 0.0);
    const IdentityCheck eye = singular_value_identity_check(Matrix::Identity(3, 3));
    EXPECT_NEAR(eye.lhs, std::log(8.0), 1e-14);
    EXPECT_NEAR(eye.rhs, std::log(8.0), 1e-14);
}

TEST(SingularValueIdentity, RandomMatrices)
{
    Rng rng(16);
    std::uniform_int_distribution<Eigen::Index> rows(1, 32), cols(1, 16);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix z = oracle::random_matrix(rows(rng), cols(rng), rng);
        const IdentityCheck c = singular_value_identity_check(z);
        EXPECT_LE(c.abs_diff, 1e-8);
        Matrix gram = Matrix::Identity(z.cols(), z.cols()) + z.transpose() * z;
        EXPECT_NEAR(c.lhs, oracle::logdet_eigen(gram), 1e-8);
    }
}
