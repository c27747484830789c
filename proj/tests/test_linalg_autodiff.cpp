#include "nmce/adam.hpp"
#include "nmce/autodiff.hpp"
#include "nmce/gradcheck.hpp"
#include "nmce/linalg.hpp"
#include "nmce/rng.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace nmce;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kGradTol = 1e-4;

double check(const LossBuilder& fn, const std::vector<Matrix>& params)
{
    GradCheckOptions opts;
    opts.max_coordinates = 1000;
    return finite_diff_check(fn, params, opts).max_rel_error;
}

} // namespace

// ---------------------------------------------------------------------------
// Cholesky logdet

TEST(Logdet, MatchesEigenvalueOracle)
{
    Rng rng(1);
    for (int n : {1, 2, 5, 12}) {
        const Matrix a = oracle::random_spd(n, rng);
        const LogdetResult r = logdet_cholesky(a);
        EXPECT_NEAR(r.value, oracle::logdet_eigen(a), 1e-9) << "n=" << n;
        EXPECT_FALSE(r.jittered);
        EXPECT_LT((r.inverse * a - Matrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_EQ(r.inverse, r.inverse.transpose());
    }
}

TEST(Logdet, IdentityIsZero)
{
    EXPECT_DOUBLE_EQ(logdet_cholesky(Matrix::Identity(4, 4)).value, 0.0);
}

TEST(Logdet, IndefiniteMatrixFailsLoudly)
{
    Matrix a = Matrix::Identity(3, 3);
    a(2, 2) = -1.0;
    EXPECT_THROW(logdet_cholesky(a), NumericalError);
}

TEST(Logdet, SingularPsdRetriesWithJitter)
{
    Matrix v(3, 1);
    v << 1.0, 2.0, 3.0;
    const Matrix a = v * v.transpose();
    const LogdetResult r = logdet_cholesky(a);
    EXPECT_TRUE(r.jittered);
    EXPECT_TRUE(std::isfinite(r.value));
}

TEST(Logdet, NonSquareIsShapeError) { EXPECT_THROW(logdet_cholesky(Matrix::Zero(2, 3)), ShapeError); }

TEST(SingularValues, MatchJacobiSvd)
{
    Rng rng(2);
    const Matrix m = oracle::random_matrix(9, 4, rng);
    const Vector s = singular_values(m);
    Eigen::JacobiSVD<Matrix> svd(m);
    EXPECT_LT((s - svd.singularValues()).cwiseAbs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------
// Tape mechanics

TEST(Tape, BackwardRequiresScalar)
{
    Tape t;
    Var a = t.variable(Matrix::Ones(2, 2));
    EXPECT_THROW(t.backward(a), ShapeError);
}

TEST(Tape, ForeignVariableRejected)
{
    Tape t1, t2;
    Var a = t1.variable(Matrix::Ones(1, 1));
    Var b = t2.variable(Matrix::Ones(1, 1));
    EXPECT_THROW(ad::add(a, b), std::invalid_argument);
}

TEST(Tape, NonFiniteValueRejected)
{
    Tape t;
    Var a = t.variable(Matrix::Zero(1, 1));
    EXPECT_THROW(ad::reciprocal(a), NumericalError);
}

TEST(Tape, ConstantsReceiveNoGradientWork)
{
    Tape t;
    Var c = t.constant(Matrix::Ones(2, 2));
    Var x = t.variable(Matrix::Ones(2, 2));
    Var loss = ad::sum(ad::add(c, ad::scale(x, 3.0)));
    t.backward(loss);
    EXPECT_FALSE(t.requires_grad(c.index()));
    EXPECT_TRUE(x.grad().isApproxToConstant(3.0));
    EXPECT_TRUE(c.grad().isZero());
}

TEST(Tape, SharedNodeAccumulates)
{
    Tape t;
    Var x = t.variable(Matrix::Constant(1, 1, 2.0));
    Var y = ad::add(ad::scale(x, 3.0), ad::scalar_mul(x, x)); // 3x + x^2
    t.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 3.0 + 2.0 * 2.0);
}

TEST(Tape, SecondBackwardStartsFromZero)
{
    Tape t;
    Var x = t.variable(Matrix::Constant(1, 1, 2.0));
    Var y = ad::scale(x, 5.0);
    t.backward(y);
    t.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 5.0);
}

// ---------------------------------------------------------------------------
// Per-op gradient checks

class OpGradients : public ::testing::Test {
protected:
    Rng rng{7};
    Matrix a = oracle::random_matrix(5, 3, rng);
    Matrix b = oracle::random_matrix(3, 4, rng);
    Matrix c = oracle::random_matrix(5, 3, rng);
};

TEST_F(OpGradients, Matmul)
{
    EXPECT_LT(check([](Tape&, std::span<const Var> v) { return ad::sum(ad::matmul(v[0], v[1])); }, {a, b}), kGradTol);
    // squared output so the gradient depends on both operands
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      Var p = ad::matmul(v[0], v[1]);
                      return ad::sum(ad::row_dot(p, p));
                  },
                  {a, b}),
              kGradTol);
}

TEST_F(OpGradients, ElementwiseAndShapes)
{
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      Var s = ad::sub(ad::add(v[0], ad::scale(v[1], 2.0)), ad::transpose(ad::transpose(v[0])));
                      return ad::mean(ad::row_dot(s, ad::add_constant(v[1], 0.5)));
                  },
                  {a, c}),
              kGradTol);
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      Var s = ad::vstack(v[0], v[1]);
                      return ad::sum(ad::row_dot(ad::column(s, 1), ad::column(s, 2)));
                  },
                  {a, c}),
              kGradTol);
}

TEST_F(OpGradients, RowBiasScalarAndReciprocal)
{
    Matrix bias = oracle::random_matrix(1, 3, rng);
    Matrix s = Matrix::Constant(1, 1, 1.7);
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      Var h = ad::add_row_bias(v[0], v[1]);
                      Var q = ad::scalar_mul(ad::row_dot(h, h), ad::reciprocal(v[2]));
                      return ad::sum(q);
                  },
                  {a, bias, s}),
              kGradTol);
}

TEST_F(OpGradients, Activations)
{
    // keep away from the kink for relu-like activations
    Matrix x = a;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (std::abs(x.data()[i]) < 0.05) x.data()[i] += 0.2;
    }
    for (const ad::Activation act :
         {ad::Activation::elu(), ad::Activation::relu(), ad::Activation::leaky_relu(0.2)}) {
        EXPECT_LT(check(
                      [act](Tape&, std::span<const Var> v) {
                          Var h = ad::activation(v[0], act);
                          return ad::sum(ad::row_dot(h, h));
                      },
                      {x}),
                  kGradTol);
    }
}

TEST(Activation, EluValuesAndDerivativeAtZero)
{
    const ad::Activation elu = ad::Activation::elu();
    EXPECT_DOUBLE_EQ(ad::activate(2.0, elu), 2.0);
    EXPECT_NEAR(ad::activate(-1.0, elu), std::exp(-1.0) - 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(ad::activate_derivative(0.0, elu), 1.0);
    EXPECT_DOUBLE_EQ(ad::activate(-2.0, ad::Activation::leaky_relu(0.2)), -0.4);
    EXPECT_DOUBLE_EQ(ad::activate(-2.0, ad::Activation::relu()), 0.0);
}

TEST_F(OpGradients, RowNormalize)
{
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      Var z = ad::row_normalize(v[0]);
                      return ad::sum(ad::row_dot(z, v[1]));
                  },
                  {a, c}),
              kGradTol);
}

TEST(RowNormalize, ZeroRowIsNumericalError)
{
    Tape t;
    Matrix m = Matrix::Ones(3, 2);
    m.row(1).setZero();
    try {
        ad::row_normalize(t.variable(m));
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
    }
}

TEST_F(OpGradients, GramAndLogdet)
{
    Matrix w = oracle::random_matrix(5, 1, rng).cwiseAbs();
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      return ad::logdet_spd(ad::identity_plus(ad::second_moment(v[0]), 3.0));
                  },
                  {a}),
              kGradTol);
    EXPECT_LT(check(
                  [](Tape&, std::span<const Var> v) {
                      return ad::logdet_spd(ad::identity_plus(ad::weighted_gram(v[0], v[1]), 2.0));
                  },
                  {a, w}),
              kGradTol);
}

TEST(LogdetSpd, GradientIsInverse)
{
    Rng rng(3);
    const Matrix s = oracle::random_spd(4, rng);
    Tape t;
    Var x = t.variable(s);
    t.backward(ad::logdet_spd(x));
    EXPECT_LT((x.grad() - s.inverse()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SecondMoment, ExactlySymmetric)
{
    Rng rng(4);
    Tape t;
    Var g = ad::second_moment(t.constant(oracle::random_matrix(17, 6, rng)));
    EXPECT_EQ(g.value(), g.value().transpose());
}

TEST_F(OpGradients, SoftmaxWithFrozenNoise)
{
    Matrix logits = oracle::random_matrix(6, 3, rng);
    Matrix noise = ad::sample_gumbel(6, 3, rng);
    Matrix target = oracle::random_matrix(6, 3, rng);
    EXPECT_LT(check(
                  [&](Tape& t, std::span<const Var> v) {
                      return ad::sum(ad::row_dot(ad::softmax_with_noise(v[0], 0.5, noise), t.constant(target)));
                  },
                  {logits}),
              kGradTol);
}

// ---------------------------------------------------------------------------
// Gumbel-softmax

TEST(GumbelSoftmax, RowsSumToOneAndEvalIsPlainSoftmax)
{
    Rng rng(5);
    Tape t;
    const Matrix logits = oracle::random_matrix(8, 4, rng, 3.0);
    Var train = ad::gumbel_softmax(t.constant(logits), 0.5, rng, true);
    EXPECT_LT((train.value().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_TRUE((train.value().array() >= 0.0).all());

    Var eval1 = ad::gumbel_softmax(t.constant(logits), 0.5, rng, false);
    Var eval2 = ad::softmax_rows(t.constant(logits));
    EXPECT_EQ(eval1.value(), eval2.value());
}

TEST(GumbelSoftmax, NonPositiveTemperatureRejected)
{
    Rng rng(6);
    Tape t;
    EXPECT_THROW(ad::gumbel_softmax(t.constant(Matrix::Zero(2, 2)), 0.0, rng, true), std::invalid_argument);
}

TEST(GumbelSoftmax, LowTemperatureApproachesArgmaxOfNoisyLogits)
{
    Rng rng(8);
    Tape t;
    const Matrix logits = oracle::random_matrix(20, 3, rng);
    const Matrix noise = ad::sample_gumbel(20, 3, rng);
    Var y = ad::softmax_with_noise(t.constant(logits), 1e-3, noise);
    for (Eigen::Index i = 0; i < 20; ++i) {
        Eigen::Index want = 0, got = 0;
        (logits.row(i) + noise.row(i)).maxCoeff(&want);
        y.value().row(i).maxCoeff(&got);
        EXPECT_EQ(want, got);
        EXPECT_GT(y.value()(i, got), 0.99);
    }
}

TEST(GumbelNoise, SampleMeanNearEulerGamma)
{
    Rng rng(9);
    const Matrix g = ad::sample_gumbel(20000, 1, rng);
    EXPECT_NEAR(g.mean(), 0.5772156649, 0.03);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepMovesBySignTimesLr)
{
    std::vector<Matrix> p{Matrix::Constant(1, 2, 1.0)};
    Matrix g(1, 2);
    g << 0.5, -2.0;
    AdamState s;
    adam_step(p, std::vector<Matrix>{g}, s, 0.1, 0.0);
    EXPECT_NEAR(p[0](0, 0), 1.0 - 0.1, 1e-7);
    EXPECT_NEAR(p[0](0, 1), 1.0 + 0.1, 1e-7);
}

TEST(Adam, DecoupledWeightDecay)
{
    std::vector<Matrix> p{Matrix::Constant(1, 1, 2.0)};
    AdamState s;
    adam_step(p, std::vector<Matrix>{Matrix::Zero(1, 1)}, s, 0.1, 0.5);
    // zero gradient: only the decay acts
    EXPECT_DOUBLE_EQ(p[0](0, 0), 2.0 * (1.0 - 0.05));
}

TEST(Adam, ZeroLearningRateLeavesParameters)
{
    std::vector<Matrix> p{Matrix::Constant(2, 2, 1.5)};
    AdamState s;
    adam_step(p, std::vector<Matrix>{Matrix::Ones(2, 2)}, s, 0.0, 0.1);
    EXPECT_TRUE(p[0].isApproxToConstant(1.5));
    EXPECT_EQ(s.step_count, 1);
}

TEST(Adam, MatchesHandComputedSecondStep)
{
    std::vector<Matrix> p{Matrix::Constant(1, 1, 0.0)};
    AdamState s;
    const double g1 = 1.0, g2 = 3.0, lr = 0.01;
    adam_step(p, std::vector<Matrix>{Matrix::Constant(1, 1, g1)}, s, lr, 0.0);
    adam_step(p, std::vector<Matrix>{Matrix::Constant(1, 1, g2)}, s, lr, 0.0);
    const double m1 = 0.1 * g1, v1 = 0.001 * g1 * g1;
    const double step1 = lr * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
    const double m2 = 0.9 * m1 + 0.1 * g2, v2 = 0.999 * v1 + 0.001 * g2 * g2;
    const double step2 = lr * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(p[0](0, 0), -step1 - step2, 1e-14);
}

TEST(Adam, NegativeLearningRateRejected)
{
    std::vector<Matrix> p{Matrix::Zero(1, 1)};
    AdamState s;
    EXPECT_THROW(adam_step(p, std::vector<Matrix>{Matrix::Zero(1, 1)}, s, -1.0, 0.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Seeds

TEST(Seeds, DerivedSeedsDeterministicAndDistinct)
{
    EXPECT_EQ(derive_seed(42, 3), derive_seed(42, 3));
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(42, i));
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

// ---------------------------------------------------------------------------
// The checker itself

TEST(GradCheck, DetectsWrongGradient)
{
    // a deliberately wrong backward: claims d(sum x^2)/dx = x
    const LossBuilder wrong = [](Tape& t, std::span<const Var> v) {
        const Var& x = v[0];
        Matrix sq = x.value().array().square();
        Var y = t.record(std::move(sq), {x},
                         [x](Tape& tp, std::size_t self) {
                             if (tp.requires_grad(x.index()))
                                 tp.grad_buffer(x.index()).array() +=
                                     tp.grad(self).array() * x.value().array();
                         },
                         "bad_square");
        return ad::sum(y);
    };
    Rng rng(10);
    EXPECT_GT(check(wrong, {oracle::random_matrix(3, 3, rng)}), 0.1);
}
