#pragma once

// Fast built-in checks behind `nmce check`: gradients of every loss against
// central differences, the logdet/SVD identity, and the clustering metrics
// against brute force on tiny inputs.

#include "nmce/evaluation.hpp"
#include "nmce/gradcheck.hpp"
#include "nmce/model.hpp"
#include "nmce/objectives.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace nmce {

struct CheckResult {
    std::string name;
    bool passed = false;
    double value = 0.0;     // measured error
    double tolerance = 0.0; // pass when value <= tolerance
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kIdentityTolerance = 1e-8;

namespace detail {

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

inline CheckResult grad_result(std::string name, const LossBuilder& fn, const std::vector<Matrix>& params,
                               std::uint64_t seed)
{
    GradCheckOptions opts;
    opts.seed = seed;
    const GradCheckResult g = finite_diff_check(fn, params, opts);
    return {std::move(name), g.max_rel_error <= kGradTolerance, g.max_rel_error, kGradTolerance};
}

/// Every labeling of n points with ids in [0, k).
inline std::vector<std::vector<int>> all_labelings(int n, int k)
{
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(n), 0);
    while (true) {
        out.push_back(cur);
        int pos = 0;
        while (pos < n && ++cur[static_cast<std::size_t>(pos)] == k) {
            cur[static_cast<std::size_t>(pos)] = 0;
            ++pos;
        }
        if (pos == n) break;
    }
    return out;
}

inline double permutation_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int k)
{
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = 0;
    do {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hits += perm[static_cast<std::size_t>(pred[i])] == truth[i];
        best = std::max(best, hits);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(best) / static_cast<double>(pred.size());
}

inline double pair_ari(const std::vector<int>& a, const std::vector<int>& b)
{
    double both = 0, in_a = 0, in_b = 0, pairs = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            both += sa && sb;
            in_a += sa;
            in_b += sb;
            pairs += 1;
        }
    }
    const double expected = in_a * in_b / pairs;
    const double max_index = 0.5 * (in_a + in_b);
    if (max_index == expected) return 1.0;
    return (both - expected) / (max_index - expected);
}

} // namespace detail

/// Gradient checks for every objective on a random 16×4 batch, plus one through the encoder.
inline std::vector<CheckResult> gradient_checks(std::uint64_t seed = 0)
{
    using ad::row_normalize;
    using ad::softmax_rows;
    using ad::Tape;
    using ad::Var;
    Rng rng(derive_seed(seed, 0x9c));
    const Eigen::Index m = 16, d = 4, n = 3;
    const CodingRateParams p{0.5, d};
    const double lambda = 2.0;
    const Matrix z_raw = detail::gaussian_matrix(m, d, rng);
    const Matrix z2_raw = z_raw + 0.3 * detail::gaussian_matrix(m, d, rng);
    const Matrix logits = detail::gaussian_matrix(m, n, rng);

    std::vector<CheckResult> out;
    out.push_back(detail::grad_result(
        "grad coding_rate",
        [&](Tape&, std::span<const Var> v) { return coding_rate(row_normalize(v[0]), p); }, {z_raw}, seed));
    out.push_back(detail::grad_result(
        "grad per_cluster_rate",
        [&](Tape&, std::span<const Var> v) { return per_cluster_rate(row_normalize(v[0]), softmax_rows(v[1]), p); },
        {z_raw, logits}, seed));
    out.push_back(detail::grad_result(
        "grad rate_reduction",
        [&](Tape&, std::span<const Var> v) { return rate_reduction(row_normalize(v[0]), softmax_rows(v[1]), p); },
        {z_raw, logits}, seed));
    out.push_back(detail::grad_result(
        "grad constraint_d",
        [&](Tape&, std::span<const Var> v) { return constraint_d(row_normalize(v[0]), row_normalize(v[1])); },
        {z_raw, z2_raw}, seed));
    out.push_back(detail::grad_result(
        "grad tcr_loss",
        [&](Tape&, std::span<const Var> v) {
            return tcr_loss(row_normalize(v[0]), row_normalize(v[1]), p, lambda).loss;
        },
        {z_raw, z2_raw}, seed));
    out.push_back(detail::grad_result(
        "grad nmce_loss",
        [&](Tape&, std::span<const Var> v) {
            return nmce_loss(row_normalize(v[0]), row_normalize(v[1]), softmax_rows(v[2]), p, lambda).loss;
        },
        {z_raw, z2_raw, logits}, seed));

    MlpSpec spec;
    spec.input_dim = 3;
    spec.hidden_widths = {8};
    spec.feature_dim = d;
    spec.n_clusters = n;
    const Parameters params = init_mlp(spec, seed);
    const Matrix x = detail::gaussian_matrix(m, spec.input_dim, rng);
    const Matrix noise = ad::sample_gumbel(m, n, rng);
    out.push_back(detail::grad_result(
        "grad encoder nmce_loss",
        [&](Tape& t, std::span<const Var> v) {
            const GraphOutput o = forward(spec, v, t.constant(x), &noise);
            return nmce_loss(o.features, o.features, o.assignment, p, lambda).loss;
        },
        params.values(), seed));
    return out;
}

/// Cholesky logdet against the SVD form on random matrices up to 32×16.
inline CheckResult identity_check(std::uint64_t seed = 0, int trials = 50)
{
    Rng rng(derive_seed(seed, 0x1d));
    std::uniform_int_distribution<Eigen::Index> rows(1, 32), cols(1, 16);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const Matrix z = detail::gaussian_matrix(rows(rng), cols(rng), rng);
        worst = std::max(worst, singular_value_identity_check(z).abs_diff);
    }
    return {"logdet identity", worst <= kIdentityTolerance, worst, kIdentityTolerance};
}

/// ACC and ARI against brute force over every labeling of 6 points into 3 ids,
/// and NMI symmetry / self-agreement on the same set.
inline std::vector<CheckResult> metric_checks()
{
    const auto labelings = detail::all_labelings(6, 3);
    const std::vector<int> truth{0, 0, 1, 1, 2, 2};
    double acc_err = 0.0, ari_err = 0.0, nmi_err = 0.0;
    for (const auto& pred : labelings) {
        acc_err = std::max(acc_err, std::abs(clustering_accuracy(pred, truth) -
                                             detail::permutation_accuracy(pred, truth, 3)));
        ari_err = std::max(ari_err, std::abs(ari(pred, truth) - detail::pair_ari(pred, truth)));
        nmi_err = std::max(nmi_err, std::abs(nmi(pred, truth) - nmi(truth, pred)));
        nmi_err = std::max(nmi_err, std::abs(nmi(pred, pred) - 1.0));
    }
    return {{"metric acc", acc_err <= 1e-12, acc_err, 1e-12},
            {"metric ari", ari_err <= 1e-12, ari_err, 1e-12},
            {"metric nmi", nmi_err <= 1e-12, nmi_err, 1e-12}};
}

inline std::vector<CheckResult> run_self_checks(std::uint64_t seed = 0)
{
    std::vector<CheckResult> out = gradient_checks(seed);
    out.push_back(identity_check(seed));
    for (CheckResult& r : metric_checks()) out.push_back(std::move(r));
    return out;
}

inline void print_check_table(std::ostream& os, const std::vector<CheckResult>& results)
{
    for (const CheckResult& r : results) {
        os << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  error " << format_double(r.value) << " (tol "
           << format_double(r.tolerance) << ")\n";
    }
}

} // namespace nmce
