#pragma once

// Independent reference computations used only by the tests. None of these
// call into the code paths they are used to check.

#include "nmce/linalg.hpp"
#include "nmce/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

namespace nmce::oracle {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0)
{
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

inline Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    Matrix m = random_matrix(rows, cols, rng);
    for (Eigen::Index i = 0; i < rows; ++i) m.row(i).normalize();
    return m;
}

inline Matrix random_spd(Eigen::Index n, Rng& rng)
{
    Matrix a = random_matrix(n, n, rng);
    Matrix s = a * a.transpose();
    s.diagonal().array() += 0.5;
    return s;
}

inline Matrix random_orthogonal(Eigen::Index n, Rng& rng)
{
    Eigen::HouseholderQR<Matrix> qr(random_matrix(n, n, rng));
    return qr.householderQ();
}

/// log det via the eigenvalues of a symmetric matrix.
inline double logdet_eigen(const Matrix& spd)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(spd);
    return es.eigenvalues().array().log().sum();
}

/// 1/2 sum log(1 + d/(m eps^2) sigma_i^2) from the singular values of Z.
inline double coding_rate_svd(const Matrix& z, double eps)
{
    const double m = static_cast<double>(z.rows());
    const double d = static_cast<double>(z.cols());
    Eigen::JacobiSVD<Matrix> svd(z);
    double r = 0.0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
        const double s = svd.singularValues()(i);
        r += std::log1p(d / (m * eps * eps) * s * s);
    }
    return 0.5 * r;
}

/// Rows of z whose label equals `label`.
inline Matrix select_rows(const Matrix& z, const std::vector<int>& labels, int label)
{
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) idx.push_back(static_cast<Eigen::Index>(i));
    Matrix out(static_cast<Eigen::Index>(idx.size()), z.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = z.row(idx[r]);
    return out;
}

/// Hard-assignment rate sum_j (m_j/m) R(Z_j), each R computed on its own rows by eigenvalues.
inline double hard_cluster_rate(const Matrix& z, const std::vector<int>& labels, double eps)
{
    const double m = static_cast<double>(z.rows());
    const double d = static_cast<double>(z.cols());
    std::set<int> ids(labels.begin(), labels.end());
    double total = 0.0;
    for (int id : ids) {
        const Matrix zj = select_rows(z, labels, id);
        const double mj = static_cast<double>(zj.rows());
        Matrix a = Matrix::Identity(z.cols(), z.cols()) + d / (eps * eps * mj) * (zj.transpose() * zj);
        total += mj / m * 0.5 * logdet_eigen(a);
    }
    return total;
}

inline double total_rate_eigen(const Matrix& z, double eps)
{
    const double m = static_cast<double>(z.rows());
    const double d = static_cast<double>(z.cols());
    Matrix a = Matrix::Identity(z.cols(), z.cols()) + d / (eps * eps * m) * (z.transpose() * z);
    return 0.5 * logdet_eigen(a);
}

// ---------------------------------------------------------------------------
// Clustering metrics straight from their definitions

/// Best matched mass over every permutation of columns.
inline std::int64_t brute_force_matching(const std::vector<std::vector<std::int64_t>>& c)
{
    const std::size_t n = c.size();
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::int64_t best = -1;
    do {
        std::int64_t s = 0;
        for (std::size_t i = 0; i < n; ++i) s += c[i][static_cast<std::size_t>(perm[i])];
        best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Accuracy as the maximum over all injective relabelings of predicted ids.
inline double brute_force_accuracy(const std::vector<int>& pred, const std::vector<int>& truth)
{
    std::vector<int> p_ids, t_ids;
    for (int v : pred)
        if (std::find(p_ids.begin(), p_ids.end(), v) == p_ids.end()) p_ids.push_back(v);
    for (int v : truth)
        if (std::find(t_ids.begin(), t_ids.end(), v) == t_ids.end()) t_ids.push_back(v);
    const std::size_t k = std::max(p_ids.size(), t_ids.size());
    std::vector<int> targets(k);
    for (std::size_t i = 0; i < k; ++i) targets[i] = i < t_ids.size() ? t_ids[i] : -1 - static_cast<int>(i);
    std::sort(targets.begin(), targets.end());
    std::size_t best = 0;
    do {
        std::map<int, int> map;
        for (std::size_t i = 0; i < p_ids.size(); ++i) map[p_ids[i]] = targets[i];
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hits += map[pred[i]] == truth[i];
        best = std::max(best, hits);
    } while (std::next_permutation(targets.begin(), targets.end()));
    return static_cast<double>(best) / static_cast<double>(pred.size());
}

/// ARI from pair counts: every unordered pair classified as together/apart in each partition.
inline double pair_counting_ari(const std::vector<int>& a, const std::vector<int>& b)
{
    const std::size_t n = a.size();
    double both = 0, only_a = 0, only_b = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            both += sa && sb;
            only_a += sa && !sb;
            only_b += !sa && sb;
            pairs += 1;
        }
    }
    const double together_a = both + only_a, together_b = both + only_b;
    const double expected = pairs > 0 ? together_a * together_b / pairs : 0.0;
    const double max_index = 0.5 * (together_a + together_b);
    if (max_index == expected) return 1.0;
    return (both - expected) / (max_index - expected);
}

/// NMI from empirical joint probabilities, arithmetic-mean normalization.
inline double probability_nmi(const std::vector<int>& a, const std::vector<int>& b)
{
    const double n = static_cast<double>(a.size());
    std::map<std::pair<int, int>, int> joint;
    std::map<int, int> ca, cb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1;
        ca[a[i]] += 1;
        cb[b[i]] += 1;
    }
    double ha = 0, hb = 0, mi = 0;
    for (auto& [k, c] : ca) ha -= c / n * std::log(c / n);
    for (auto& [k, c] : cb) hb -= c / n * std::log(c / n);
    for (auto& [k, c] : joint) {
        const double pa = ca[k.first] / n, pb = cb[k.second] / n;
        mi += c / n * std::log(c / n / (pa * pb));
    }
    if (ha + hb == 0.0) return 1.0;
    return 2.0 * mi / (ha + hb);
}

/// Every set partition of n points into at most k blocks (restricted growth strings).
inline std::vector<std::vector<int>> set_partitions(int n, int k)
{
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(n), 0);
    auto rec = [&](auto&& self, int pos, int max_used) -> void {
        if (pos == n) {
            out.push_back(cur);
            return;
        }
        for (int v = 0; v <= std::min(max_used + 1, k - 1); ++v) {
            cur[static_cast<std::size_t>(pos)] = v;
            self(self, pos + 1, std::max(max_used, v));
        }
    };
    if (n == 0) return {{}};
    rec(rec, 0, -1);
    return out;
}

/// Exhaustive mean |cos| over pairs selected by `keep(i, j)`.
template <typename Keep>
double exhaustive_abs_cos(const Matrix& z, Keep keep)
{
    double total = 0.0;
    std::size_t count = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < z.rows(); ++j) {
            if (!keep(i, j)) continue;
            total += std::abs(z.row(i).dot(z.row(j))) / (z.row(i).norm() * z.row(j).norm());
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

} // namespace nmce::oracle
