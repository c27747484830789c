#pragma once

#include "nmce/linalg.hpp"
#include "nmce/model.hpp"
#include "nmce/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmce {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Label bookkeeping

/// Maps arbitrary label values onto 0..k-1 in ascending order of value.
struct DenseLabels {
    std::vector<int> ids;
    std::vector<int> values; // values[id] = original label
    int count() const { return static_cast<int>(values.size()); }
};

inline DenseLabels densify(std::span<const int> labels)
{
    DenseLabels out;
    std::map<int, int> index;
    for (int l : labels) index.emplace(l, 0);
    for (auto& [value, id] : index) {
        id = static_cast<int>(out.values.size());
        out.values.push_back(value);
    }
    out.ids.reserve(labels.size());
    for (int l : labels) out.ids.push_back(index[l]);
    return out;
}

inline void require_same_length(std::span<const int> a, std::span<const int> b, const char* what)
{
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(what) + ": label vectors have lengths " + std::to_string(a.size()) +
                                    " and " + std::to_string(b.size()));
    }
}

/// counts(i, j) = #points with dense pred id i and dense true id j.
inline CountMatrix contingency(const DenseLabels& pred, const DenseLabels& truth)
{
    CountMatrix c = CountMatrix::Zero(pred.count(), truth.count());
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
        c(pred.ids[i], truth.ids[i]) += 1;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Hungarian matching

/// Assignment maximizing the matched mass of a square count matrix:
/// result[row] = column. Kuhn-Munkres with potentials, O(n^3).
inline std::vector<int> hungarian_match(const CountMatrix& confusion)
{
    const Eigen::Index n = confusion.rows();
    if (confusion.cols() != n) {
        throw ShapeError("hungarian_match: confusion matrix must be square, got " + std::to_string(n) + "x" +
                         std::to_string(confusion.cols()));
    }
    if ((confusion.array() < 0).any()) {
        throw std::invalid_argument("hungarian_match: counts must be non-negative");
    }
    if (n == 0) return {};

    // Minimize max - count, 1-based arrays.
    const std::int64_t top = confusion.maxCoeff();
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
    std::vector<Eigen::Index> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (Eigen::Index i = 1; i <= n; ++i) {
        p[0] = i;
        Eigen::Index j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const Eigen::Index i0 = p[j0];
            std::int64_t delta = inf;
            Eigen::Index j1 = 0;
            for (Eigen::Index j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const std::int64_t cur = (top - confusion(i0 - 1, j - 1)) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (Eigen::Index j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const Eigen::Index j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assignment(static_cast<std::size_t>(n), -1);
    for (Eigen::Index j = 1; j <= n; ++j) {
        assignment[static_cast<std::size_t>(p[j] - 1)] = static_cast<int>(j - 1);
    }
    return assignment;
}

inline std::int64_t matched_mass(const CountMatrix& confusion, std::span<const int> assignment)
{
    std::int64_t total = 0;
    for (std::size_t r = 0; r < assignment.size(); ++r) {
        total += confusion(static_cast<Eigen::Index>(r), assignment[r]);
    }
    return total;
}

// ---------------------------------------------------------------------------
// ACC / NMI / ARI

struct AccuracyResult {
    double accuracy = 0.0;
    /// mapping[k] = true label value matched to predicted label value pred_values[k]
    std::vector<int> pred_values;
    std::vector<int> mapping;
};

inline AccuracyResult clustering_accuracy_detail(std::span<const int> pred, std::span<const int> truth)
{
    require_same_length(pred, truth, "clustering_accuracy");
    if (pred.empty()) {
        throw std::invalid_argument("clustering_accuracy: empty labels");
    }
    const DenseLabels p = densify(pred);
    const DenseLabels t = densify(truth);
    const int k = std::max(p.count(), t.count());
    CountMatrix square = CountMatrix::Zero(k, k);
    square.topLeftCorner(p.count(), t.count()) = contingency(p, t);
    const std::vector<int> match = hungarian_match(square);

    AccuracyResult out;
    out.accuracy = static_cast<double>(matched_mass(square, match)) / static_cast<double>(pred.size());
    for (int i = 0; i < p.count(); ++i) {
        out.pred_values.push_back(p.values[static_cast<std::size_t>(i)]);
        const int col = match[static_cast<std::size_t>(i)];
        out.mapping.push_back(col < t.count() ? t.values[static_cast<std::size_t>(col)] : -1);
    }
    return out;
}

/// Fraction of points correctly labeled under the best one-to-one relabeling.
inline double clustering_accuracy(std::span<const int> pred, std::span<const int> truth)
{
    return clustering_accuracy_detail(pred, truth).accuracy;
}

namespace detail {

inline double entropy_of_counts(const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>& counts, double n)
{
    double h = 0.0;
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
        if (counts(i) > 0) {
            const double p = static_cast<double>(counts(i)) / n;
            h -= p * std::log(p);
        }
    }
    return h;
}

inline double choose2(std::int64_t x) { return 0.5 * static_cast<double>(x) * static_cast<double>(x - 1); }

} // namespace detail

/// Normalized mutual information, arithmetic-mean normalization 2I / (H(pred) + H(true)).
/// Two single-cluster partitions score 1.
inline double nmi(std::span<const int> pred, std::span<const int> truth)
{
    require_same_length(pred, truth, "nmi");
    if (pred.empty()) {
        throw std::invalid_argument("nmi: empty labels");
    }
    const CountMatrix c = contingency(densify(pred), densify(truth));
    const double n = static_cast<double>(pred.size());
    const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> rows = c.rowwise().sum();
    const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> cols = c.colwise().sum().transpose();
    const double hp = detail::entropy_of_counts(rows, n);
    const double ht = detail::entropy_of_counts(cols, n);
    if (hp == 0.0 && ht == 0.0) {
        return 1.0;
    }
    double mi = 0.0;
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
        for (Eigen::Index j = 0; j < c.cols(); ++j) {
            if (c(i, j) == 0) continue;
            const double nij = static_cast<double>(c(i, j));
            mi += nij / n * std::log(n * nij / (static_cast<double>(rows(i)) * static_cast<double>(cols(j))));
        }
    }
    return std::clamp(2.0 * mi / (hp + ht), 0.0, 1.0);
}

/// Adjusted Rand index. Returns 1 when the expected and maximum index coincide
/// (both partitions trivial and identical).
inline double ari(std::span<const int> pred, std::span<const int> truth)
{
    require_same_length(pred, truth, "ari");
    if (pred.empty()) {
        throw std::invalid_argument("ari: empty labels");
    }
    const CountMatrix c = contingency(densify(pred), densify(truth));
    const auto n = static_cast<std::int64_t>(pred.size());
    double index = 0.0;
    for (Eigen::Index i = 0; i < c.size(); ++i) index += detail::choose2(c.data()[i]);
    double sum_rows = 0.0, sum_cols = 0.0;
    const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> rows = c.rowwise().sum();
    const Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> cols = c.colwise().sum().transpose();
    for (Eigen::Index i = 0; i < rows.size(); ++i) sum_rows += detail::choose2(rows(i));
    for (Eigen::Index j = 0; j < cols.size(); ++j) sum_cols += detail::choose2(cols(j));
    const double total = detail::choose2(n);
    const double expected = total > 0.0 ? sum_rows * sum_cols / total : 0.0;
    const double max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index == expected) {
        return 1.0;
    }
    return (index - expected) / (max_index - expected);
}

// ---------------------------------------------------------------------------
// z-sim

inline constexpr std::size_t kDefaultZsimPairs = 10000;

struct ZsimStats {
    std::optional<double> zsim_true;   // pairs from different ground-truth clusters
    std::optional<double> zsim_found;  // pairs from different found clusters
    std::optional<double> zsim_within; // pairs inside one found cluster, averaged over clusters
};

namespace detail {

inline double abs_cos(const Matrix& z, Eigen::Index i, Eigen::Index j)
{
    const double denom = z.row(i).norm() * z.row(j).norm();
    return denom > 0.0 ? std::abs(z.row(i).dot(z.row(j))) / denom : 0.0;
}

/// Mean |cos| over pairs with different labels; exhaustive below max_pairs.
inline std::optional<double> across_mean(const Matrix& z, std::span<const int> labels, std::size_t max_pairs,
                                         Rng& rng)
{
    const Eigen::Index n = z.rows();
    std::map<int, std::int64_t> sizes;
    for (int l : labels) sizes[l] += 1;
    double same = 0.0;
    for (const auto& [l, s] : sizes) same += choose2(s);
    const double candidates = choose2(n) - same;
    if (candidates <= 0.0) {
        return std::nullopt;
    }
    double total = 0.0;
    std::size_t count = 0;
    if (candidates <= static_cast<double>(max_pairs)) {
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = i + 1; j < n; ++j) {
                if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) continue;
                total += abs_cos(z, i, j);
                ++count;
            }
        }
        return total / static_cast<double>(count);
    }
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    while (count < max_pairs) {
        const Eigen::Index i = pick(rng), j = pick(rng);
        if (i == j || labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) continue;
        total += abs_cos(z, i, j);
        ++count;
    }
    return total / static_cast<double>(count);
}

inline std::optional<double> within_mean(const Matrix& z, std::span<const int> labels, std::size_t max_pairs,
                                         Rng& rng)
{
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Eigen::Index>(i));
    double sum_of_means = 0.0;
    int clusters = 0;
    for (const auto& [label, idx] : members) {
        const auto k = static_cast<std::int64_t>(idx.size());
        if (k < 2) continue;
        double total = 0.0;
        std::size_t count = 0;
        if (choose2(k) <= static_cast<double>(max_pairs)) {
            for (std::size_t a = 0; a < idx.size(); ++a) {
                for (std::size_t b = a + 1; b < idx.size(); ++b) {
                    total += abs_cos(z, idx[a], idx[b]);
                    ++count;
                }
            }
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
            while (count < max_pairs) {
                const std::size_t a = pick(rng), b = pick(rng);
                if (a == b) continue;
                total += abs_cos(z, idx[a], idx[b]);
                ++count;
            }
        }
        sum_of_means += total / static_cast<double>(count);
        ++clusters;
    }
    if (clusters == 0) return std::nullopt;
    return sum_of_means / clusters;
}

} // namespace detail

/// Mean absolute cosine similarity across true clusters, across found clusters,
/// and within found clusters. Pair sets larger than `max_pairs` are sampled.
inline ZsimStats zsim_stats(const Matrix& z, std::span<const int> pred, std::optional<std::span<const int>> truth,
                            std::uint64_t seed = 0, std::size_t max_pairs = kDefaultZsimPairs)
{
    if (static_cast<std::size_t>(z.rows()) != pred.size()) {
        throw std::invalid_argument("zsim_stats: " + std::to_string(z.rows()) + " features but " +
                                    std::to_string(pred.size()) + " predicted labels");
    }
    ZsimStats out;
    if (truth) {
        if (truth->size() != pred.size()) {
            throw std::invalid_argument("zsim_stats: label vectors have different lengths");
        }
        Rng rng = make_rng(seed, 1);
        out.zsim_true = detail::across_mean(z, *truth, max_pairs, rng);
    }
    Rng rng_found = make_rng(seed, 2);
    out.zsim_found = detail::across_mean(z, pred, max_pairs, rng_found);
    Rng rng_within = make_rng(seed, 3);
    out.zsim_within = detail::within_mean(z, pred, max_pairs, rng_within);
    return out;
}

// ---------------------------------------------------------------------------
// Spectral diagnostics

/// ||offdiag(C)||_F / ||diag(C)||_F for the uncentered second moment C = ZᵀZ/m.
inline double covariance_diagonality(const Matrix& z)
{
    if (z.rows() < 2) {
        throw std::invalid_argument("covariance_diagonality: need at least two rows");
    }
    const Matrix c = (z.transpose() * z) / static_cast<double>(z.rows());
    const double diag = c.diagonal().squaredNorm();
    const double off = c.squaredNorm() - diag;
    if (diag == 0.0) {
        throw NumericalError("covariance_diagonality: zero diagonal");
    }
    return std::sqrt(std::max(0.0, off) / diag);
}

inline double covariance_diagonality(const FeatureBatch& z) { return covariance_diagonality(z.matrix()); }

/// Coefficient of variation (stddev / mean) of the squared singular values.
inline double squared_singular_value_cv(const Matrix& z)
{
    const Vector s2 = singular_values(z).array().square();
    const double mean = s2.mean();
    const double var = (s2.array() - mean).square().mean();
    return std::sqrt(var) / mean;
}

struct Spectrum {
    std::optional<int> cluster; // empty for the whole set
    Vector sigma;               // descending
};

inline std::vector<Spectrum> singular_spectrum(const Matrix& z, std::optional<std::span<const int>> labels = {})
{
    if (z.rows() == 0) {
        throw std::invalid_argument("singular_spectrum: empty matrix");
    }
    std::vector<Spectrum> out;
    if (!labels) {
        out.push_back({std::nullopt, singular_values(z)});
        return out;
    }
    if (labels->size() != static_cast<std::size_t>(z.rows())) {
        throw std::invalid_argument("singular_spectrum: label count does not match rows");
    }
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < labels->size(); ++i) members[(*labels)[i]].push_back(static_cast<Eigen::Index>(i));
    for (const auto& [label, idx] : members) {
        Matrix sub(static_cast<Eigen::Index>(idx.size()), z.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = z.row(idx[r]);
        out.push_back({label, singular_values(sub)});
    }
    return out;
}

inline void write_spectra_csv(std::ostream& os, const std::vector<Spectrum>& spectra)
{
    os << "cluster,rank,sigma\n";
    for (const Spectrum& s : spectra) {
        const std::string id = s.cluster ? std::to_string(*s.cluster) : std::string("all");
        for (Eigen::Index r = 0; r < s.sigma.size(); ++r) {
            os << id << ',' << r << ',' << format_double(s.sigma(r)) << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Per-cluster principal directions

struct PrincipalComponent {
    Vector direction; // unit, largest-magnitude entry positive
    double sigma = 0.0;
    std::vector<Eigen::Index> top_samples; // descending |cos|, then ascending index
};

struct ClusterComponents {
    int cluster = 0;
    std::size_t members = 0;
    bool truncated = false; // fewer than k members
    std::vector<PrincipalComponent> components;
};

/// Top-k uncentered principal directions of each cluster's features, and for each
/// direction the `n_retrieve` member samples most aligned with it.
inline std::vector<ClusterComponents> pca_component_retrieval(const Matrix& z, std::span<const int> labels,
                                                              std::size_t k, std::size_t n_retrieve = 10)
{
    if (labels.size() != static_cast<std::size_t>(z.rows())) {
        throw std::invalid_argument("pca_component_retrieval: label count does not match rows");
    }
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Eigen::Index>(i));

    std::vector<ClusterComponents> out;
    for (const auto& [label, idx] : members) {
        ClusterComponents cc;
        cc.cluster = label;
        cc.members = idx.size();
        Matrix sub(static_cast<Eigen::Index>(idx.size()), z.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = z.row(idx[r]);

        Eigen::JacobiSVD<Matrix> svd(sub, Eigen::ComputeFullV);
        const std::size_t available =
            std::min<std::size_t>({k, idx.size(), static_cast<std::size_t>(svd.singularValues().size())});
        cc.truncated = available < k;
        for (std::size_t c = 0; c < available; ++c) {
            PrincipalComponent pc;
            pc.sigma = svd.singularValues()(static_cast<Eigen::Index>(c));
            pc.direction = svd.matrixV().col(static_cast<Eigen::Index>(c));
            Eigen::Index arg = 0;
            pc.direction.cwiseAbs().maxCoeff(&arg);
            if (pc.direction(arg) < 0.0) pc.direction = -pc.direction;

            std::vector<std::pair<double, Eigen::Index>> scored;
            scored.reserve(idx.size());
            for (Eigen::Index i : idx) {
                const double norm = z.row(i).norm();
                const double cosv = norm > 0.0 ? std::abs(z.row(i).dot(pc.direction)) / norm : 0.0;
                scored.emplace_back(cosv, i);
            }
            std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                return a.first != b.first ? a.first > b.first : a.second < b.second;
            });
            for (std::size_t r = 0; r < std::min(n_retrieve, scored.size()); ++r) {
                pc.top_samples.push_back(scored[r].second);
            }
            cc.components.push_back(std::move(pc));
        }
        out.push_back(std::move(cc));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
    std::size_t n_points = 0;
    int n_found_clusters = 0;
    std::optional<double> acc;
    std::optional<double> nmi;
    std::optional<double> ari;
    std::vector<int> pred_values; // found cluster ids
    std::vector<int> matched;     // true label matched to each found cluster (-1: unmatched)
    ZsimStats zsim;
};

inline MetricReport evaluate_clustering(const Matrix& z, std::span<const int> pred,
                                        std::optional<std::span<const int>> truth, std::uint64_t seed = 0)
{
    MetricReport r;
    r.n_points = pred.size();
    r.n_found_clusters = densify(pred).count();
    if (truth) {
        const AccuracyResult a = clustering_accuracy_detail(pred, *truth);
        r.acc = a.accuracy;
        r.pred_values = a.pred_values;
        r.matched = a.mapping;
        r.nmi = nmi(pred, *truth);
        r.ari = ari(pred, *truth);
    }
    r.zsim = zsim_stats(z, pred, truth, seed);
    return r;
}

inline void write_report(std::ostream& os, const MetricReport& r)
{
    auto opt = [&os](const char* key, const std::optional<double>& v) {
        if (v) os << key << ": " << format_double(*v) << '\n';
    };
    os << "n_points: " << r.n_points << '\n';
    os << "n_found_clusters: " << r.n_found_clusters << '\n';
    opt("acc", r.acc);
    opt("nmi", r.nmi);
    opt("ari", r.ari);
    if (!r.matched.empty()) {
        os << "permutation:";
        for (std::size_t i = 0; i < r.matched.size(); ++i) {
            os << ' ' << r.pred_values[i] << "->" << r.matched[i];
        }
        os << '\n';
    }
    opt("zsim_true", r.zsim.zsim_true);
    opt("zsim_found", r.zsim.zsim_found);
    opt("zsim_within", r.zsim.zsim_within);
}

/// One row per point: inputs, features, predicted id and (when known) true label.
/// Header `x0..,z0..,pred[,true]`.
inline void write_embeddings_csv(std::ostream& os, const Matrix& x, const Matrix& z, std::span<const int> pred,
                                 std::optional<std::span<const int>> truth)
{
    if (x.rows() != z.rows() || static_cast<std::size_t>(z.rows()) != pred.size() ||
        (truth && truth->size() != pred.size())) {
        throw std::invalid_argument("write_embeddings_csv: row counts differ");
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) os << 'x' << j << ',';
    for (Eigen::Index j = 0; j < z.cols(); ++j) os << 'z' << j << ',';
    os << "pred" << (truth ? ",true" : "") << '\n';
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) os << format_double(x(i, j)) << ',';
        for (Eigen::Index j = 0; j < z.cols(); ++j) os << format_double(z(i, j)) << ',';
        os << pred[static_cast<std::size_t>(i)];
        if (truth) os << ',' << (*truth)[static_cast<std::size_t>(i)];
        os << '\n';
    }
}

} // namespace nmce
