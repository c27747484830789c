#pragma once

#include "nmce/autodiff.hpp"
#include "nmce/linalg.hpp"
#include "nmce/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nmce {

struct DatasetMeta {
    std::string generator;
    std::vector<std::pair<std::string, std::string>> params;
    std::uint64_t seed = 0;

    std::optional<std::string> param(const std::string& key) const
    {
        for (const auto& [k, v] : params) {
            if (k == key) return v;
        }
        return std::nullopt;
    }
};

struct Dataset {
    Matrix points;
    std::optional<std::vector<int>> labels;
    DatasetMeta meta;

    Eigen::Index size() const { return points.rows(); }
    Eigen::Index dim() const { return points.cols(); }
};

inline std::string to_param_string(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Double spiral

struct SpiralParams {
    Eigen::Index n_per_arm = 1000;
    double radius = 15.0;
    double noise_sigma = 0.05;
    double t_min = 0.25 * std::numbers::pi;
    double t_max = 3.0 * std::numbers::pi;
};

/// Point on arm k in {0, 1} at angle t, before noise.
inline std::pair<double, double> spiral_point(const SpiralParams& p, int arm, double t)
{
    const double r = p.radius * t / p.t_max;
    const double phase = t + arm * std::numbers::pi;
    return {r * std::cos(phase), r * std::sin(phase)};
}

/// Two interleaved Archimedean arms; rows [0, n) are arm 0 and [n, 2n) arm 1.
inline Dataset double_spiral(const SpiralParams& p, std::uint64_t seed)
{
    if (p.n_per_arm < 1) {
        throw std::invalid_argument("double_spiral: n_per_arm must be at least 1");
    }
    if (!(p.noise_sigma >= 0.0) || !(p.radius > 0.0) || !(p.t_max > p.t_min)) {
        throw std::invalid_argument("double_spiral: invalid radius, noise or angle range");
    }
    Rng rng(derive_seed(seed, 0x5b1));
    std::uniform_real_distribution<double> angle(p.t_min, p.t_max);
    std::normal_distribution<double> noise(0.0, 1.0);

    Dataset d;
    d.points.resize(2 * p.n_per_arm, 2);
    std::vector<int> labels(static_cast<std::size_t>(2 * p.n_per_arm));
    for (int arm = 0; arm < 2; ++arm) {
        for (Eigen::Index i = 0; i < p.n_per_arm; ++i) {
            const Eigen::Index row = arm * p.n_per_arm + i;
            const auto [x, y] = spiral_point(p, arm, angle(rng));
            d.points(row, 0) = x + p.noise_sigma * noise(rng);
            d.points(row, 1) = y + p.noise_sigma * noise(rng);
            labels[static_cast<std::size_t>(row)] = arm;
        }
    }
    d.labels = std::move(labels);
    d.meta.generator = "double-spiral";
    d.meta.seed = seed;
    d.meta.params = {{"n_per_arm", std::to_string(p.n_per_arm)},
                     {"radius", to_param_string(p.radius)},
                     {"noise_sigma", to_param_string(p.noise_sigma)},
                     {"t_min", to_param_string(p.t_min)},
                     {"t_max", to_param_string(p.t_max)}};
    return d;
}

inline Dataset double_spiral(Eigen::Index n_per_arm, double radius, double noise_sigma, std::uint64_t seed)
{
    SpiralParams p;
    p.n_per_arm = n_per_arm;
    p.radius = radius;
    p.noise_sigma = noise_sigma;
    return double_spiral(p, seed);
}

// ---------------------------------------------------------------------------
// Manifolds from random leaky-ReLU networks

struct ManifoldParams {
    std::vector<Eigen::Index> latent_dims{3, 6};
    bool with_bias = true;
    Eigen::Index n_per_manifold = 1000;
    Eigen::Index ambient_dim = 12;
    Eigen::Index hidden_width = 64;
    double leaky_slope = 0.2;
    /// Weights ~ U(-w, w) with w = weight_scale / sqrt(fan_in). The default gives
    /// unit weight variance per fan-in (LeCun); 1.0 is the usual framework default.
    double weight_scale = 1.7320508075688772;
    /// Biases ~ N(0, bias_scale^2).
    double bias_scale = 1.0;
    /// Required minimum distance between manifolds when with_bias is set; 0 disables the check.
    double min_separation = 1.0;
    Eigen::Index separation_probe = 1000;
    int max_attempts = 64;
};

/// Smallest distance between points carrying different labels.
inline double min_cross_label_distance(const Matrix& points, const std::vector<int>& labels)
{
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        for (Eigen::Index k = i + 1; k < points.rows(); ++k) {
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(k)]) continue;
            best = std::min(best, (points.row(i) - points.row(k)).squaredNorm());
        }
    }
    return std::sqrt(best);
}

/// A fixed set of random generator networks, one per manifold. Each network
/// maps latent N(0, I) through two leaky-ReLU hidden layers into ambient space.
class ManifoldGenerator {
public:
    ManifoldGenerator(const ManifoldParams& p, std::uint64_t seed) : params_(p), seed_(seed)
    {
        if (p.latent_dims.empty()) {
            throw std::invalid_argument("random_mlp_manifolds: need at least one manifold");
        }
        for (Eigen::Index d : p.latent_dims) {
            if (d < 1 || d > p.ambient_dim) {
                throw std::invalid_argument("random_mlp_manifolds: latent dim " + std::to_string(d) +
                                            " must be in [1, ambient_dim=" + std::to_string(p.ambient_dim) + "]");
            }
        }
        if (p.hidden_width < 1) {
            throw std::invalid_argument("random_mlp_manifolds: hidden_width must be at least 1");
        }
        build(seed);
        if (p.with_bias && p.min_separation > 0.0) {
            int attempt = 0;
            while (separation() < p.min_separation) {
                if (++attempt >= p.max_attempts) {
                    throw std::runtime_error("random_mlp_manifolds: no generator with separation >= " +
                                             to_param_string(p.min_separation) + " after " +
                                             std::to_string(attempt) + " attempts");
                }
                build(derive_seed(seed, 0xa77e + static_cast<std::uint64_t>(attempt)));
            }
            attempts_ = attempt;
        }
    }

    const ManifoldParams& params() const { return params_; }
    int rejected_attempts() const { return attempts_; }
    std::size_t manifolds() const { return nets_.size(); }

    /// Pushes latent codes (rows) through network j.
    Matrix map(std::size_t j, const Matrix& latent) const
    {
        const Net& net = nets_.at(j);
        if (latent.cols() != net.layers.front().weight.rows()) {
            throw ShapeError("manifold map: latent has " + std::to_string(latent.cols()) + " columns");
        }
        const ad::Activation act = ad::Activation::leaky_relu(params_.leaky_slope);
        Matrix h = latent;
        for (std::size_t k = 0; k < net.layers.size(); ++k) {
            Matrix next = h * net.layers[k].weight;
            if (params_.with_bias) {
                next.rowwise() += net.layers[k].bias.row(0);
            }
            h = (k + 1 < net.layers.size()) ? ad::apply_activation(next, act) : next;
        }
        return h;
    }

    /// n points per manifold; rows grouped by manifold.
    Dataset sample(Eigen::Index n_per_manifold, Rng& rng) const
    {
        if (n_per_manifold < 1) {
            throw std::invalid_argument("random_mlp_manifolds: n_per_manifold must be at least 1");
        }
        std::normal_distribution<double> normal(0.0, 1.0);
        Dataset d;
        d.points.resize(n_per_manifold * static_cast<Eigen::Index>(nets_.size()), params_.ambient_dim);
        std::vector<int> labels;
        labels.reserve(static_cast<std::size_t>(d.points.rows()));
        for (std::size_t j = 0; j < nets_.size(); ++j) {
            Matrix latent(n_per_manifold, params_.latent_dims[j]);
            for (Eigen::Index i = 0; i < latent.size(); ++i) {
                latent.data()[i] = normal(rng);
            }
            d.points.middleRows(static_cast<Eigen::Index>(j) * n_per_manifold, n_per_manifold) = map(j, latent);
            labels.insert(labels.end(), static_cast<std::size_t>(n_per_manifold), static_cast<int>(j));
        }
        d.labels = std::move(labels);
        d.meta = describe();
        return d;
    }

    DatasetMeta describe() const
    {
        DatasetMeta meta;
        meta.generator = "random-mlp-manifolds";
        meta.seed = seed_;
        std::string dims;
        for (std::size_t j = 0; j < params_.latent_dims.size(); ++j) {
            dims += (j ? ";" : "") + std::to_string(params_.latent_dims[j]);
        }
        meta.params = {{"latent_dims", dims},
                       {"with_bias", params_.with_bias ? "true" : "false"},
                       {"ambient_dim", std::to_string(params_.ambient_dim)},
                       {"hidden_width", std::to_string(params_.hidden_width)},
                       {"leaky_slope", to_param_string(params_.leaky_slope)},
                       {"weight_scale", to_param_string(params_.weight_scale)},
                       {"bias_scale", to_param_string(params_.bias_scale)},
                       {"min_separation", to_param_string(params_.min_separation)},
                       {"rejected_attempts", std::to_string(attempts_)}};
        return meta;
    }

private:
    struct Layer {
        Matrix weight;
        Matrix bias;
    };
    struct Net {
        std::vector<Layer> layers;
    };

    void build(std::uint64_t seed)
    {
        Rng rng(derive_seed(seed, 0x3a41f0));
        std::normal_distribution<double> normal(0.0, 1.0);
        nets_.clear();
        for (Eigen::Index latent : params_.latent_dims) {
            Net net;
            const Eigen::Index widths[] = {latent, params_.hidden_width, params_.hidden_width, params_.ambient_dim};
            for (int k = 0; k < 3; ++k) {
                Layer layer;
                layer.weight.resize(widths[k], widths[k + 1]);
                const double bound = params_.weight_scale / std::sqrt(static_cast<double>(widths[k]));
                std::uniform_real_distribution<double> uniform(-bound, bound);
                for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
                    layer.weight.data()[i] = uniform(rng);
                }
                layer.bias.resize(1, widths[k + 1]);
                for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
                    layer.bias.data()[i] = params_.bias_scale * normal(rng);
                }
                net.layers.push_back(std::move(layer));
            }
            nets_.push_back(std::move(net));
        }
    }

    double separation() const
    {
        Rng rng(derive_seed(seed_, 0x9e0b));
        const Dataset d = sample(params_.separation_probe, rng);
        return min_cross_label_distance(d.points, *d.labels);
    }

    ManifoldParams params_;
    std::uint64_t seed_;
    std::vector<Net> nets_;
    int attempts_ = 0;
};

/// Fixed manifolds for `seed`; `stream` picks an independent sample draw from
/// them (held-out data uses a stream other than 0).
inline Dataset random_mlp_manifolds(const ManifoldParams& p, std::uint64_t seed, std::uint64_t stream = 0)
{
    ManifoldGenerator gen(p, seed);
    Rng rng(derive_seed(seed, 0xda7a + stream));
    Dataset d = gen.sample(p.n_per_manifold, rng);
    d.meta.params.insert(d.meta.params.begin(), {"n_per_manifold", std::to_string(p.n_per_manifold)});
    d.meta.params.insert(d.meta.params.begin() + 1, {"stream", std::to_string(stream)});
    return d;
}

// ---------------------------------------------------------------------------
// Augmentation

inline Matrix gaussian_augment(const Matrix& x, double sigma, Rng& rng)
{
    if (!(sigma >= 0.0)) {
        throw std::invalid_argument("gaussian_augment: sigma must be non-negative");
    }
    Matrix out = x;
    if (sigma == 0.0) {
        return out;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        out.data()[i] += sigma * normal(rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV: header x0,...,x{d-1}[,label]; one point per row; %.17g.

class CsvError : public std::runtime_error {
public:
    CsvError(const std::string& path, std::size_t line, const std::string& msg)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + msg), line_(line)
    {
    }
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

inline std::string trim(std::string s)
{
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    return s.substr(i);
}

template <typename T>
bool parse_number(const std::string& text, T& out)
{
    const std::string s = trim(text);
    if (s.empty()) return false;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

} // namespace detail

inline void write_csv(std::ostream& os, const Dataset& d)
{
    for (Eigen::Index j = 0; j < d.dim(); ++j) {
        os << (j ? "," : "") << 'x' << j;
    }
    if (d.labels) os << ",label";
    os << '\n';
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        for (Eigen::Index j = 0; j < d.dim(); ++j) {
            os << (j ? "," : "") << to_param_string(d.points(i, j));
        }
        if (d.labels) os << ',' << (*d.labels)[static_cast<std::size_t>(i)];
        os << '\n';
    }
}

inline void save_csv(const Dataset& d, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("save_csv: cannot open '" + path + "' for writing");
    }
    write_csv(os, d);
    if (!os) {
        throw std::runtime_error("save_csv: write to '" + path + "' failed");
    }
}

inline Dataset read_csv(std::istream& is, const std::string& name = "<csv>")
{
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(is, line)) {
        throw CsvError(name, line_no, "missing header");
    }
    const auto header = detail::split_csv_line(detail::trim(line));
    bool has_label = !header.empty() && detail::trim(header.back()) == "label";
    const std::size_t dim = header.size() - (has_label ? 1 : 0);
    if (dim == 0) {
        throw CsvError(name, line_no, "header has no coordinate columns");
    }
    for (std::size_t j = 0; j < dim; ++j) {
        if (detail::trim(header[j]) != "x" + std::to_string(j)) {
            throw CsvError(name, line_no, "header column " + std::to_string(j) + " is '" + header[j] +
                                              "', expected 'x" + std::to_string(j) + "'");
        }
    }

    std::vector<double> values;
    std::vector<int> labels;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(detail::trim(line));
        if (cells.size() != header.size()) {
            throw CsvError(name, line_no, "expected " + std::to_string(header.size()) + " columns, got " +
                                              std::to_string(cells.size()));
        }
        for (std::size_t j = 0; j < dim; ++j) {
            double v = 0.0;
            if (!detail::parse_number(cells[j], v) || !std::isfinite(v)) {
                throw CsvError(name, line_no, "non-numeric cell '" + cells[j] + "' in column x" + std::to_string(j));
            }
            values.push_back(v);
        }
        if (has_label) {
            int label = 0;
            if (!detail::parse_number(cells.back(), label) || label < 0) {
                throw CsvError(name, line_no, "invalid label '" + cells.back() + "'");
            }
            labels.push_back(label);
        }
    }
    const Eigen::Index n = static_cast<Eigen::Index>(values.size() / dim);
    if (n < 1) {
        throw CsvError(name, line_no, "no data rows");
    }
    Dataset d;
    d.points = Eigen::Map<Matrix>(values.data(), n, static_cast<Eigen::Index>(dim));
    if (has_label) d.labels = std::move(labels);
    d.meta.generator = "csv";
    return d;
}

inline Dataset load_csv(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("load_csv: cannot open '" + path + "'");
    }
    return read_csv(is, path);
}

// ---------------------------------------------------------------------------
// Metadata sidecar: "key: value" lines, params as "param.<name>: <value>".

inline void save_meta(const DatasetMeta& meta, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("save_meta: cannot open '" + path + "' for writing");
    }
    os << "generator: " << meta.generator << '\n';
    os << "seed: " << meta.seed << '\n';
    for (const auto& [k, v] : meta.params) {
        os << "param." << k << ": " << v << '\n';
    }
}

inline DatasetMeta load_meta(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("load_meta: cannot open '" + path + "'");
    }
    DatasetMeta meta;
    std::string line;
    while (std::getline(is, line)) {
        const auto colon = line.find(": ");
        if (colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon);
        const std::string value = line.substr(colon + 2);
        if (key == "generator") {
            meta.generator = value;
        } else if (key == "seed") {
            meta.seed = std::stoull(value);
        } else if (key.rfind("param.", 0) == 0) {
            meta.params.emplace_back(key.substr(6), value);
        }
    }
    return meta;
}

} // namespace nmce
