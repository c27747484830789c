#pragma once

#include "nmce/autodiff.hpp"
#include "nmce/linalg.hpp"
#include "nmce/objectives.hpp"
#include "nmce/rng.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmce {

/// MLP backbone with two linear heads: unit-sphere features and cluster logits.
struct MlpSpec {
    Eigen::Index input_dim = 2;
    std::vector<Eigen::Index> hidden_widths;
    ad::Activation activation = ad::Activation::elu();
    Eigen::Index feature_dim = 6;
    Eigen::Index n_clusters = 2;
    double gumbel_temperature = 1.0;

    void validate() const
    {
        auto positive = [](Eigen::Index v, const char* what) {
            if (v < 1) {
                throw std::invalid_argument(std::string("MlpSpec: ") + what + " must be at least 1");
            }
        };
        positive(input_dim, "input_dim");
        for (Eigen::Index w : hidden_widths) {
            positive(w, "hidden width");
        }
        positive(feature_dim, "feature_dim");
        positive(n_clusters, "n_clusters");
        if (!(gumbel_temperature > 0.0)) {
            throw std::invalid_argument("MlpSpec: gumbel_temperature must be positive");
        }
    }

    bool operator==(const MlpSpec& o) const
    {
        return input_dim == o.input_dim && hidden_widths == o.hidden_widths && activation.kind == o.activation.kind &&
               activation.slope == o.activation.slope && feature_dim == o.feature_dim && n_clusters == o.n_clusters &&
               gumbel_temperature == o.gumbel_temperature;
    }
};

struct NamedTensor {
    std::string name;
    Matrix value;
};

/// Named parameter tensors in a fixed order: backbone layers, feature head, cluster head.
/// Weights are fan_in×fan_out so a layer computes x·W + b.
struct Parameters {
    std::vector<NamedTensor> tensors;

    std::size_t size() const { return tensors.size(); }

    std::vector<Matrix> values() const
    {
        std::vector<Matrix> out;
        out.reserve(tensors.size());
        for (const auto& t : tensors) {
            out.push_back(t.value);
        }
        return out;
    }

    bool operator==(const Parameters& o) const
    {
        if (tensors.size() != o.tensors.size()) {
            return false;
        }
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].name != o.tensors[i].name || tensors[i].value.rows() != o.tensors[i].value.rows() ||
                tensors[i].value.cols() != o.tensors[i].value.cols() || tensors[i].value != o.tensors[i].value) {
                return false;
            }
        }
        return true;
    }
};

struct TensorShape {
    std::string name;
    Eigen::Index rows;
    Eigen::Index cols;
};

inline std::vector<TensorShape> parameter_layout(const MlpSpec& spec)
{
    std::vector<TensorShape> layout;
    Eigen::Index fan_in = spec.input_dim;
    for (std::size_t k = 0; k < spec.hidden_widths.size(); ++k) {
        const std::string prefix = "backbone." + std::to_string(k);
        layout.push_back({prefix + ".weight", fan_in, spec.hidden_widths[k]});
        layout.push_back({prefix + ".bias", 1, spec.hidden_widths[k]});
        fan_in = spec.hidden_widths[k];
    }
    layout.push_back({"feature_head.weight", fan_in, spec.feature_dim});
    layout.push_back({"feature_head.bias", 1, spec.feature_dim});
    layout.push_back({"cluster_head.weight", fan_in, spec.n_clusters});
    layout.push_back({"cluster_head.bias", 1, spec.n_clusters});
    return layout;
}

/// Kaiming-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases.
inline Parameters init_mlp(const MlpSpec& spec, std::uint64_t seed)
{
    spec.validate();
    Rng rng(derive_seed(seed, 0x1417));
    Parameters params;
    for (const TensorShape& shape : parameter_layout(spec)) {
        Matrix value = Matrix::Zero(shape.rows, shape.cols);
        if (shape.name.ends_with(".weight")) {
            const double bound = std::sqrt(6.0 / static_cast<double>(shape.rows));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (Eigen::Index i = 0; i < value.size(); ++i) {
                value.data()[i] = dist(rng);
            }
        }
        params.tensors.push_back({shape.name, std::move(value)});
    }
    return params;
}

inline void check_parameters(const MlpSpec& spec, const Parameters& params)
{
    const auto layout = parameter_layout(spec);
    if (layout.size() != params.size()) {
        throw ShapeError("parameters: expected " + std::to_string(layout.size()) + " tensors, got " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& t = params.tensors[i];
        if (t.name != layout[i].name || t.value.rows() != layout[i].rows || t.value.cols() != layout[i].cols) {
            throw ShapeError("parameters: tensor " + std::to_string(i) + " is " + t.name + " " +
                             shape_string(t.value) + ", expected " + layout[i].name + " " +
                             std::to_string(layout[i].rows) + "x" + std::to_string(layout[i].cols));
        }
    }
}

inline std::vector<ad::Var> bind_parameters(ad::Tape& tape, const Parameters& params)
{
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const auto& t : params.tensors) {
        vars.push_back(tape.variable(t.value));
    }
    return vars;
}

struct GraphOutput {
    ad::Var features;   // m×d_z, unit rows
    ad::Var logits;     // m×n
    ad::Var assignment; // m×n, rows sum to one
};

/// Forward pass on a tape. A null `gumbel_noise` selects eval mode (plain softmax).
inline GraphOutput forward(const MlpSpec& spec, std::span<const ad::Var> params, const ad::Var& x,
                           const Matrix* gumbel_noise)
{
    if (x.cols() != spec.input_dim) {
        throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(spec.input_dim));
    }
    const std::size_t expected = 2 * spec.hidden_widths.size() + 4;
    if (params.size() != expected) {
        throw ShapeError("forward: expected " + std::to_string(expected) + " parameter tensors, got " +
                         std::to_string(params.size()));
    }
    ad::Var h = x;
    std::size_t k = 0;
    for (std::size_t layer = 0; layer < spec.hidden_widths.size(); ++layer, k += 2) {
        h = ad::activation(ad::add_row_bias(ad::matmul(h, params[k]), params[k + 1]), spec.activation);
    }
    GraphOutput out;
    out.features = ad::row_normalize(ad::add_row_bias(ad::matmul(h, params[k]), params[k + 1]));
    out.logits = ad::add_row_bias(ad::matmul(h, params[k + 2]), params[k + 3]);
    if (gumbel_noise != nullptr) {
        out.assignment = ad::softmax_with_noise(out.logits, spec.gumbel_temperature, *gumbel_noise);
    } else {
        out.assignment = ad::softmax_rows(out.logits);
    }
    return out;
}

/// Train mode draws fresh Gumbel noise from `rng`; eval mode is deterministic.
inline GraphOutput forward(const MlpSpec& spec, std::span<const ad::Var> params, const ad::Var& x, bool train_mode,
                           Rng& rng)
{
    if (!train_mode) {
        return forward(spec, params, x, nullptr);
    }
    const Matrix noise = ad::sample_gumbel(x.rows(), spec.n_clusters, rng);
    return forward(spec, params, x, &noise);
}

struct EncoderOutput {
    FeatureBatch features;
    SoftAssignment assignment;
    Matrix logits;
};

inline EncoderOutput forward(const MlpSpec& spec, const Parameters& params, const Matrix& x, bool train_mode,
                             Rng& rng)
{
    check_parameters(spec, params);
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const auto& t : params.tensors) {
        vars.push_back(tape.constant(t.value));
    }
    GraphOutput g = forward(spec, vars, tape.constant(x), train_mode, rng);
    return EncoderOutput{FeatureBatch(g.features.value()), SoftAssignment(g.assignment.value()), g.logits.value()};
}

/// Deterministic eval-mode forward.
inline EncoderOutput encode(const MlpSpec& spec, const Parameters& params, const Matrix& x)
{
    Rng unused(0);
    return forward(spec, params, x, false, unused);
}

struct ViewAverage {
    FeatureBatch z_avg;
    SoftAssignment gamma_avg;
};

inline ViewAverage average_views(const EncoderOutput& a, const EncoderOutput& b)
{
    require_same_shape(a.features.matrix(), b.features.matrix(), "average_views");
    require_same_shape(a.assignment.matrix(), b.assignment.matrix(), "average_views");
    ad::Tape tape;
    ad::Var z = average_features(tape.constant(a.features.matrix()), tape.constant(b.features.matrix()));
    Matrix gamma = 0.5 * (a.assignment.matrix() + b.assignment.matrix());
    return ViewAverage{FeatureBatch(z.value()), SoftAssignment(std::move(gamma))};
}

/// Hard labels: argmax per row, ties to the lowest index.
inline std::vector<int> argmax_labels(const Matrix& scores)
{
    std::vector<int> labels(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < scores.cols(); ++j) {
            if (scores(i, j) > scores(i, best)) {
                best = j;
            }
        }
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   nmce-checkpoint 1
//   input_dim <n>
//   hidden_widths <count> <w1> <w2> ...
//   activation <elu|relu|leaky_relu> <slope>
//   feature_dim <n>
//   n_clusters <n>
//   gumbel_temperature <x>
//   tensors <count>
//   tensor <name> <rows> <cols>
//   <row 0 values, space separated, %.17g>
//   ...
//   end

inline constexpr const char* kCheckpointMagic = "nmce-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string activation_name(ad::ActivationKind kind)
{
    switch (kind) {
    case ad::ActivationKind::elu:
        return "elu";
    case ad::ActivationKind::relu:
        return "relu";
    case ad::ActivationKind::leaky_relu:
        return "leaky_relu";
    }
    return "elu";
}

inline ad::ActivationKind parse_activation(const std::string& name)
{
    if (name == "elu") return ad::ActivationKind::elu;
    if (name == "relu") return ad::ActivationKind::relu;
    if (name == "leaky_relu") return ad::ActivationKind::leaky_relu;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Checkpoint {
    MlpSpec spec;
    Parameters params;
};

inline void write_checkpoint(std::ostream& os, const MlpSpec& spec, const Parameters& params)
{
    check_parameters(spec, params);
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    os << "input_dim " << spec.input_dim << '\n';
    os << "hidden_widths " << spec.hidden_widths.size();
    for (Eigen::Index w : spec.hidden_widths) {
        os << ' ' << w;
    }
    os << '\n';
    os << "activation " << activation_name(spec.activation.kind) << ' ' << format_double(spec.activation.slope)
       << '\n';
    os << "feature_dim " << spec.feature_dim << '\n';
    os << "n_clusters " << spec.n_clusters << '\n';
    os << "gumbel_temperature " << format_double(spec.gumbel_temperature) << '\n';
    os << "tensors " << params.size() << '\n';
    for (const auto& t : params.tensors) {
        os << "tensor " << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << '\n';
        for (Eigen::Index i = 0; i < t.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.value.cols(); ++j) {
                if (j > 0) os << ' ';
                os << format_double(t.value(i, j));
            }
            os << '\n';
        }
    }
    os << "end\n";
}

inline Checkpoint read_checkpoint(std::istream& is)
{
    auto fail = [](const std::string& msg) -> std::runtime_error {
        return std::runtime_error("checkpoint: " + msg);
    };
    auto expect_key = [&](const std::string& key) {
        std::string got;
        if (!(is >> got) || got != key) {
            throw fail("expected '" + key + "', got '" + got + "'");
        }
    };
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != kCheckpointMagic) {
        throw fail("not a checkpoint file");
    }
    if (version != kCheckpointVersion) {
        throw fail("unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    MlpSpec& spec = ck.spec;
    std::size_t n_hidden = 0;
    std::string act;
    expect_key("input_dim");
    is >> spec.input_dim;
    expect_key("hidden_widths");
    is >> n_hidden;
    spec.hidden_widths.resize(n_hidden);
    for (auto& w : spec.hidden_widths) {
        is >> w;
    }
    expect_key("activation");
    is >> act >> spec.activation.slope;
    spec.activation.kind = parse_activation(act);
    expect_key("feature_dim");
    is >> spec.feature_dim;
    expect_key("n_clusters");
    is >> spec.n_clusters;
    expect_key("gumbel_temperature");
    is >> spec.gumbel_temperature;
    expect_key("tensors");
    std::size_t count = 0;
    is >> count;
    if (!is) {
        throw fail("malformed header");
    }
    spec.validate();
    for (std::size_t k = 0; k < count; ++k) {
        expect_key("tensor");
        NamedTensor t;
        Eigen::Index rows = 0, cols = 0;
        if (!(is >> t.name >> rows >> cols) || rows < 0 || cols < 0) {
            throw fail("malformed tensor header");
        }
        t.value.resize(rows, cols);
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            std::string tok;
            if (!(is >> tok)) {
                throw fail("truncated tensor " + t.name);
            }
            t.value.data()[i] = std::stod(tok);
        }
        ck.params.tensors.push_back(std::move(t));
    }
    expect_key("end");
    check_parameters(spec, ck.params);
    return ck;
}

inline void save_checkpoint(const std::string& path, const MlpSpec& spec, const Parameters& params)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    }
    write_checkpoint(os, spec, params);
    if (!os) {
        throw std::runtime_error("checkpoint: write to '" + path + "' failed");
    }
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    }
    return read_checkpoint(is);
}

} // namespace nmce
