#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape owns every node produced during one forward pass. Nodes are appended
// in evaluation order, so walking the tape backwards from the loss is a
// reverse topological sweep and each node is visited exactly once.

#include "nmce/linalg.hpp"
#include "nmce/rng.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace nmce::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its Tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    const Matrix& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const;

    Tape& tape() const { return *tape_; }
    std::size_t index() const { return index_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that receives a gradient on backward().
    Var variable(Matrix value) { return leaf(std::move(value), true); }

    /// Leaf excluded from differentiation (data, frozen noise).
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward, const char* op)
    {
        require_finite(value, op);
        bool needs = false;
        for (const Var& p : parents) {
            check_owner(p, op);
            needs = needs || nodes_[p.index_].requires_grad;
        }
        Node node;
        node.value = std::move(value);
        node.requires_grad = needs;
        if (needs) {
            node.backward = std::move(backward);
        }
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    /// Seeds d(output)/d(output) = 1 and propagates to every node recorded before it.
    void backward(const Var& output)
    {
        check_owner(output, "backward");
        const Matrix& out = nodes_[output.index_].value;
        if (out.rows() != 1 || out.cols() != 1) {
            throw ShapeError("backward: output must be 1x1, got " + shape_string(out));
        }
        for (std::size_t i = 0; i <= output.index_; ++i) {
            Node& n = nodes_[i];
            n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        }
        nodes_[output.index_].grad(0, 0) = 1.0;
        for (std::size_t i = output.index_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward) {
                n.backward(*this, i);
            }
        }
    }

    const Matrix& value(std::size_t i) const { return nodes_[i].value; }
    const Matrix& grad(std::size_t i) const
    {
        const Node& n = nodes_[i];
        if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
            n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

    /// Gradient buffer of node i, for use inside backward closures.
    Matrix& grad_buffer(std::size_t i) { return nodes_[i].grad; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        mutable Matrix grad;
        Backward backward;
        bool requires_grad = false;
    };

    Var leaf(Matrix value, bool requires_grad)
    {
        require_finite(value, "leaf");
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    void check_owner(const Var& v, const char* op) const
    {
        if (v.tape_ != this || v.index_ >= nodes_.size()) {
            throw std::invalid_argument(std::string(op) + ": variable does not belong to this tape");
        }
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(index_); }
inline const Matrix& Var::grad() const { return tape_->grad(index_); }
inline double Var::scalar() const
{
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw ShapeError("scalar: expected 1x1, got " + shape_string(v));
    }
    return v(0, 0);
}

namespace detail {

inline Matrix scalar_matrix(double x)
{
    Matrix m(1, 1);
    m(0, 0) = x;
    return m;
}

inline bool wants(Tape& t, std::size_t i) { return t.requires_grad(i); }

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b)
{
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree (" + shape_string(a.value()) + " * " +
                         shape_string(b.value()) + ")");
    }
    Matrix out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    const std::size_t ia = a.index(), ib = b.index();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (detail::wants(t, ia)) {
            t.grad_buffer(ia).noalias() += g * t.value(ib).transpose();
        }
        if (detail::wants(t, ib)) {
            t.grad_buffer(ib).noalias() += t.value(ia).transpose() * g;
        }
    }, "matmul");
}

inline Var transpose(const Var& a)
{
    const std::size_t ia = a.index();
    return a.tape().record(a.value().transpose(), {a}, [ia](Tape& t, std::size_t self) {
        t.grad_buffer(ia) += t.grad(self).transpose();
    }, "transpose");
}

inline Var add(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "add");
    const std::size_t ia = a.index(), ib = b.index();
    return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        if (detail::wants(t, ia)) t.grad_buffer(ia) += t.grad(self);
        if (detail::wants(t, ib)) t.grad_buffer(ib) += t.grad(self);
    }, "add");
}

inline Var sub(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t ia = a.index(), ib = b.index();
    return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        if (detail::wants(t, ia)) t.grad_buffer(ia) += t.grad(self);
        if (detail::wants(t, ib)) t.grad_buffer(ib) -= t.grad(self);
    }, "sub");
}

inline Var scale(const Var& a, double factor)
{
    const std::size_t ia = a.index();
    return a.tape().record(a.value() * factor, {a}, [ia, factor](Tape& t, std::size_t self) {
        t.grad_buffer(ia) += factor * t.grad(self);
    }, "scale");
}

/// a + c elementwise, for a constant c.
inline Var add_constant(const Var& a, double c)
{
    const std::size_t ia = a.index();
    Matrix out = a.value().array() + c;
    return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        t.grad_buffer(ia) += t.grad(self);
    }, "add_constant");
}

/// x + 1·b, broadcasting the 1×n row b over every row of x.
inline Var add_row_bias(const Var& x, const Var& bias)
{
    if (bias.rows() != 1 || bias.cols() != x.cols()) {
        throw ShapeError("add_row_bias: bias " + shape_string(bias.value()) + " does not match " +
                         shape_string(x.value()));
    }
    Matrix out = x.value();
    out.rowwise() += bias.value().row(0);
    const std::size_t ix = x.index(), ib = bias.index();
    return x.tape().record(std::move(out), {x, bias}, [ix, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (detail::wants(t, ix)) t.grad_buffer(ix) += g;
        if (detail::wants(t, ib)) t.grad_buffer(ib) += g.colwise().sum();
    }, "add_row_bias");
}

/// a multiplied by the 1×1 variable s.
inline Var scalar_mul(const Var& a, const Var& s)
{
    const double sv = s.scalar();
    const std::size_t ia = a.index(), is = s.index();
    return a.tape().record(a.value() * sv, {a, s}, [ia, is](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const double sv = t.value(is)(0, 0);
        if (detail::wants(t, ia)) t.grad_buffer(ia) += sv * g;
        if (detail::wants(t, is)) t.grad_buffer(is)(0, 0) += g.cwiseProduct(t.value(ia)).sum();
    }, "scalar_mul");
}

inline Var reciprocal(const Var& s)
{
    const double sv = s.scalar();
    const std::size_t is = s.index();
    return s.tape().record(detail::scalar_matrix(1.0 / sv), {s}, [is](Tape& t, std::size_t self) {
        const double x = t.value(is)(0, 0);
        t.grad_buffer(is)(0, 0) -= t.grad(self)(0, 0) / (x * x);
    }, "reciprocal");
}

inline Var sum(const Var& a)
{
    const std::size_t ia = a.index();
    return a.tape().record(detail::scalar_matrix(a.value().sum()), {a}, [ia](Tape& t, std::size_t self) {
        t.grad_buffer(ia).array() += t.grad(self)(0, 0);
    }, "sum");
}

inline Var mean(const Var& a)
{
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

/// Column j of a as an m×1 matrix.
inline Var column(const Var& a, Eigen::Index j)
{
    if (j < 0 || j >= a.cols()) {
        throw ShapeError("column: index " + std::to_string(j) + " out of range for " + shape_string(a.value()));
    }
    const std::size_t ia = a.index();
    Matrix out = a.value().col(j);
    return a.tape().record(std::move(out), {a}, [ia, j](Tape& t, std::size_t self) {
        t.grad_buffer(ia).col(j) += t.grad(self).col(0);
    }, "column");
}

/// Rows of a followed by rows of b.
inline Var vstack(const Var& a, const Var& b)
{
    if (a.cols() != b.cols()) {
        throw ShapeError("vstack: column mismatch " + shape_string(a.value()) + " / " + shape_string(b.value()));
    }
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a.value();
    out.bottomRows(b.rows()) = b.value();
    const std::size_t ia = a.index(), ib = b.index();
    const Eigen::Index ra = a.rows(), rb = b.rows();
    return a.tape().record(std::move(out), {a, b}, [ia, ib, ra, rb](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (detail::wants(t, ia)) t.grad_buffer(ia) += g.topRows(ra);
        if (detail::wants(t, ib)) t.grad_buffer(ib) += g.bottomRows(rb);
    }, "vstack");
}

/// Row-wise inner products, m×1.
inline Var row_dot(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "row_dot");
    Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
    const std::size_t ia = a.index(), ib = b.index();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (detail::wants(t, ia)) t.grad_buffer(ia).array() += t.value(ib).array().colwise() * g.col(0).array();
        if (detail::wants(t, ib)) t.grad_buffer(ib).array() += t.value(ia).array().colwise() * g.col(0).array();
    }, "row_dot");
}

// ---------------------------------------------------------------------------
// Activations

enum class ActivationKind { elu, relu, leaky_relu };

struct Activation {
    ActivationKind kind = ActivationKind::elu;
    double slope = 0.2; // negative-side slope, leaky_relu only

    static Activation elu() { return {ActivationKind::elu, 0.0}; }
    static Activation relu() { return {ActivationKind::relu, 0.0}; }
    static Activation leaky_relu(double slope) { return {ActivationKind::leaky_relu, slope}; }
};

inline double activate(double x, const Activation& act)
{
    switch (act.kind) {
    case ActivationKind::elu:
        return x > 0.0 ? x : std::expm1(x);
    case ActivationKind::relu:
        return x > 0.0 ? x : 0.0;
    case ActivationKind::leaky_relu:
        return x >= 0.0 ? x : act.slope * x;
    }
    return x;
}

/// Derivative; ELU uses 1 at the origin.
inline double activate_derivative(double x, const Activation& act)
{
    switch (act.kind) {
    case ActivationKind::elu:
        return x >= 0.0 ? 1.0 : std::exp(x);
    case ActivationKind::relu:
        return x > 0.0 ? 1.0 : 0.0;
    case ActivationKind::leaky_relu:
        return x >= 0.0 ? 1.0 : act.slope;
    }
    return 1.0;
}

inline Matrix apply_activation(const Matrix& x, const Activation& act)
{
    return x.unaryExpr([act](double v) { return activate(v, act); });
}

inline Var activation(const Var& x, const Activation& act)
{
    const std::size_t ix = x.index();
    return x.tape().record(apply_activation(x.value(), act), {x}, [ix, act](Tape& t, std::size_t self) {
        const Matrix& in = t.value(ix);
        t.grad_buffer(ix).array() +=
            t.grad(self).array() * in.unaryExpr([act](double v) { return activate_derivative(v, act); }).array();
    }, "activation");
}

// ---------------------------------------------------------------------------
// Feature geometry

inline constexpr double kMinRowNorm = 1e-12;

/// Scales every row to unit L2 norm. The gradient is projected onto the
/// tangent space of the sphere at each output row.
inline Var row_normalize(const Var& x)
{
    const Matrix& v = x.value();
    Vector norms = v.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i) {
        if (!(norms(i) >= kMinRowNorm)) {
            throw NumericalError("row_normalize: row " + std::to_string(i) + " has near-zero norm (" +
                                 std::to_string(norms(i)) + ")");
        }
    }
    Matrix out = v.array().colwise() / norms.array();
    const std::size_t ix = x.index();
    return x.tape().record(std::move(out), {x}, [ix, norms](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad(self);
        Vector radial = y.cwiseProduct(g).rowwise().sum();
        Matrix tangent = g - (y.array().colwise() * radial.array()).matrix();
        t.grad_buffer(ix).array() += tangent.array().colwise() / norms.array();
    }, "row_normalize");
}

/// Uncentered second moment (1/m)·ZᵀZ, exactly symmetric.
inline Var second_moment(const Var& z)
{
    const Eigen::Index m = z.rows();
    if (m < 1) {
        throw ShapeError("second_moment: empty batch");
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    Matrix s = Matrix::Zero(z.cols(), z.cols());
    s.selfadjointView<Eigen::Lower>().rankUpdate(z.value().transpose(), inv_m);
    s = s.selfadjointView<Eigen::Lower>();
    const std::size_t iz = z.index();
    return z.tape().record(std::move(s), {z}, [iz, inv_m](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix sym = (g + g.transpose()) * inv_m;
        t.grad_buffer(iz).noalias() += t.value(iz) * sym;
    }, "second_moment");
}

/// Zᵀ·diag(w)·Z for an m×1 weight column w, exactly symmetric.
inline Var weighted_gram(const Var& z, const Var& w)
{
    if (w.cols() != 1 || w.rows() != z.rows()) {
        throw ShapeError("weighted_gram: weights " + shape_string(w.value()) + " do not match " +
                         shape_string(z.value()));
    }
    const Matrix& zv = z.value();
    Matrix weighted = zv.array().colwise() * w.value().col(0).array();
    Matrix s = Matrix::Zero(zv.cols(), zv.cols());
    s.triangularView<Eigen::Lower>() = zv.transpose() * weighted;
    s = s.selfadjointView<Eigen::Lower>();
    const std::size_t iz = z.index(), iw = w.index();
    return z.tape().record(std::move(s), {z, w}, [iz, iw](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& zv = t.value(iz);
        const Matrix& wv = t.value(iw);
        Matrix sym = g + g.transpose();
        Matrix zs = zv * sym; // m×d
        if (detail::wants(t, iz)) {
            t.grad_buffer(iz).array() += zs.array().colwise() * wv.col(0).array();
        }
        if (detail::wants(t, iw)) {
            // d/dw_i of z_iᵀ G z_i
            t.grad_buffer(iw).col(0) += 0.5 * zs.cwiseProduct(zv).rowwise().sum();
        }
    }, "weighted_gram");
}

/// I + c·a for a square a.
inline Var identity_plus(const Var& a, double c)
{
    if (a.rows() != a.cols()) {
        throw ShapeError("identity_plus: matrix is not square (" + shape_string(a.value()) + ")");
    }
    Matrix out = c * a.value();
    out.diagonal().array() += 1.0;
    const std::size_t ia = a.index();
    return a.tape().record(std::move(out), {a}, [ia, c](Tape& t, std::size_t self) {
        t.grad_buffer(ia) += c * t.grad(self);
    }, "identity_plus");
}

/// I + a for a square a.
inline Var identity_plus(const Var& a) { return identity_plus(a, 1.0); }

/// log det of the symmetric part of an SPD matrix, via Cholesky.
inline Var logdet_spd(const Var& a)
{
    if (a.rows() != a.cols()) {
        throw ShapeError("logdet_spd: matrix is not square (" + shape_string(a.value()) + ")");
    }
    Matrix sym = 0.5 * (a.value() + a.value().transpose());
    LogdetResult res = logdet_cholesky(sym);
    const std::size_t ia = a.index();
    Matrix inverse = std::move(res.inverse);
#ifdef NMCE_INJECT_LOGDET_FAULT
    inverse *= 1.01;
#endif
    return a.tape().record(detail::scalar_matrix(res.value), {a},
                           [ia, inverse = std::move(inverse)](Tape& t, std::size_t self) {
                               t.grad_buffer(ia) += t.grad(self)(0, 0) * inverse;
                           },
                           "logdet_spd");
}

// ---------------------------------------------------------------------------
// Cluster head

/// Row-wise softmax of (logits + noise) / temperature.
inline Var softmax_with_noise(const Var& logits, double temperature, const Matrix& noise)
{
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("gumbel_softmax: temperature must be positive");
    }
    require_same_shape(logits.value(), noise, "gumbel_softmax noise");
    Matrix y = (logits.value() + noise) / temperature;
    Vector row_max = y.rowwise().maxCoeff();
    y = (y.colwise() - row_max).array().exp();
    Vector row_sum = y.rowwise().sum();
    y.array().colwise() /= row_sum.array();
    const std::size_t il = logits.index();
    return logits.tape().record(std::move(y), {logits}, [il, temperature](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad(self);
        Vector inner = y.cwiseProduct(g).rowwise().sum();
        Matrix gs = y.array() * (g.colwise() - inner).array();
        t.grad_buffer(il) += gs / temperature;
    }, "gumbel_softmax");
}

inline Var softmax_rows(const Var& logits)
{
    return softmax_with_noise(logits, 1.0, Matrix::Zero(logits.rows(), logits.cols()));
}

/// Standard Gumbel(0, 1) draws.
inline Matrix sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    Matrix g(rows, cols);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        double u = uniform(rng);
        while (u <= 0.0) {
            u = uniform(rng);
        }
        g.data()[i] = -std::log(-std::log(u));
    }
    return g;
}

/// Soft Gumbel-Softmax sample in train mode; plain softmax(logits) otherwise,
/// with neither noise nor temperature.
inline Var gumbel_softmax(const Var& logits, double temperature, Rng& rng, bool train_mode)
{
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("gumbel_softmax: temperature must be positive");
    }
    if (!train_mode) {
        return softmax_rows(logits);
    }
    return softmax_with_noise(logits, temperature, sample_gumbel(logits.rows(), logits.cols(), rng));
}

} // namespace nmce::ad
