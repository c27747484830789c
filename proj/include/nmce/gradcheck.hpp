#pragma once

#include "nmce/autodiff.hpp"
#include "nmce/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace nmce {

/// Builds a scalar loss on `tape` from one variable per parameter matrix.
using LossBuilder = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct GradCheckOptions {
    double h = 1e-5;
    /// Denominator floor: rel = |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    double abs_floor = 1e-3;
    /// Coordinates compared; all of them when the parameters have fewer entries.
    std::size_t max_coordinates = 256;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates_checked = 0;
    std::size_t worst_param = 0;
    Eigen::Index worst_entry = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

namespace detail {

inline double evaluate_loss(const LossBuilder& loss_fn, const std::vector<Matrix>& params)
{
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params) {
        vars.push_back(tape.variable(p));
    }
    return loss_fn(tape, vars).scalar();
}

} // namespace detail

/// Compares backward-pass gradients against central differences and returns
/// the worst relative error over the sampled coordinates.
inline GradCheckResult finite_diff_check(const LossBuilder& loss_fn, const std::vector<Matrix>& params,
                                         const GradCheckOptions& opts = {})
{
    if (!(opts.h > 0.0)) {
        throw std::invalid_argument("finite_diff_check: step h must be positive");
    }

    std::vector<Matrix> analytic;
    {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        for (const Matrix& p : params) {
            vars.push_back(tape.variable(p));
        }
        ad::Var loss = loss_fn(tape, vars);
        tape.backward(loss);
        for (const ad::Var& v : vars) {
            analytic.push_back(v.grad());
        }
    }

    struct Coord {
        std::size_t param;
        Eigen::Index entry;
    };
    std::vector<Coord> coords;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (Eigen::Index e = 0; e < params[k].size(); ++e) {
            coords.push_back({k, e});
        }
    }
    if (coords.size() > opts.max_coordinates) {
        Rng rng(derive_seed(opts.seed, 0));
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opts.max_coordinates);
    }

    GradCheckResult result;
    std::vector<Matrix> probe = params;
    for (const Coord& c : coords) {
        double& x = probe[c.param].data()[c.entry];
        const double saved = x;
        x = saved + opts.h;
        const double up = detail::evaluate_loss(loss_fn, probe);
        x = saved - opts.h;
        const double down = detail::evaluate_loss(loss_fn, probe);
        x = saved;

        const double numeric = (up - down) / (2.0 * opts.h);
        const double exact = analytic[c.param].data()[c.entry];
        const double denom = std::max({std::abs(exact), std::abs(numeric), opts.abs_floor});
        const double rel = std::abs(exact - numeric) / denom;
        ++result.coordinates_checked;
        if (rel > result.max_rel_error || !std::isfinite(rel)) {
            result.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
            result.worst_param = c.param;
            result.worst_entry = c.entry;
            result.worst_analytic = exact;
            result.worst_numeric = numeric;
        }
    }
    return result;
}

} // namespace nmce
