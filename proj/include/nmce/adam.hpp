#pragma once

#include "nmce/linalg.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmce {

struct AdamState {
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
    std::int64_t step_count = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update. Weight decay is decoupled: parameters shrink
/// by lr·weight_decay·θ independently of the gradient moments.
inline void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state, double lr,
                      double weight_decay)
{
    if (params.size() != grads.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    }
    if (!(lr >= 0.0)) {
        throw std::invalid_argument("adam_step: learning rate must be non-negative");
    }
    if (state.first_moment.empty()) {
        for (const Matrix& p : params) {
            state.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
            state.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
    }

    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double correction1 = 1.0 - std::pow(state.beta1, t);
    const double correction2 = 1.0 - std::pow(state.beta2, t);

    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = params[k];
        const Matrix& g = grads[k];
        require_same_shape(p, g, "adam_step");
        Matrix& m = state.first_moment[k];
        Matrix& v = state.second_moment[k];
        require_same_shape(p, m, "adam_step state");

        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        if (lr == 0.0) {
            continue;
        }
        if (weight_decay != 0.0) {
            p *= 1.0 - lr * weight_decay;
        }
        const double eps = state.eps;
        p.array() -= lr * ((m.array() / correction1) / ((v.array() / correction2).sqrt() + eps));
    }
}

} // namespace nmce
