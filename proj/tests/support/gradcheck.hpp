#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bfa/tensor.hpp"

namespace bfa::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;  // per-leaf vector relative error, worst leaf
    bool ok(double tol = 1e-3) const { return max_rel_error <= tol; }
};

// Central finite-difference check. `forward` must rebuild the graph on the
// given tape and return a scalar loss; `leaves` are the tensors whose
// analytic gradients get compared against (f(x+eps) - f(x-eps)) / (2 eps).
// The error per leaf is ||analytic - numeric||_2 / max(||analytic||, ||numeric||, 1e-4).
inline GradCheckResult gradcheck(const std::vector<bfa::Tensor>& leaves,
                                 const std::function<bfa::Tensor(bfa::Tape&)>& forward,
                                 float eps_scale = 1e-2f) {
    using bfa::Tape;
    using bfa::Tensor;
    GradCheckResult result;

    Tape tape;
    for (auto leaf : leaves) {
        Tensor l = leaf;
        l.set_requires_grad(true);
        l.zero_grad();
    }
    Tensor loss = forward(tape);
    tape.backward(loss);

    for (auto leaf : leaves) {
        const std::int64_t n = leaf.numel();
        std::vector<double> analytic(static_cast<std::size_t>(n), 0.0);
        if (leaf.has_grad()) {
            for (std::int64_t i = 0; i < n; ++i) analytic[static_cast<std::size_t>(i)] = leaf.grad()[static_cast<std::size_t>(i)];
        }
        std::vector<double> numeric(static_cast<std::size_t>(n), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t idx = static_cast<std::size_t>(i);
            const float saved = leaf.data()[idx];
            const float eps = eps_scale * std::max(1.0f, std::fabs(saved));
            Tape t_plus;
            leaf.data()[idx] = saved + eps;
            const double f_plus = forward(t_plus).item();
            Tape t_minus;
            leaf.data()[idx] = saved - eps;
            const double f_minus = forward(t_minus).item();
            leaf.data()[idx] = saved;
            numeric[idx] = (f_plus - f_minus) / (2.0 * eps);
        }
        double na = 0.0, nn = 0.0, nd = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t idx = static_cast<std::size_t>(i);
            na += analytic[idx] * analytic[idx];
            nn += numeric[idx] * numeric[idx];
            const double d = analytic[idx] - numeric[idx];
            nd += d * d;
        }
        const double rel = std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nn), 1e-4});
        result.max_rel_error = std::max(result.max_rel_error, rel);
    }
    return result;
}

inline bool all_finite(const bfa::Tensor& t) {
    for (float v : t.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace bfa::testing
