#pragma once

// Central finite-difference verification of reverse-mode gradients.
// Also flags non-smooth points: forward and backward one-sided differences
// must agree, otherwise the coordinate is reported as failed with a large
// error value.

#include <functional>

#include "promode/tensor.hpp"

namespace promode {

struct GradCheckResult {
    double max_rel_error = 0.0;
    size_t worst_input = 0;
    size_t worst_coord = 0;
    bool ok(double tol) const { return max_rel_error < tol; }
};

// f must rebuild the graph from the current contents of `inputs` on every
// call and return a scalar tensor.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  double step = 1e-5) {
    for (auto& in : inputs) in.set_requires_grad(true);
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> out = f();
    if (!std::isfinite(out.item()))
        throw Error("grad_check: non-finite function value at base point");
    out.backward();

    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) analytic.push_back(in.grad());

    GradCheckResult res;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& x = inputs[ii].data();
        for (size_t ci = 0; ci < x.size(); ++ci) {
            double orig = x[ci];
            x[ci] = orig + step;
            double fp = f().item();
            x[ci] = orig - step;
            double fm = f().item();
            x[ci] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw Error("grad_check: non-finite value at input " +
                            std::to_string(ii) + " coord " + std::to_string(ci));
            double f0 = out.item();
            double numeric = (fp - fm) / (2.0 * step);
            double fwd = (fp - f0) / step;
            double bwd = (f0 - fm) / step;
            double a = analytic[ii][ci];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            double err = std::abs(a - numeric) / denom;
            // one-sided differences disagreeing badly indicates a kink
            double side = std::abs(fwd - bwd) /
                          std::max({std::abs(fwd), std::abs(bwd), 1.0});
            if (side > 0.5) err = std::max(err, side);
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_input = ii;
                res.worst_coord = ci;
            }
        }
    }
    return res;
}

// Same check restricted to `samples_per_tensor` deterministically sampled
// coordinates of each input, for large parameter sets (whole models) where a
// full coordinate sweep would be too slow. Every tensor is still touched.
inline GradCheckResult grad_check_sampled(const std::function<Tensor<double>()>& f,
                                          std::vector<Tensor<double>> inputs,
                                          size_t samples_per_tensor, uint64_t seed,
                                          double step = 1e-5) {
    for (auto& in : inputs) in.set_requires_grad(true);
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> out = f();
    if (!std::isfinite(out.item()))
        throw Error("grad_check: non-finite function value at base point");
    out.backward();

    GradCheckResult res;
    double f0 = out.item();
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& x = inputs[ii].data();
        const auto& analytic = inputs[ii].grad();
        Rng rng(mix_seed(seed, 0x9c, ii));
        size_t n = std::min(samples_per_tensor, x.size());
        std::vector<size_t> coords(x.size());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        rng.shuffle(coords.begin(), coords.end());
        for (size_t k = 0; k < n; ++k) {
            size_t ci = coords[k];
            double orig = x[ci];
            x[ci] = orig + step;
            double fp = f().item();
            x[ci] = orig - step;
            double fm = f().item();
            x[ci] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw Error("grad_check: non-finite value at input " +
                            std::to_string(ii) + " coord " + std::to_string(ci));
            double numeric = (fp - fm) / (2.0 * step);
            double fwd = (fp - f0) / step;
            double bwd = (f0 - fm) / step;
            double a = analytic[ci];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            double err = std::abs(a - numeric) / denom;
            double side = std::abs(fwd - bwd) /
                          std::max({std::abs(fwd), std::abs(bwd), 1.0});
            if (side > 0.5) err = std::max(err, side);
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_input = ii;
                res.worst_coord = ci;
            }
        }
    }
    return res;
}

} // namespace promode
