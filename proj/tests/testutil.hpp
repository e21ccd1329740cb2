#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtgc/rng.hpp"
#include "mtgc/tensor.hpp"

namespace mtgc::test {

// Central-difference gradient check: perturbs every element of `target`,
// recomputes the scalar loss, and compares against the autodiff gradient.
// Returns the worst relative error over all probed elements.
inline double grad_check(mtgc::Tensor& target, const std::function<mtgc::Tensor()>& loss_fn,
                         double eps = 1e-2, int max_probes = 64) {
    mtgc::Tensor loss = loss_fn();
    loss.backward();
    std::vector<float> grad = target.grad().empty()
                                  ? std::vector<float>(size_t(target.numel()), 0.0f)
                                  : target.grad();

    double gscale = 0.0;
    for (float g : grad) gscale = std::max(gscale, double(std::abs(g)));
    const double negligible = 0.02 * gscale + 1e-6;

    double worst = 0.0;
    const int64_t n = target.numel();
    const int64_t step = std::max<int64_t>(1, n / max_probes);
    for (int64_t i = 0; i < n; i += step) {
        const float old = target.data()[i];
        target.data()[i] = float(old + eps);
        const double up = loss_fn().item();
        target.data()[i] = float(old - eps);
        const double down = loss_fn().item();
        target.data()[i] = old;
        const double fd = (up - down) / (2.0 * eps);
        const double ad = grad[size_t(i)];
        // float32 FD noise swamps coordinates whose true gradient is tiny
        // relative to the rest of the vector; skip those.
        if (std::abs(fd) < negligible && std::abs(ad) < negligible) continue;
        const double denom = std::max({std::abs(fd), std::abs(ad), negligible});
        worst = std::max(worst, std::abs(fd - ad) / denom);
    }
    return worst;
}

inline double max_abs_diff(const mtgc::Tensor& a, const mtgc::Tensor& b) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); i++)
        worst = std::max(worst, double(std::abs(a.data()[i] - b.data()[i])));
    return worst;
}

inline double max_abs(const std::vector<float>& v) {
    double worst = 0.0;
    for (float x : v) worst = std::max(worst, double(std::abs(x)));
    return worst;
}

}  // namespace mtgc::test
