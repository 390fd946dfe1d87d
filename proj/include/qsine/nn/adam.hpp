#pragma once

#include <qsine/errors.hpp>
#include <qsine/nn/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

namespace qsine::nn {

/// Adam with bias correction. `lr` may be rescaled between steps for
/// plateau-based learning-rate reduction.
template <typename T>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step_count = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

template <typename T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& st) {
    if (st.m.empty()) {
        for (const auto* p : params) {
            st.m.emplace_back(p->value.size(), 0.0);
            st.v.emplace_back(p->value.size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state does not mirror parameters");
    }
    ++st.step_count;
    const double t = static_cast<double>(st.step_count);
    const double c1 = 1.0 - std::pow(st.beta1, t);
    const double c2 = 1.0 - std::pow(st.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        if (p.grad.size() != p.value.size() || st.m[k].size() != p.value.size()) {
            throw ShapeError("adam_step: gradient/moment shape mismatch for " + p.role);
        }
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = static_cast<double>(p.grad.data[i]);
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            p.value.data[i] -= static_cast<T>(st.lr * mh / (std::sqrt(vh) + st.eps));
        }
    }
}

} // namespace qsine::nn
