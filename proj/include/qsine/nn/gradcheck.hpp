#pragma once

#include <qsine/nn/network.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace qsine::nn {

/// Loss over network outputs: returns the scalar loss and fills one gradient
/// tensor per output.
using LossFn = std::function<double(const std::vector<Tensor<double>>& outputs, std::vector<Tensor<double>>& grads)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps near-zero
/// gradients from dominating with pure round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences (step h) against analytic gradients, on at most
/// `per_tensor` evenly spaced entries of every parameter tensor.
inline GradCheckReport finite_diff_check(Network<double>& net, const LossFn& loss, const Tensor<double>& x,
                                         Mode mode = Mode::train, std::size_t per_tensor = 24, double h = 1e-5) {
    std::vector<Tensor<double>> grads;
    net.zero_grad();
    loss(net.forward(x, mode), grads);
    net.backward(grads);

    GradCheckReport report;
    for (auto* p : net.params()) {
        const std::size_t n = p->value.size();
        const std::size_t stride = std::max<std::size_t>(1, n / per_tensor);
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = p->value.data[i];
            std::vector<Tensor<double>> scratch;
            p->value.data[i] = saved + h;
            const double up = loss(net.forward(x, mode), scratch);
            p->value.data[i] = saved - h;
            const double down = loss(net.forward(x, mode), scratch);
            p->value.data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            report.max_rel_error = std::max(report.max_rel_error, relative_error(p->grad.data[i], numeric));
            ++report.checked;
        }
    }
    return report;
}

/// Same check for the gradient w.r.t. the network input.
inline GradCheckReport finite_diff_check_input(Network<double>& net, const LossFn& loss, Tensor<double> x,
                                               Mode mode = Mode::train, std::size_t samples = 48, double h = 1e-5) {
    std::vector<Tensor<double>> grads;
    loss(net.forward(x, mode), grads);
    const Tensor<double> gx = net.backward(grads);
    GradCheckReport report;
    const std::size_t stride = std::max<std::size_t>(1, x.size() / samples);
    for (std::size_t i = 0; i < x.size(); i += stride) {
        const double saved = x.data[i];
        std::vector<Tensor<double>> scratch;
        x.data[i] = saved + h;
        const double up = loss(net.forward(x, mode), scratch);
        x.data[i] = saved - h;
        const double down = loss(net.forward(x, mode), scratch);
        x.data[i] = saved;
        report.max_rel_error = std::max(report.max_rel_error, relative_error(gx.data[i], (up - down) / (2.0 * h)));
        ++report.checked;
    }
    return report;
}

} // namespace qsine::nn
