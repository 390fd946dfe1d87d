#pragma once

#include <qsine/errors.hpp>

#include <cmath>
#include <numbers>

namespace qsine {

/// Principal branch W0 of the Lambert W function: W(x) e^W(x) = x, x >= -1/e.
/// Halley iteration from a branch-point series near -1/e, log1p below e and
/// the two-term asymptote above.
inline double lambert_w(double x) {
    constexpr double inv_e = 1.0 / std::numbers::e;
    if (std::isnan(x) || x < -inv_e) {
        throw DomainError("lambert_w: argument below -1/e");
    }
    if (x == 0.0) {
        return 0.0;
    }
    if (x == -inv_e) {
        return -1.0;
    }
    if (std::isinf(x)) {
        return x;
    }

    double w;
    if (x < -0.25) {
        const double p = std::sqrt(2.0 * (std::numbers::e * x + 1.0));
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p;
    } else if (x < std::numbers::e) {
        w = std::log1p(x);
        w *= 1.0 - std::log1p(w) / (2.0 + w);
    } else {
        const double l = std::log(x);
        w = l - std::log(l);
    }

    for (int iter = 0; iter < 64; ++iter) {
        const double ew = std::exp(w);
        const double f = w * ew - x;
        const double wp1 = w + 1.0;
        if (wp1 == 0.0) {
            break;
        }
        const double step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= step;
        if (std::abs(step) <= 1e-15 * (1.0 + std::abs(w))) {
            break;
        }
    }
    return w;
}

} // namespace qsine
