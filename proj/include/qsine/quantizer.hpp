#pragma once

#include <qsine/errors.hpp>
#include <qsine/signal.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace qsine {

/// Uniform mid-rise quantizer with 2^b levels spanning [-1, 1] and unbounded
/// outer bins. Bins are right-closed: an input equal to a threshold maps to
/// the lower level.
struct QuantizerSpec {
    int bits = 1;
    std::vector<double> levels;     // 2^b ascending
    std::vector<double> thresholds; // 2^b - 1 ascending midpoints

    [[nodiscard]] double apply(double v) const {
        const auto it = std::lower_bound(thresholds.begin(), thresholds.end(), v);
        return levels[static_cast<std::size_t>(it - thresholds.begin())];
    }
};

inline QuantizerSpec make_quantizer(int bits) {
    if (bits < 1 || bits > 24) {
        throw ParameterError("make_quantizer: bits must be in [1, 24]");
    }
    QuantizerSpec q;
    q.bits = bits;
    const std::size_t count = std::size_t{1} << bits;
    const double step = 2.0 / static_cast<double>(count - 1);
    q.levels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        q.levels[i] = -1.0 + step * static_cast<double>(i);
    }
    // exact symmetry: levels[i] == -levels[count - 1 - i]
    for (std::size_t i = 0; i < count / 2; ++i) {
        q.levels[count - 1 - i] = -q.levels[i];
    }
    q.thresholds.resize(count - 1);
    for (std::size_t k = 0; k + 1 < count; ++k) {
        q.thresholds[k] = 0.5 * (q.levels[k] + q.levels[k + 1]);
    }
    return q;
}

/// Quantizes real and imaginary parts independently.
inline ComplexFrame quantize(const ComplexFrame& frame, const QuantizerSpec& spec) {
    ComplexFrame out(frame.size());
    for (std::size_t n = 0; n < frame.size(); ++n) {
        const double re = frame[n].real();
        const double im = frame[n].imag();
        if (!std::isfinite(re) || !std::isfinite(im)) {
            throw InputError("quantize: non-finite sample");
        }
        out[n] = cplx{spec.apply(re), spec.apply(im)};
    }
    return out;
}

namespace detail {
inline double std_normal_pdf(double z) {
    if (std::isinf(z)) {
        return 0.0;
    }
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}
} // namespace detail

/// Bussgang gain G = E[x Q(x)] / E[x^2] for x ~ Normal(0, sigma^2), closed form.
inline double bussgang_gain(const QuantizerSpec& spec, double sigma) {
    if (!(sigma > 0.0)) {
        throw ParameterError("bussgang_gain: sigma must be positive");
    }
    const std::size_t count = spec.levels.size();
    double cross = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
        const double lo = k == 0 ? -INFINITY : spec.thresholds[k - 1];
        const double hi = k + 1 == count ? INFINITY : spec.thresholds[k];
        cross += spec.levels[k] * (detail::std_normal_pdf(lo / sigma) - detail::std_normal_pdf(hi / sigma));
    }
    cross *= sigma;
    return cross / (sigma * sigma);
}

/// Per-component standard deviation of a unit-power complex Gaussian sample.
inline constexpr double kUnitPowerSigma = 1.0 / std::numbers::sqrt2;

/// Inverts a scalar Bussgang gain: x_lin = (X[:,0] + j X[:,1]) / gain.
inline ComplexFrame bussgang_linearize(const IQFrame& x, double gain) {
    if (!(gain != 0.0) || !std::isfinite(gain)) {
        throw ParameterError("bussgang_linearize: gain must be finite and nonzero");
    }
    ComplexFrame out = from_iq(x);
    for (auto& s : out) {
        s /= gain;
    }
    return out;
}

inline ComplexFrame bussgang_linearize(const IQFrame& x, const QuantizerSpec& spec) {
    return bussgang_linearize(x, bussgang_gain(spec, kUnitPowerSigma));
}

} // namespace qsine
