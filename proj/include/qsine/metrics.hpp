#pragma once

#include <qsine/errors.hpp>
#include <qsine/signal.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

namespace qsine {

/// Per-parameter losses (or thresholds) in the order amplitude, frequency, phase.
struct LossVector {
    double amp = 0.0;
    double freq = 0.0;
    double phase = 0.0;
};

/// Asymmetric count loss: exponential for under-estimates, quadratic for
/// over-estimates. Accepts a fractional estimate.
inline double detection_loss(double m, double mhat) {
    if (m >= mhat) {
        return std::expm1(m - mhat);
    }
    const double d = m - mhat;
    return 0.5 * d * d;
}

/// d/d(mhat) of detection_loss.
inline double detection_loss_grad(double m, double mhat) {
    if (m >= mhat) {
        return -std::exp(m - mhat);
    }
    return mhat - m;
}

/// (1/p) ||c - chat||^2
inline double multi_mse(std::span<const double> c, std::span<const double> chat) {
    if (c.size() != chat.size() || c.empty()) {
        throw ParameterError("multi_mse: vectors must have equal nonzero length");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const double d = c[i] - chat[i];
        acc += d * d;
    }
    return acc / static_cast<double>(c.size());
}

/// Symmetric nearest-neighbour absolute distance between two value sets.
inline double chamfer(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) {
        throw ParameterError("chamfer: both sets must be nonempty");
    }
    auto one_way = [](std::span<const double> from, std::span<const double> to) {
        double acc = 0.0;
        for (double x : from) {
            double best = std::numeric_limits<double>::infinity();
            for (double y : to) {
                best = std::min(best, std::abs(x - y));
            }
            acc += best;
        }
        return acc;
    };
    return one_way(a, b) + one_way(b, a);
}

/// Chamfer distance that tolerates one empty side by charging 2 * sum|values|
/// of the nonempty side.
inline double chamfer_or_penalty(std::span<const double> a, std::span<const double> b) {
    if (a.empty() && b.empty()) {
        return 0.0;
    }
    if (a.empty() || b.empty()) {
        const auto& side = a.empty() ? b : a;
        double acc = 0.0;
        for (double v : side) {
            acc += std::abs(v);
        }
        return 2.0 * acc;
    }
    return chamfer(a, b);
}

inline void require_positive(const LossVector& t, const char* who) {
    if (!(t.amp > 0.0 && t.freq > 0.0 && t.phase > 0.0)) {
        throw ParameterError(std::string(who) + ": thresholds must be positive");
    }
}

/// (1/m) * (amp/amp_thr + freq/freq_thr + phase/phase_thr)
inline double effective_loss(const LossVector& ell, const LossVector& thresholds, std::size_t m) {
    require_positive(thresholds, "effective_loss");
    if (m < 1) {
        throw ParameterError("effective_loss: m must be >= 1");
    }
    return (ell.amp / thresholds.amp + ell.freq / thresholds.freq + ell.phase / thresholds.phase) /
           static_cast<double>(m);
}

/// Chamfer distance per parameter, each scaled by 1/sqrt(threshold), combined
/// with the 1/m factor of the effective loss (m = true count).
inline double normalized_chamfer(const ParameterSet& truth, const ParameterSet& est, const LossVector& thresholds) {
    require_positive(thresholds, "normalized_chamfer");
    if (!truth.consistent() || !est.consistent() || truth.count() == 0) {
        throw ParameterError("normalized_chamfer: malformed parameter sets");
    }
    const double ca = chamfer_or_penalty(truth.amps, est.amps);
    const double cf = chamfer_or_penalty(truth.freqs, est.freqs);
    const double cp = chamfer_or_penalty(truth.phases, est.phases);
    return (ca / std::sqrt(thresholds.amp) + cf / std::sqrt(thresholds.freq) + cp / std::sqrt(thresholds.phase)) /
           static_cast<double>(truth.count());
}

/// Mean squared error of aligned parameter vectors, returned per parameter.
inline LossVector parameter_mse(const ParameterSet& truth, const ParameterSet& est) {
    if (truth.count() != est.count() || !truth.consistent() || !est.consistent()) {
        throw ParameterError("parameter_mse: sets must have equal counts");
    }
    return {multi_mse(truth.amps, est.amps), multi_mse(truth.freqs, est.freqs),
            multi_mse(truth.phases, est.phases)};
}

inline double to_db(double linear) { return 10.0 * std::log10(linear); }

} // namespace qsine
