#pragma once

#include <qsine/errors.hpp>
#include <qsine/lambert_w.hpp>
#include <qsine/metrics.hpp>

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

namespace qsine {

// Learning thresholds: the expected loss of the best input-independent
// (constant) estimator under the data generator's output distribution.

/// (1/M) sum_{m=1..M} detection_loss(m, mhat), the expected loss of a constant
/// estimate when m is uniform on {1..M}.
inline double mean_detection_loss(std::size_t M, double mhat) {
    double acc = 0.0;
    for (std::size_t m = 1; m <= M; ++m) {
        acc += detection_loss(static_cast<double>(m), mhat);
    }
    return acc / static_cast<double>(M);
}

struct DetectionThreshold {
    double mhat_star = 0.0;
    double loss = 0.0;
};

/// Stationary point of the mean detection loss inside [k, k + 1], via
///   mhat = W( (1/k) sum_{m=k+1..M} e^{m - alpha} ) + alpha,  alpha = (k + 1) / 2.
inline double detection_stationary_point(std::size_t M, std::size_t k) {
    const double alpha = (static_cast<double>(k) + 1.0) / 2.0;
    double sum = 0.0;
    for (std::size_t m = k + 1; m <= M; ++m) {
        sum += std::exp(static_cast<double>(m) - alpha);
    }
    return lambert_w(sum / static_cast<double>(k)) + alpha;
}

/// Minimizer of the mean detection loss over mhat in [1, M], with the loss
/// evaluated at the fractional estimate. The loss is convex and piecewise
/// smooth with kinks at the integers, so the minimizer is either a
/// stationary point inside some [k, k + 1] or an integer.
inline DetectionThreshold detection_threshold(std::size_t M) {
    if (M < 1) {
        throw ParameterError("detection_threshold: M must be >= 1");
    }
    DetectionThreshold best{1.0, mean_detection_loss(M, 1.0)};
    auto consider = [&](double mhat) {
        const double loss = mean_detection_loss(M, mhat);
        if (loss < best.loss) {
            best = {mhat, loss};
        }
    };
    for (std::size_t k = 1; k <= M; ++k) {
        consider(static_cast<double>(k));
        const double s = detection_stationary_point(M, k);
        if (s > static_cast<double>(k) && s < static_cast<double>(k) + 1.0 && s <= static_cast<double>(M)) {
            consider(s);
        }
    }
    return best;
}

/// 1/64 + (1 - 1/m) * 5/(2N) * (1 - 2/pi)
inline double frequency_threshold(std::size_t m, std::size_t N) {
    if (m < 1 || N < 2) {
        throw ParameterError("frequency_threshold: need m >= 1 and N >= 2");
    }
    const double jitter_var = 5.0 / (2.0 * static_cast<double>(N)) * (1.0 - 2.0 / std::numbers::pi);
    return 1.0 / 64.0 + (1.0 - 1.0 / static_cast<double>(m)) * jitter_var;
}

/// Mean of the folded-normal spacing jitter, sqrt(5 / (N pi)).
inline double mean_spacing_jitter(std::size_t N) {
    return std::sqrt(5.0 / (static_cast<double>(N) * std::numbers::pi));
}

/// Constant frequency estimate for m sinusoids.
inline std::vector<double> mean_frequency_estimator(std::size_t m, std::size_t N) {
    if (m < 1) {
        throw ParameterError("mean_frequency_estimator: m must be >= 1");
    }
    std::vector<double> f(m);
    for (std::size_t i = 0; i < m; ++i) {
        f[i] = 0.125 + static_cast<double>(i) / static_cast<double>(N) + (i > 0 ? mean_spacing_jitter(N) : 0.0);
    }
    return f;
}

struct MeanAndLoss {
    double mean = 0.0;
    double loss = 0.0;
};

/// Amplitudes ~ U(0.1, 1.0): mean 0.55, variance 0.9^2 / 12.
inline MeanAndLoss amplitude_threshold() { return {0.55, 0.9 * 0.9 / 12.0}; }

/// Phases ~ U(0, 2 pi): mean pi, variance pi^2 / 3.
inline MeanAndLoss phase_threshold() { return {std::numbers::pi, std::numbers::pi * std::numbers::pi / 3.0}; }

struct ThresholdSet {
    std::size_t M = 5;
    std::size_t N = 64;
    DetectionThreshold detection;
    std::vector<double> freq; // index m - 1
    MeanAndLoss amp;
    MeanAndLoss phase;

    /// Threshold vector used to normalize the m-sinusoid estimator loss.
    [[nodiscard]] LossVector for_count(std::size_t m) const {
        if (m < 1 || m > freq.size()) {
            throw ParameterError("ThresholdSet::for_count: m out of range");
        }
        return {amp.loss, freq[m - 1], phase.loss};
    }
};

inline ThresholdSet compute_thresholds(std::size_t M, std::size_t N) {
    ThresholdSet t;
    t.M = M;
    t.N = N;
    t.detection = detection_threshold(M);
    for (std::size_t m = 1; m <= M; ++m) {
        t.freq.push_back(frequency_threshold(m, N));
    }
    t.amp = amplitude_threshold();
    t.phase = phase_threshold();
    return t;
}

} // namespace qsine
