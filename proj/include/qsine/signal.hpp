#pragma once

#include <qsine/errors.hpp>
#include <qsine/rng.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace qsine {

using cplx = std::complex<double>;

/// Multi-sinusoid label or estimate. Vectors are aligned by index and, for
/// labels, sorted by ascending frequency.
struct ParameterSet {
    std::vector<double> amps;
    std::vector<double> freqs;
    std::vector<double> phases;

    [[nodiscard]] std::size_t count() const noexcept { return freqs.size(); }
    [[nodiscard]] bool consistent() const noexcept {
        return amps.size() == freqs.size() && phases.size() == freqs.size();
    }
};

/// Checks the label invariants: aligned lengths, ascending frequencies in
/// (0, 0.5), phases in [0, 2pi).
inline bool is_valid_label(const ParameterSet& p) {
    if (!p.consistent()) {
        return false;
    }
    for (std::size_t i = 0; i < p.count(); ++i) {
        if (!(p.freqs[i] > 0.0 && p.freqs[i] < 0.5)) {
            return false;
        }
        if (i > 0 && !(p.freqs[i] > p.freqs[i - 1])) {
            return false;
        }
        if (!(p.phases[i] >= 0.0 && p.phases[i] < 2.0 * std::numbers::pi)) {
            return false;
        }
    }
    return true;
}

using ComplexFrame = std::vector<cplx>;

/// N x 2 real matrix, row-major: data[2n] = Re, data[2n + 1] = Im.
struct IQFrame {
    std::size_t rows = 0;
    std::vector<double> data;

    IQFrame() = default;
    explicit IQFrame(std::size_t n) : rows(n), data(2 * n, 0.0) {}

    double& operator()(std::size_t n, std::size_t col) { return data[2 * n + col]; }
    double operator()(std::size_t n, std::size_t col) const { return data[2 * n + col]; }
    bool operator==(const IQFrame&) const = default;
};

enum class FreqMode { in_distribution, ood_uniform };

struct GenConfig {
    std::size_t N = 64;
    std::size_t M = 5;
    double snr_db = 10.0;
    /// When set, per-example SNR is drawn uniformly from [snr_db, snr_max_db].
    std::optional<double> snr_max_db;
    int bits = 3;
    std::uint64_t seed = 0;
    FreqMode freq_mode = FreqMode::in_distribution;
    /// 0 draws m uniformly from {1..M}; otherwise every example has this count.
    std::size_t fixed_m = 0;
    /// Skip quantization (classical round-trip experiments).
    bool unquantized = false;

    void validate() const {
        if (N < 2) {
            throw ParameterError("GenConfig: N must be >= 2");
        }
        if (M < 1) {
            throw ParameterError("GenConfig: M must be >= 1");
        }
        if (bits < 1) {
            throw ParameterError("GenConfig: bits must be >= 1");
        }
        if (fixed_m > M) {
            throw ParameterError("GenConfig: fixed_m exceeds M");
        }
        if (snr_max_db && *snr_max_db < snr_db) {
            throw ParameterError("GenConfig: snr range is empty");
        }
    }
};

struct LabeledExample {
    IQFrame x;
    ParameterSet label;
    double snr_db = 0.0;
};

/// u[n] = sum_i a_i exp(j(2 pi f_i n + phi_i)), n = 0..N-1, sampling interval T.
inline ComplexFrame synthesize(const ParameterSet& params, std::size_t N, double T = 1.0) {
    if (!params.consistent()) {
        throw ParameterError("synthesize: amplitude/frequency/phase lengths differ");
    }
    ComplexFrame u(N, cplx{0.0, 0.0});
    for (std::size_t i = 0; i < params.count(); ++i) {
        const double w = 2.0 * std::numbers::pi * params.freqs[i] * T;
        for (std::size_t n = 0; n < N; ++n) {
            u[n] += std::polar(params.amps[i], w * static_cast<double>(n) + params.phases[i]);
        }
    }
    return u;
}

/// Complex noise variance that yields `snr_db` for the given signal power.
inline double noise_variance(double signal_power, double snr_db) {
    return signal_power / std::pow(10.0, snr_db / 10.0);
}

/// Adds circularly-symmetric complex Gaussian noise. snr_db = +inf is noiseless.
inline ComplexFrame add_noise(const ComplexFrame& frame, double snr_db, double signal_power, Rng& rng) {
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
        throw ParameterError("add_noise: snr_db must be finite or +inf");
    }
    if (!(signal_power > 0.0)) {
        throw ParameterError("add_noise: signal_power must be positive");
    }
    if (std::isinf(snr_db)) {
        return frame;
    }
    const double sigma = std::sqrt(noise_variance(signal_power, snr_db) / 2.0);
    std::normal_distribution<double> gauss(0.0, sigma);
    ComplexFrame out(frame);
    for (auto& s : out) {
        const double re = gauss(rng);
        const double im = gauss(rng);
        s += cplx{re, im};
    }
    return out;
}

/// s = sqrt(N) * y / ||y||, so that sum |s[n]|^2 = N.
inline ComplexFrame normalize_power(const ComplexFrame& frame) {
    double energy = 0.0;
    for (const auto& s : frame) {
        energy += std::norm(s);
    }
    if (!(energy > 0.0) || !std::isfinite(energy)) {
        throw InputError("normalize_power: frame has zero or non-finite norm");
    }
    const double scale = std::sqrt(static_cast<double>(frame.size()) / energy);
    ComplexFrame out(frame);
    for (auto& s : out) {
        s *= scale;
    }
    return out;
}

inline IQFrame to_iq(const ComplexFrame& frame) {
    IQFrame x(frame.size());
    for (std::size_t n = 0; n < frame.size(); ++n) {
        x(n, 0) = frame[n].real();
        x(n, 1) = frame[n].imag();
    }
    return x;
}

inline ComplexFrame from_iq(const IQFrame& x) {
    ComplexFrame out(x.rows);
    for (std::size_t n = 0; n < x.rows; ++n) {
        out[n] = cplx{x(n, 0), x(n, 1)};
    }
    return out;
}

/// One frequency-spacing jitter draw, |Normal(0, variance 2.5/N)|.
inline double spacing_jitter(std::size_t N, Rng& rng) {
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.5 / static_cast<double>(N)));
    return std::abs(gauss(rng));
}

namespace detail {

inline constexpr std::size_t kRejectionCap = 1'000'000;

inline std::vector<double> draw_in_distribution_freqs(std::size_t m, std::size_t N, Rng& rng) {
    const double inv_n = 1.0 / static_cast<double>(N);
    std::vector<double> f(m);
    for (std::size_t iter = 0; iter < kRejectionCap; ++iter) {
        const double w0 = uniform(rng, 0.0, 0.25);
        f[0] = w0;
        for (std::size_t i = 1; i < m; ++i) {
            f[i] = w0 + static_cast<double>(i) * inv_n + spacing_jitter(N, rng);
        }
        if (*std::max_element(f.begin(), f.end()) <= 0.5 && f[0] > 0.0) {
            // jitter is independent per index, so generation order need not ascend
            std::sort(f.begin(), f.end());
            return f;
        }
    }
    throw SamplingError("draw_parameters: in-distribution frequency rejection cap reached");
}

inline std::vector<double> draw_ood_freqs(std::size_t m, std::size_t N, Rng& rng) {
    const double min_gap = 1.0 / static_cast<double>(N);
    std::vector<double> f(m);
    for (std::size_t iter = 0; iter < kRejectionCap; ++iter) {
        for (auto& v : f) {
            v = uniform(rng, 0.0, 0.5);
        }
        std::sort(f.begin(), f.end());
        bool ok = f[0] > 0.0;
        for (std::size_t i = 1; ok && i < m; ++i) {
            ok = f[i] - f[i - 1] >= min_gap;
        }
        if (ok) {
            return f;
        }
    }
    throw SamplingError("draw_parameters: OOD frequency rejection cap reached");
}

} // namespace detail

/// Draws one labelled parameter set. Frequencies come first (with rejection),
/// then amplitudes in [0.1, 1) and phases in [0, 2pi).
inline ParameterSet draw_parameters(const GenConfig& cfg, Rng& rng) {
    cfg.validate();
    std::size_t m = cfg.fixed_m;
    if (m == 0) {
        std::uniform_int_distribution<std::size_t> count(1, cfg.M);
        m = count(rng);
    }
    ParameterSet p;
    p.freqs = cfg.freq_mode == FreqMode::in_distribution ? detail::draw_in_distribution_freqs(m, cfg.N, rng)
                                                          : detail::draw_ood_freqs(m, cfg.N, rng);
    p.amps.resize(m);
    p.phases.resize(m);
    for (auto& a : p.amps) {
        a = uniform(rng, 0.1, 1.0);
    }
    for (auto& ph : p.phases) {
        ph = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
    return p;
}

inline double signal_power(const ParameterSet& p) {
    double power = 0.0;
    for (double a : p.amps) {
        power += a * a;
    }
    return power;
}

} // namespace qsine
