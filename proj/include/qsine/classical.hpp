#pragma once

#include <qsine/errors.hpp>
#include <qsine/quantizer.hpp>
#include <qsine/signal.hpp>

#include <Eigen/Dense>
#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace qsine {

// Classical baselines: zero-padded periodogram/FFT estimation and
// eigenvalue-based AIC/MDL model-order selection, both run on the
// Bussgang-linearized frame.

struct SpectrumEstimate {
    std::size_t nfft = 0;
    std::vector<cplx> values;
    std::vector<double> magnitudes;
};

namespace detail {

/// One FFTW plan with its own aligned buffers; cached per (thread, size).
class FftPlan {
public:
    explicit FftPlan(std::size_t n) : n_(n) {
        in_ = fftw_alloc_complex(n);
        out_ = fftw_alloc_complex(n);
        std::lock_guard lock(planner_mutex());
        plan_ = fftw_plan_dft_1d(static_cast<int>(n), in_, out_, FFTW_FORWARD, FFTW_ESTIMATE);
    }
    FftPlan(const FftPlan&) = delete;
    FftPlan& operator=(const FftPlan&) = delete;
    ~FftPlan() {
        {
            std::lock_guard lock(planner_mutex());
            fftw_destroy_plan(plan_);
        }
        fftw_free(in_);
        fftw_free(out_);
    }

    std::vector<cplx> forward(const ComplexFrame& x) {
        for (std::size_t i = 0; i < n_; ++i) {
            const cplx v = i < x.size() ? x[i] : cplx{};
            in_[i][0] = v.real();
            in_[i][1] = v.imag();
        }
        fftw_execute(plan_);
        std::vector<cplx> out(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            out[i] = cplx{out_[i][0], out_[i][1]};
        }
        return out;
    }

private:
    static std::mutex& planner_mutex() {
        static std::mutex m;
        return m;
    }
    std::size_t n_;
    fftw_complex* in_ = nullptr;
    fftw_complex* out_ = nullptr;
    fftw_plan plan_ = nullptr;
};

inline FftPlan& fft_plan(std::size_t n) {
    thread_local std::map<std::size_t, std::unique_ptr<FftPlan>> cache;
    auto& slot = cache[n];
    if (!slot) {
        slot = std::make_unique<FftPlan>(n);
    }
    return *slot;
}

} // namespace detail

/// DFT of x zero-padded to nfft; bin k corresponds to frequency k / nfft.
inline SpectrumEstimate zero_padded_dft(const ComplexFrame& x, std::size_t nfft) {
    if (nfft < x.size() || nfft == 0 || (nfft & (nfft - 1)) != 0) {
        throw ParameterError("zero_padded_dft: nfft must be a power of two >= N");
    }
    SpectrumEstimate s;
    s.nfft = nfft;
    s.values = detail::fft_plan(nfft).forward(x);
    s.magnitudes.resize(nfft);
    std::transform(s.values.begin(), s.values.end(), s.magnitudes.begin(), [](cplx v) { return std::abs(v); });
    return s;
}

enum class PeakMode {
    /// Largest local maxima with an exclusion guard around each pick.
    guarded_maxima,
    /// The m largest magnitudes, adjacent bins allowed.
    top_magnitude,
};

struct PeakPick {
    std::vector<std::size_t> bins; // ascending
    bool degraded = false;
};

/// Exclusion radius in bins around each picked peak: ceil(nfft / (2N)).
inline std::size_t peak_guard(std::size_t nfft, std::size_t N) { return (nfft + 2 * N - 1) / (2 * N); }

/// Picks m spectral peaks with normalized frequency in (0, 0.5).
inline PeakPick pick_peaks(const SpectrumEstimate& spec, std::size_t m, std::size_t N,
                           PeakMode mode = PeakMode::guarded_maxima) {
    if (m < 1) {
        throw ParameterError("pick_peaks: m must be >= 1");
    }
    const auto& mag = spec.magnitudes;
    const std::size_t lo = 1;
    const std::size_t hi = spec.nfft / 2; // exclusive
    if (hi <= lo) {
        throw ParameterError("pick_peaks: empty search band");
    }
    auto by_magnitude = [&](std::size_t a, std::size_t b) { return mag[a] > mag[b] || (mag[a] == mag[b] && a < b); };

    std::vector<std::size_t> band(hi - lo);
    std::iota(band.begin(), band.end(), lo);
    std::sort(band.begin(), band.end(), by_magnitude);

    PeakPick pick;
    if (mode == PeakMode::top_magnitude) {
        for (std::size_t i = 0; i < std::min(m, band.size()); ++i) {
            pick.bins.push_back(band[i]);
        }
        pick.degraded = pick.bins.size() < m;
        std::sort(pick.bins.begin(), pick.bins.end());
        return pick;
    }

    const std::size_t guard = peak_guard(spec.nfft, N);
    auto clear_of_picks = [&](std::size_t k) {
        return std::all_of(pick.bins.begin(), pick.bins.end(), [&](std::size_t p) {
            return (k > p ? k - p : p - k) >= guard;
        });
    };
    auto is_local_max = [&](std::size_t k) {
        const double left = mag[k - 1];
        const double right = mag[(k + 1) % spec.nfft];
        return mag[k] >= left && mag[k] >= right;
    };

    for (std::size_t k : band) {
        if (pick.bins.size() == m) {
            break;
        }
        if (is_local_max(k) && clear_of_picks(k)) {
            pick.bins.push_back(k);
        }
    }
    if (pick.bins.size() < m) {
        pick.degraded = true;
        for (std::size_t k : band) {
            if (pick.bins.size() == m) {
                break;
            }
            if (clear_of_picks(k)) {
                pick.bins.push_back(k);
            }
        }
        for (std::size_t k : band) {
            if (pick.bins.size() == m) {
                break;
            }
            if (std::find(pick.bins.begin(), pick.bins.end(), k) == pick.bins.end()) {
                pick.bins.push_back(k);
            }
        }
    }
    std::sort(pick.bins.begin(), pick.bins.end());
    return pick;
}

inline double wrap_phase(double phi) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double w = std::fmod(phi, two_pi);
    if (w < 0.0) {
        w += two_pi;
    }
    return w >= two_pi ? 0.0 : w;
}

/// Periodogram/FFT estimate of m sinusoids from an already linear frame.
inline ParameterSet periodogram_estimate(const ComplexFrame& x, std::size_t m, std::size_t nfft,
                                         PeakMode mode = PeakMode::guarded_maxima) {
    const SpectrumEstimate spec = zero_padded_dft(x, nfft);
    const PeakPick pick = pick_peaks(spec, m, x.size(), mode);
    ParameterSet est;
    const double n = static_cast<double>(x.size());
    for (std::size_t bin : pick.bins) {
        const cplx r = spec.values[bin];
        est.freqs.push_back(static_cast<double>(bin) / static_cast<double>(nfft));
        est.amps.push_back(std::abs(r) / n);
        est.phases.push_back(wrap_phase(std::atan2(r.imag(), r.real())));
    }
    return est;
}

/// Linearizes (when a quantizer is given) and runs the periodogram estimator.
inline ParameterSet classical_estimate(const IQFrame& x, std::size_t m, const std::optional<QuantizerSpec>& qspec,
                                       std::size_t nfft, PeakMode mode = PeakMode::guarded_maxima) {
    const ComplexFrame lin = qspec ? bussgang_linearize(x, *qspec) : from_iq(x);
    return periodogram_estimate(lin, m, nfft, mode);
}

enum class OrderCriterion { aic, mdl };

/// Eigenvalues (descending) of the sample covariance of the K = N - L + 1
/// sliding length-L subvectors of x.
inline std::vector<double> subvector_eigenvalues(const ComplexFrame& x, std::size_t L) {
    if (L < 1 || 2 * L > x.size()) {
        throw ParameterError("subvector_eigenvalues: need 1 <= L <= N/2");
    }
    const std::size_t K = x.size() - L + 1;
    Eigen::MatrixXcd R = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
    Eigen::VectorXcd v(static_cast<Eigen::Index>(L));
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < L; ++i) {
            v(static_cast<Eigen::Index>(i)) = x[k + i];
        }
        R.noalias() += v * v.adjoint();
    }
    R /= static_cast<double>(K);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(R, Eigen::EigenvaluesOnly);
    std::vector<double> eig(L);
    for (std::size_t i = 0; i < L; ++i) {
        eig[i] = solver.eigenvalues()(static_cast<Eigen::Index>(L - 1 - i));
    }
    return eig;
}

/// Information criterion value for model order k given descending eigenvalues.
inline double order_criterion(std::span<const double> eig, std::size_t K, std::size_t k, OrderCriterion c) {
    constexpr double floor = 1e-12;
    const std::size_t L = eig.size();
    const std::size_t tail = L - k;
    double log_geo = 0.0;
    double arith = 0.0;
    for (std::size_t i = k; i < L; ++i) {
        const double lam = std::max(eig[i], floor);
        log_geo += std::log(lam);
        arith += lam;
    }
    log_geo /= static_cast<double>(tail);
    arith /= static_cast<double>(tail);
    const double log_ratio = log_geo - std::log(arith); // ln(g/a) <= 0
    const double kd = static_cast<double>(k);
    const double Ld = static_cast<double>(L);
    const double Kd = static_cast<double>(K);
    if (c == OrderCriterion::aic) {
        return -2.0 * Kd * static_cast<double>(tail) * log_ratio + 2.0 * kd * (2.0 * Ld - kd);
    }
    return -Kd * static_cast<double>(tail) * log_ratio + 0.5 * kd * (2.0 * Ld - kd) * std::log(Kd);
}

/// Model order by AIC or MDL over k in {0..max_order}, clamped to >= 1.
inline std::size_t order_from_eigenvalues(std::span<const double> eig, std::size_t K, OrderCriterion c,
                                          std::size_t max_order) {
    if (max_order >= eig.size()) {
        throw ParameterError("aic_mdl_detect: max order must be < L");
    }
    std::size_t best_k = 0;
    double best = order_criterion(eig, K, 0, c);
    for (std::size_t k = 1; k <= max_order; ++k) {
        const double v = order_criterion(eig, K, k, c);
        if (v < best) {
            best = v;
            best_k = k;
        }
    }
    return std::max<std::size_t>(best_k, 1);
}

inline std::size_t aic_mdl_detect(const IQFrame& x, OrderCriterion c, const std::optional<QuantizerSpec>& qspec,
                                  std::size_t L = 16, std::size_t max_order = 5) {
    const ComplexFrame lin = qspec ? bussgang_linearize(x, *qspec) : from_iq(x);
    if (max_order >= L) {
        throw ParameterError("aic_mdl_detect: max order must be < L");
    }
    const auto eig = subvector_eigenvalues(lin, L);
    return order_from_eigenvalues(eig, lin.size() - L + 1, c, max_order);
}

} // namespace qsine
