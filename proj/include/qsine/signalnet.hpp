#pragma once

#include <qsine/dataset.hpp>
#include <qsine/errors.hpp>
#include <qsine/metrics.hpp>
#include <qsine/nn/adam.hpp>
#include <qsine/nn/checkpoint.hpp>
#include <qsine/nn/layers.hpp>
#include <qsine/nn/network.hpp>
#include <qsine/rng.hpp>
#include <qsine/signal.hpp>
#include <qsine/thresholds.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace qsine {

// ---------------------------------------------------------------------------
// Architectures

/// Detection module: three Conv(k=3)+ReLU+MaxPool+BN stages with 32/64/128
/// filters and pools {2, 2, 4}, dropout, Dense 128/64 ReLU, Dense M softmax.
template <typename T>
nn::Network<T> build_detection_network(std::size_t N, std::size_t M, double dropout = 0.7) {
    using namespace nn;
    if (N % 16 != 0) {
        throw ParameterError("detection network: N must be a multiple of 16");
    }
    Network<T> net;
    const std::size_t filters[3] = {32, 64, 128};
    const std::size_t pools[3] = {2, 2, 4};
    std::size_t in = 2;
    for (int s = 0; s < 3; ++s) {
        const std::string id = std::to_string(s + 1);
        net.template chain<Conv1D<T>>("conv" + id, in, filters[s], std::size_t{3});
        net.template chain<Activation<T>>("relu" + id, ActivationKind::relu);
        net.template chain<MaxPool1D<T>>("pool" + id, pools[s]);
        net.template chain<BatchNorm1D<T>>("bn" + id, filters[s]);
        in = filters[s];
    }
    net.template chain<Flatten<T>>("flatten");
    net.template chain<Dropout<T>>("dropout", dropout);
    net.template chain<Dense<T>>("fc1", (N / 16) * 128, std::size_t{128});
    net.template chain<Activation<T>>("fc1_relu", ActivationKind::relu);
    net.template chain<Dense<T>>("fc2", std::size_t{128}, std::size_t{64});
    net.template chain<Activation<T>>("fc2_relu", ActivationKind::relu);
    net.template chain<Dense<T>>("logits", std::size_t{64}, M);
    net.template chain<Activation<T>>("probs", ActivationKind::softmax);
    net.set_outputs({"probs"});
    return net;
}

/// Block estimator with outputs (amplitude, frequency, phase), each [batch, 1].
/// Normalized branch: Conv8+Pool+BN -> Conv16+Pool+BN -> Dense16 SeLU -> frequency.
/// Phase head: Conv16+Pool on the first normalized stage -> Dense16 SeLU -> phase.
/// Unnormalized branch: Conv8+Pool -> Conv16+Pool -> Dense16 SeLU -> amplitude.
template <typename T>
nn::Network<T> build_block_network(std::size_t N) {
    using namespace nn;
    if (N % 4 != 0) {
        throw ParameterError("block network: N must be a multiple of 4");
    }
    const std::size_t flat = (N / 4) * 16;
    Network<T> net;

    net.template chain_from<Conv1D<T>>("norm_conv1", Network<T>::kInput, std::size_t{2}, std::size_t{8});
    net.template chain<Activation<T>>("norm_relu1", ActivationKind::relu);
    net.template chain<MaxPool1D<T>>("norm_pool1", std::size_t{2});
    net.template chain<BatchNorm1D<T>>("norm_bn1", std::size_t{8});
    net.template chain<Conv1D<T>>("norm_conv2", std::size_t{8}, std::size_t{16});
    net.template chain<Activation<T>>("norm_relu2", ActivationKind::relu);
    net.template chain<MaxPool1D<T>>("norm_pool2", std::size_t{2});
    net.template chain<BatchNorm1D<T>>("norm_bn2", std::size_t{16});
    net.template chain<Flatten<T>>("norm_flat");
    net.template chain<Dense<T>>("freq_fc", flat, std::size_t{16});
    net.template chain<Activation<T>>("freq_selu", ActivationKind::selu);
    net.template chain<Dense<T>>("freq", std::size_t{16}, std::size_t{1});

    net.template chain_from<Conv1D<T>>("phase_conv", "norm_bn1", std::size_t{8}, std::size_t{16});
    net.template chain<Activation<T>>("phase_relu", ActivationKind::relu);
    net.template chain<MaxPool1D<T>>("phase_pool", std::size_t{2});
    net.template chain<Flatten<T>>("phase_flat");
    net.template chain<Dense<T>>("phase_fc", flat, std::size_t{16});
    net.template chain<Activation<T>>("phase_selu", ActivationKind::selu);
    net.template chain<Dense<T>>("phase", std::size_t{16}, std::size_t{1});

    net.template chain_from<Conv1D<T>>("amp_conv1", Network<T>::kInput, std::size_t{2}, std::size_t{8});
    net.template chain<Activation<T>>("amp_relu1", ActivationKind::relu);
    net.template chain<MaxPool1D<T>>("amp_pool1", std::size_t{2});
    net.template chain<Conv1D<T>>("amp_conv2", std::size_t{8}, std::size_t{16});
    net.template chain<Activation<T>>("amp_relu2", ActivationKind::relu);
    net.template chain<MaxPool1D<T>>("amp_pool2", std::size_t{2});
    net.template chain<Flatten<T>>("amp_flat");
    net.template chain<Dense<T>>("amp_fc", flat, std::size_t{16});
    net.template chain<Activation<T>>("amp_selu", ActivationKind::selu);
    net.template chain<Dense<T>>("amp", std::size_t{16}, std::size_t{1});

    net.set_outputs({"amp", "freq", "phase"});
    return net;
}

enum class BaselineKind { mlp, conv };

namespace detail {

inline std::size_t mlp_params(std::size_t in, std::size_t h, std::size_t out) {
    return in * h + h + h * h + h + h * out + out;
}
inline std::size_t conv_params(std::size_t N, std::size_t c, std::size_t out) {
    return 3 * 2 * c + c + 3 * c * c + c + (N / 4) * c * out + out;
}

} // namespace detail

/// Parameter count of an m-block estimator chain.
inline std::size_t estimator_parameter_count(std::size_t N, std::size_t m) {
    return m * build_block_network<float>(N).parameter_count();
}

/// Two-hidden-layer comparison network sized to match the m-block estimator
/// chain; outputs 3m linear values stacked as [a_1..a_m, f_1..f_m, phi_1..phi_m].
template <typename T>
nn::Network<T> build_baseline(BaselineKind kind, std::size_t N, std::size_t m) {
    using namespace nn;
    const std::size_t target = estimator_parameter_count(N, m);
    const std::size_t out = 3 * m;
    auto best_width = [&](auto count_fn) {
        std::size_t best = 1;
        for (std::size_t w = 1; w < 4096; ++w) {
            const auto diff = [&](std::size_t v) {
                const std::size_t c = count_fn(v);
                return c > target ? c - target : target - c;
            };
            if (diff(w) < diff(best)) {
                best = w;
            }
        }
        return best;
    };
    Network<T> net;
    if (kind == BaselineKind::mlp) {
        const std::size_t in = 2 * N;
        const std::size_t h = best_width([&](std::size_t w) { return qsine::detail::mlp_params(in, w, out); });
        net.template chain<Flatten<T>>("flatten");
        net.template chain<Dense<T>>("hidden1", in, h);
        net.template chain<Activation<T>>("relu1", ActivationKind::relu);
        net.template chain<Dense<T>>("hidden2", h, h);
        net.template chain<Activation<T>>("relu2", ActivationKind::relu);
        net.template chain<Dense<T>>("out", h, out);
    } else {
        if (N % 4 != 0) {
            throw ParameterError("conv baseline: N must be a multiple of 4");
        }
        const std::size_t c = best_width([&](std::size_t w) { return qsine::detail::conv_params(N, w, out); });
        net.template chain<Conv1D<T>>("conv1", std::size_t{2}, c);
        net.template chain<Activation<T>>("relu1", ActivationKind::relu);
        net.template chain<MaxPool1D<T>>("pool1", std::size_t{2});
        net.template chain<Conv1D<T>>("conv2", c, c);
        net.template chain<Activation<T>>("relu2", ActivationKind::relu);
        net.template chain<MaxPool1D<T>>("pool2", std::size_t{2});
        net.template chain<Flatten<T>>("flatten");
        net.template chain<Dense<T>>("out", (N / 4) * c, out);
    }
    net.set_outputs({"out"});
    return net;
}

// ---------------------------------------------------------------------------
// Losses

/// Expected detection loss of softmax outputs, mean over the batch:
/// sum_k p_k * L_det(m, k + 1). Fills dL/dp.
template <typename T>
double expected_detection_loss(const nn::Tensor<T>& probs, std::span<const std::size_t> counts, nn::Tensor<T>& grad) {
    const std::size_t B = probs.dim(0);
    const std::size_t K = probs.dim(1);
    if (counts.size() != B) {
        throw ShapeError("expected_detection_loss: one count per batch row required");
    }
    grad = nn::Tensor<T>(probs.shape);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < K; ++k) {
            const double l = detection_loss(static_cast<double>(counts[b]), static_cast<double>(k + 1));
            total += static_cast<double>(probs.data[b * K + k]) * l;
            grad.data[b * K + k] = static_cast<T>(l / static_cast<double>(B));
        }
    }
    return total / static_cast<double>(B);
}

/// Detection class (count) from class probabilities: argmax + 1.
template <typename Range>
std::size_t select_count(const Range& probs) {
    const auto it = std::max_element(std::begin(probs), std::end(probs));
    return static_cast<std::size_t>(std::distance(std::begin(probs), it)) + 1;
}

/// Batch targets for an m-sinusoid estimator: [param][head][batch].
struct EstimatorTargets {
    std::size_t m = 0;
    std::size_t batch = 0;
    std::vector<double> amp; // head-major: amp[k * batch + b]
    std::vector<double> freq;
    std::vector<double> phase;
};

/// Orders a label by ascending frequency, keeping amplitude/phase aligned.
inline ParameterSet sorted_by_frequency(const ParameterSet& p) {
    std::vector<std::size_t> idx(p.count());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p.freqs[a] < p.freqs[b]; });
    ParameterSet out;
    for (std::size_t i : idx) {
        out.amps.push_back(p.amps[i]);
        out.freqs.push_back(p.freqs[i]);
        out.phases.push_back(p.phases[i]);
    }
    return out;
}

inline EstimatorTargets make_targets(std::span<const ParameterSet* const> labels, std::size_t m) {
    EstimatorTargets t;
    t.m = m;
    t.batch = labels.size();
    t.amp.resize(m * t.batch);
    t.freq.resize(m * t.batch);
    t.phase.resize(m * t.batch);
    for (std::size_t b = 0; b < t.batch; ++b) {
        if (labels[b]->count() != m) {
            throw ParameterError("estimator targets: label count differs from estimator m");
        }
        const ParameterSet s = sorted_by_frequency(*labels[b]);
        for (std::size_t k = 0; k < m; ++k) {
            t.amp[k * t.batch + b] = s.amps[k];
            t.freq[k * t.batch + b] = s.freqs[k];
            t.phase[k * t.batch + b] = s.phases[k];
        }
    }
    return t;
}

/// Effective estimator loss (1/m)(L_a/thr_a + L_f/thr_f + L_phi/thr_phi),
/// each L the MSE over the m heads and the batch. Per-head predictions are
/// [batch, 1] tensors ordered (amp, freq, phase); fills matching gradients.
template <typename T>
double effective_estimator_loss(const std::vector<std::array<nn::Tensor<T>, 3>>& heads, const EstimatorTargets& t,
                                const LossVector& thr, std::vector<std::array<nn::Tensor<T>, 3>>& grads) {
    require_positive(thr, "effective_estimator_loss");
    const std::size_t m = t.m;
    const std::size_t B = t.batch;
    if (heads.size() != m) {
        throw ShapeError("effective_estimator_loss: one head triple per sinusoid required");
    }
    const double inv_thr[3] = {1.0 / thr.amp, 1.0 / thr.freq, 1.0 / thr.phase};
    const std::vector<double>* target[3] = {&t.amp, &t.freq, &t.phase};
    // d/dy of (1/m) * (1/(m B)) sum (y - t)^2 / thr
    const double scale = 1.0 / (static_cast<double>(m) * static_cast<double>(m) * static_cast<double>(B));
    grads.assign(m, {});
    double total = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t p = 0; p < 3; ++p) {
            const auto& y = heads[k][p];
            auto& g = grads[k][p];
            g = nn::Tensor<T>(y.shape);
            for (std::size_t b = 0; b < B; ++b) {
                const double d = static_cast<double>(y.data[b]) - (*target[p])[k * B + b];
                total += d * d * inv_thr[p] * scale;
                g.data[b] = static_cast<T>(2.0 * d * inv_thr[p] * scale);
            }
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Reconstruction and successive estimation

/// a * exp(j(2 pi f n + phi)), n = 0..N-1.
inline ComplexFrame reconstruct(double a, double f, double phi, std::size_t N) {
    ComplexFrame u(N);
    for (std::size_t n = 0; n < N; ++n) {
        u[n] = std::polar(a, 2.0 * std::numbers::pi * f * static_cast<double>(n) + phi);
    }
    return u;
}

/// Subtracts the reconstructed sinusoid from an IQ frame in place.
inline void cancel(IQFrame& residual, double a, double f, double phi) {
    const ComplexFrame r = reconstruct(a, f, phi, residual.rows);
    for (std::size_t n = 0; n < residual.rows; ++n) {
        residual(n, 0) -= r[n].real();
        residual(n, 1) -= r[n].imag();
    }
}

struct SuccessiveTrace {
    ParameterSet estimates;         // head order, not re-sorted
    std::vector<IQFrame> residuals; // residuals[k] is block k's input; residuals[m] is the final residual
};

/// Runs m blocks successively: block k sees the residual after cancelling
/// the reconstructions of blocks 0..k-1. `block(k, residual)` returns
/// {amplitude, frequency, phase}.
template <typename BlockFn>
SuccessiveTrace successive_estimate(const IQFrame& x, std::size_t m, BlockFn&& block) {
    SuccessiveTrace trace;
    IQFrame residual = x;
    for (std::size_t k = 0; k < m; ++k) {
        trace.residuals.push_back(residual);
        const std::array<double, 3> est = block(k, static_cast<const IQFrame&>(residual));
        trace.estimates.amps.push_back(est[0]);
        trace.estimates.freqs.push_back(est[1]);
        trace.estimates.phases.push_back(est[2]);
        cancel(residual, est[0], est[1], est[2]);
    }
    trace.residuals.push_back(residual);
    return trace;
}

template <typename T>
nn::Tensor<T> frames_to_tensor(std::span<const IQFrame* const> frames) {
    if (frames.empty()) {
        throw ParameterError("frames_to_tensor: empty batch");
    }
    const std::size_t N = frames[0]->rows;
    nn::Tensor<T> x({frames.size(), N, 2});
    for (std::size_t b = 0; b < frames.size(); ++b) {
        if (frames[b]->rows != N) {
            throw ShapeError("frames_to_tensor: frames have different lengths");
        }
        std::transform(frames[b]->data.begin(), frames[b]->data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(b * 2 * N),
                       [](double v) { return static_cast<T>(v); });
    }
    return x;
}

/// Chain of m block estimators with internal reconstruction and cancellation.
template <typename T>
class SinusoidEstimatorT {
public:
    SinusoidEstimatorT() = default;
    SinusoidEstimatorT(std::size_t N, std::size_t m, int bits = 0) : N_(N), bits_(bits) {
        if (m < 1) {
            throw ParameterError("sinusoid estimator: m must be >= 1");
        }
        for (std::size_t k = 0; k < m; ++k) {
            blocks_.push_back(build_block_network<T>(N));
        }
    }

    [[nodiscard]] std::size_t count() const { return blocks_.size(); }
    [[nodiscard]] std::size_t frame_length() const { return N_; }
    [[nodiscard]] int bits() const { return bits_; }
    nn::Network<T>& block(std::size_t k) { return blocks_.at(k); }
    /// Backpropagate through the reconstruction into earlier blocks (ablation).
    bool differentiable_residual = false;

    void init(std::uint64_t seed) {
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            Rng rng = make_rng(seed, k);
            blocks_[k].init(rng);
        }
    }

    /// Single-frame inference. Outputs are in head order.
    [[nodiscard]] SuccessiveTrace trace(const IQFrame& x) const {
        if (x.rows != N_) {
            throw ShapeError("sinusoid estimator: frame length " + std::to_string(x.rows) + ", expected " +
                             std::to_string(N_));
        }
        return successive_estimate(x, blocks_.size(), [&](std::size_t k, const IQFrame& r) {
            const IQFrame* frames[1] = {&r};
            const auto out = blocks_[k].predict(frames_to_tensor<T>(frames));
            return std::array<double, 3>{static_cast<double>(out[0].data[0]), static_cast<double>(out[1].data[0]),
                                         static_cast<double>(out[2].data[0])};
        });
    }

    [[nodiscard]] ParameterSet estimate(const IQFrame& x) const { return trace(x).estimates; }

    /// Batched training forward over [batch, N, 2]; returns per-block head outputs.
    std::vector<std::array<nn::Tensor<T>, 3>> forward(const nn::Tensor<T>& x, nn::Mode mode) {
        const std::size_t B = x.dim(0);
        std::vector<std::array<nn::Tensor<T>, 3>> heads;
        nn::Tensor<T> residual = x;
        residuals_.clear();
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            residuals_.push_back(residual);
            auto out = blocks_[k].forward(residual, mode);
            heads.push_back({out[0], out[1], out[2]});
            if (k + 1 == blocks_.size()) {
                break;
            }
            for (std::size_t b = 0; b < B; ++b) {
                const ComplexFrame r = reconstruct(static_cast<double>(out[0].data[b]), static_cast<double>(out[1].data[b]),
                                                   static_cast<double>(out[2].data[b]), N_);
                T* row = residual.data.data() + b * 2 * N_;
                for (std::size_t n = 0; n < N_; ++n) {
                    row[2 * n] -= static_cast<T>(r[n].real());
                    row[2 * n + 1] -= static_cast<T>(r[n].imag());
                }
            }
        }
        last_heads_ = heads;
        return heads;
    }

    /// Backward pass for the last forward(). With stop-gradient residuals
    /// each block receives only its own head gradients.
    void backward(const std::vector<std::array<nn::Tensor<T>, 3>>& head_grads) {
        const std::size_t m = blocks_.size();
        if (head_grads.size() != m) {
            throw ShapeError("sinusoid estimator: one gradient triple per block required");
        }
        if (!differentiable_residual) {
            for (std::size_t k = 0; k < m; ++k) {
                blocks_[k].backward({head_grads[k][0], head_grads[k][1], head_grads[k][2]});
            }
            return;
        }
        // residual_{k+1} = residual_k - rec(theta_k): d residual_{k+1} / d residual_k = I.
        nn::Tensor<T> g_residual; // gradient w.r.t. residual_{k+1}
        for (std::size_t k = m; k-- > 0;) {
            std::array<nn::Tensor<T>, 3> g = head_grads[k];
            if (!g_residual.empty()) {
                add_reconstruction_grad(k, g_residual, g);
            }
            nn::Tensor<T> g_in = blocks_[k].backward({g[0], g[1], g[2]});
            if (!g_residual.empty()) {
                for (std::size_t i = 0; i < g_in.size(); ++i) {
                    g_in.data[i] += g_residual.data[i];
                }
            }
            g_residual = std::move(g_in);
        }
    }

    void zero_grad() {
        for (auto& b : blocks_) {
            b.zero_grad();
        }
    }

    std::vector<nn::Param<T>*> params() {
        std::vector<nn::Param<T>*> out;
        for (auto& b : blocks_) {
            for (auto* p : b.params()) {
                out.push_back(p);
            }
        }
        return out;
    }

    std::vector<std::pair<std::string, nn::Tensor<T>*>> named_tensors() {
        std::vector<std::pair<std::string, nn::Tensor<T>*>> out;
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            for (auto& [name, t] : blocks_[k].named_tensors()) {
                out.emplace_back("block" + std::to_string(k) + "/" + name, t);
            }
        }
        return out;
    }

    std::vector<nn::Tensor<T>> snapshot() {
        std::vector<nn::Tensor<T>> out;
        for (auto& [n, t] : named_tensors()) {
            out.push_back(*t);
        }
        return out;
    }

    void restore(const std::vector<nn::Tensor<T>>& s) {
        auto named = named_tensors();
        for (std::size_t i = 0; i < named.size(); ++i) {
            *named[i].second = s.at(i);
        }
    }

private:
    void add_reconstruction_grad(std::size_t k, const nn::Tensor<T>& g_residual, std::array<nn::Tensor<T>, 3>& g) {
        const auto& out = last_heads_[k];
        const std::size_t B = out[0].dim(0);
        for (std::size_t p = 0; p < 3; ++p) {
            if (g[p].empty()) {
                g[p] = nn::Tensor<T>(out[p].shape);
            }
        }
        for (std::size_t b = 0; b < B; ++b) {
            const double a = static_cast<double>(out[0].data[b]);
            const double f = static_cast<double>(out[1].data[b]);
            const double phi = static_cast<double>(out[2].data[b]);
            double ga = 0.0;
            double gf = 0.0;
            double gp = 0.0;
            const T* gr = g_residual.data.data() + b * 2 * N_;
            for (std::size_t n = 0; n < N_; ++n) {
                const double w = 2.0 * std::numbers::pi * static_cast<double>(n);
                const double psi = w * f + phi;
                const double c = std::cos(psi);
                const double s = std::sin(psi);
                const double gre = -static_cast<double>(gr[2 * n]);
                const double gim = -static_cast<double>(gr[2 * n + 1]);
                ga += gre * c + gim * s;
                gp += a * (-gre * s + gim * c);
                gf += a * w * (-gre * s + gim * c);
            }
            g[0].data[b] += static_cast<T>(ga);
            g[1].data[b] += static_cast<T>(gf);
            g[2].data[b] += static_cast<T>(gp);
        }
    }

    std::size_t N_ = 0;
    int bits_ = 0;
    std::vector<nn::Network<T>> blocks_;
    std::vector<nn::Tensor<T>> residuals_;
    std::vector<std::array<nn::Tensor<T>, 3>> last_heads_;
};

using SinusoidEstimator = SinusoidEstimatorT<float>;

struct DetectionModel {
    nn::Network<float> net;
    std::size_t N = 64;
    std::size_t M = 5;
    int bits = 0;

    DetectionModel() = default;
    DetectionModel(std::size_t n, std::size_t max_count, int b)
        : net(build_detection_network<float>(n, max_count)), N(n), M(max_count), bits(b) {}

    [[nodiscard]] std::vector<double> probabilities(const IQFrame& x) const {
        const IQFrame* frames[1] = {&x};
        const auto out = net.predict(frames_to_tensor<float>(frames));
        return {out[0].data.begin(), out[0].data.end()};
    }
    [[nodiscard]] std::size_t detect(const IQFrame& x) const { return select_count(probabilities(x)); }
};

/// Routes a frame through a detector to the estimator trained for the
/// detected count. `detector(x)` returns class probabilities and
/// `estimators` maps m to a callable returning a ParameterSet.
template <typename Detector, typename EstimatorMap>
std::pair<std::size_t, ParameterSet> route(const Detector& detector, const EstimatorMap& estimators, const IQFrame& x) {
    const std::size_t mhat = select_count(detector(x));
    const auto it = estimators.find(mhat);
    if (it == estimators.end()) {
        throw ConfigurationError("signalnet: no estimator for m = " + std::to_string(mhat));
    }
    return {mhat, it->second(x)};
}

struct SignalNetModel {
    int bits = 0;
    bool has_detection = false;
    DetectionModel detection;
    std::map<std::size_t, SinusoidEstimator> estimators;

    [[nodiscard]] std::pair<std::size_t, ParameterSet> infer(const IQFrame& x) const {
        std::map<std::size_t, std::function<ParameterSet(const IQFrame&)>> table;
        for (const auto& [m, est] : estimators) {
            table.emplace(m, [&est](const IQFrame& f) { return est.estimate(f); });
        }
        return route([&](const IQFrame& f) { return detection.probabilities(f); }, table, x);
    }
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch = 32;
    std::size_t detection_epochs = 20;
    std::size_t estimator_epochs = 20;
    std::size_t detection_samples = 50'000;
    std::size_t estimator_samples = 100'000;
    double validation_fraction = 0.1;
    std::size_t early_stop_patience = 5;
    double lr_factor = 0.5;
    std::size_t lr_patience = 2;
    double min_lr = 1e-6;
    std::uint64_t seed = 0;
    bool differentiable_residual = false;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    bool best = false;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool early_stopped = false;
};

/// Generic epoch loop: shuffled minibatches, validation after each epoch,
/// plateau learning-rate reduction, early stopping, best-epoch restore.
struct FitHooks {
    std::function<double(std::span<const std::size_t>)> train_step;
    std::function<double()> validation_loss;
    std::function<void()> save_best;
    std::function<void()> restore_best;
    std::function<void(double)> set_lr;
};

inline TrainResult fit(std::size_t n_train, std::size_t epochs, const TrainConfig& cfg, const FitHooks& hooks) {
    TrainResult result;
    if (epochs == 0) {
        return result;
    }
    Rng shuffle_rng(derive_seed(cfg.seed, Stream::shuffle));
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double lr = cfg.lr;
    hooks.set_lr(lr);
    std::size_t since_best = 0;
    std::size_t since_lr_drop = 0;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double train_total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n_train; start += cfg.batch) {
            const std::size_t len = std::min(cfg.batch, n_train - start);
            if (len < 2) {
                break; // batch statistics need two rows
            }
            train_total += hooks.train_step(std::span<const std::size_t>(order.data() + start, len));
            ++batches;
        }
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = batches ? train_total / static_cast<double>(batches) : 0.0;
        log.val_loss = hooks.validation_loss();
        log.lr = lr;
        if (log.val_loss < result.best_val_loss) {
            result.best_val_loss = log.val_loss;
            result.best_epoch = epoch;
            log.best = true;
            hooks.save_best();
            since_best = 0;
            since_lr_drop = 0;
        } else {
            ++since_best;
            ++since_lr_drop;
        }
        result.log.push_back(log);
        if (since_best >= cfg.early_stop_patience) {
            result.early_stopped = epoch < epochs;
            break;
        }
        if (since_lr_drop >= cfg.lr_patience) {
            lr = std::max(cfg.min_lr, lr * cfg.lr_factor);
            hooks.set_lr(lr);
            since_lr_drop = 0;
        }
    }
    hooks.restore_best();
    return result;
}

/// Deterministic train/validation split: the last fraction is validation.
inline std::pair<std::vector<const LabeledExample*>, std::vector<const LabeledExample*>>
split_examples(const std::vector<LabeledExample>& data, double validation_fraction) {
    const std::size_t n_val = data.size() < 2 ? 0
                                              : std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(
                                                                              validation_fraction * static_cast<double>(data.size()))));
    std::vector<const LabeledExample*> train;
    std::vector<const LabeledExample*> val;
    for (std::size_t i = 0; i < data.size(); ++i) {
        (i + n_val < data.size() ? train : val).push_back(&data[i]);
    }
    if (val.empty()) {
        val = train;
    }
    return {train, val};
}

namespace detail {

inline std::vector<const IQFrame*> frames_of(std::span<const LabeledExample* const> ex, std::span<const std::size_t> idx) {
    std::vector<const IQFrame*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(&ex[i]->x);
    }
    return out;
}

inline std::vector<const ParameterSet*> labels_of(std::span<const LabeledExample* const> ex,
                                                  std::span<const std::size_t> idx) {
    std::vector<const ParameterSet*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(&ex[i]->label);
    }
    return out;
}

template <typename F>
double batched_mean(std::size_t n, std::size_t batch, F&& loss_of_batch) {
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t len = std::min(batch, n - start);
        idx.resize(len);
        std::iota(idx.begin(), idx.end(), start);
        total += loss_of_batch(std::span<const std::size_t>(idx)) * static_cast<double>(len);
    }
    return total / static_cast<double>(n);
}

} // namespace detail

inline std::vector<std::array<nn::Tensor<float>, 3>> predict_heads(const SinusoidEstimator& est,
                                                                   std::span<const IQFrame* const> frames);

/// Trains an m-sinusoid estimator with the effective (threshold-normalized)
/// loss. Every label must have exactly m sinusoids.
inline TrainResult train_estimator(SinusoidEstimator& model, const std::vector<LabeledExample>& data,
                                   const ThresholdSet& thresholds, const TrainConfig& cfg,
                                   std::size_t epochs) {
    const std::size_t m = model.count();
    if (data.empty()) {
        throw ParameterError("train_estimator: empty dataset");
    }
    for (const auto& ex : data) {
        if (ex.label.count() != m) {
            throw ParameterError("train_estimator: dataset mixes sinusoid counts");
        }
    }
    model.differentiable_residual = cfg.differentiable_residual;
    const LossVector thr = thresholds.for_count(m);
    auto [train, val] = split_examples(data, cfg.validation_fraction);
    nn::AdamState<float> adam;
    std::vector<nn::Tensor<float>> best = model.snapshot();

    FitHooks hooks;
    hooks.set_lr = [&](double lr) { adam.lr = lr; };
    hooks.train_step = [&](std::span<const std::size_t> idx) {
        const auto frames = detail::frames_of(train, idx);
        const auto labels = detail::labels_of(train, idx);
        const EstimatorTargets targets = make_targets(labels, m);
        model.zero_grad();
        const auto heads = model.forward(frames_to_tensor<float>(frames), nn::Mode::train);
        std::vector<std::array<nn::Tensor<float>, 3>> grads;
        const double loss = effective_estimator_loss(heads, targets, thr, grads);
        model.backward(grads);
        nn::adam_step(model.params(), adam);
        return loss;
    };
    hooks.validation_loss = [&] {
        return detail::batched_mean(val.size(), 256, [&](std::span<const std::size_t> idx) {
            const auto frames = detail::frames_of(val, idx);
            const auto labels = detail::labels_of(val, idx);
            const auto heads = predict_heads(model, frames);
            std::vector<std::array<nn::Tensor<float>, 3>> grads;
            return effective_estimator_loss(heads, make_targets(labels, m), thr, grads);
        });
    };
    hooks.save_best = [&] { best = model.snapshot(); };
    hooks.restore_best = [&] { model.restore(best); };
    return fit(train.size(), epochs, cfg, hooks);
}

/// Batched inference through the chain (inference-mode statistics).
inline std::vector<std::array<nn::Tensor<float>, 3>> predict_heads(const SinusoidEstimator& est,
                                                                   std::span<const IQFrame* const> frames) {
    std::vector<std::array<nn::Tensor<float>, 3>> heads;
    const std::size_t B = frames.size();
    const std::size_t N = est.frame_length();
    nn::Tensor<float> residual = frames_to_tensor<float>(frames);
    auto& self = const_cast<SinusoidEstimator&>(est);
    for (std::size_t k = 0; k < est.count(); ++k) {
        const auto out = static_cast<const nn::Network<float>&>(self.block(k)).predict(residual);
        heads.push_back({out[0], out[1], out[2]});
        for (std::size_t b = 0; b < B; ++b) {
            const ComplexFrame r = reconstruct(out[0].data[b], out[1].data[b], out[2].data[b], N);
            float* row = residual.data.data() + b * 2 * N;
            for (std::size_t n = 0; n < N; ++n) {
                row[2 * n] -= static_cast<float>(r[n].real());
                row[2 * n + 1] -= static_cast<float>(r[n].imag());
            }
        }
    }
    return heads;
}

/// Trains the detection module with the expected detection loss.
inline TrainResult train_detection(DetectionModel& model, const std::vector<LabeledExample>& data,
                                   const TrainConfig& cfg, std::size_t epochs) {
    if (data.empty()) {
        throw ParameterError("train_detection: empty dataset");
    }
    for (const auto& ex : data) {
        if (ex.label.count() < 1 || ex.label.count() > model.M) {
            throw ParameterError("train_detection: label count outside {1..M}");
        }
    }
    model.net.for_each_layer([&](const std::string&, nn::Layer<float>& l) {
        if (auto* d = dynamic_cast<nn::Dropout<float>*>(&l)) {
            d->reseed(derive_seed(cfg.seed, Stream::dropout));
        }
    });
    auto [train, val] = split_examples(data, cfg.validation_fraction);
    nn::AdamState<float> adam;
    std::vector<nn::Tensor<float>> best = model.net.snapshot();
    auto counts_of = [](std::span<const LabeledExample* const> ex, std::span<const std::size_t> idx) {
        std::vector<std::size_t> c;
        for (std::size_t i : idx) {
            c.push_back(ex[i]->label.count());
        }
        return c;
    };

    FitHooks hooks;
    hooks.set_lr = [&](double lr) { adam.lr = lr; };
    hooks.train_step = [&](std::span<const std::size_t> idx) {
        const auto frames = detail::frames_of(train, idx);
        const auto counts = counts_of(train, idx);
        model.net.zero_grad();
        const auto out = model.net.forward(frames_to_tensor<float>(frames), nn::Mode::train);
        nn::Tensor<float> g;
        const double loss = expected_detection_loss(out[0], counts, g);
        model.net.backward({g});
        nn::adam_step(model.net.params(), adam);
        return loss;
    };
    hooks.validation_loss = [&] {
        return detail::batched_mean(val.size(), 256, [&](std::span<const std::size_t> idx) {
            const auto frames = detail::frames_of(val, idx);
            const auto counts = counts_of(val, idx);
            const auto out = model.net.predict(frames_to_tensor<float>(frames));
            nn::Tensor<float> g;
            return expected_detection_loss(out[0], counts, g);
        });
    };
    hooks.save_best = [&] { best = model.net.snapshot(); };
    hooks.restore_best = [&] { model.net.restore(best); };
    return fit(train.size(), epochs, cfg, hooks);
}

/// Stacked-output baseline estimator (MLP or Conv) trained with the same loss.
struct BaselineModel {
    BaselineKind kind = BaselineKind::mlp;
    std::size_t N = 64;
    std::size_t m = 1;
    nn::Network<float> net;

    BaselineModel() = default;
    BaselineModel(BaselineKind k, std::size_t n, std::size_t count)
        : kind(k), N(n), m(count), net(build_baseline<float>(k, n, count)) {}

    [[nodiscard]] ParameterSet estimate(const IQFrame& x) const {
        const IQFrame* frames[1] = {&x};
        const auto out = net.predict(frames_to_tensor<float>(frames));
        ParameterSet p;
        for (std::size_t k = 0; k < m; ++k) {
            p.amps.push_back(out[0].data[k]);
            p.freqs.push_back(out[0].data[m + k]);
            p.phases.push_back(out[0].data[2 * m + k]);
        }
        return p;
    }
};

namespace detail {
/// Splits a [B, 3m] stacked output into per-head [B, 1] triples and back.
inline std::vector<std::array<nn::Tensor<float>, 3>> unstack(const nn::Tensor<float>& y, std::size_t m) {
    const std::size_t B = y.dim(0);
    std::vector<std::array<nn::Tensor<float>, 3>> heads(m);
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t p = 0; p < 3; ++p) {
            heads[k][p] = nn::Tensor<float>({B, 1});
            for (std::size_t b = 0; b < B; ++b) {
                heads[k][p].data[b] = y.data[b * 3 * m + p * m + k];
            }
        }
    }
    return heads;
}
inline nn::Tensor<float> stack(const std::vector<std::array<nn::Tensor<float>, 3>>& g, std::size_t m) {
    const std::size_t B = g[0][0].dim(0);
    nn::Tensor<float> y({B, 3 * m});
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t p = 0; p < 3; ++p) {
            for (std::size_t b = 0; b < B; ++b) {
                y.data[b * 3 * m + p * m + k] = g[k][p].data[b];
            }
        }
    }
    return y;
}
} // namespace detail

inline TrainResult train_baseline(BaselineModel& model, const std::vector<LabeledExample>& data,
                                  const ThresholdSet& thresholds, const TrainConfig& cfg, std::size_t epochs) {
    const std::size_t m = model.m;
    for (const auto& ex : data) {
        if (ex.label.count() != m) {
            throw ParameterError("train_baseline: dataset mixes sinusoid counts");
        }
    }
    const LossVector thr = thresholds.for_count(m);
    auto [train, val] = split_examples(data, cfg.validation_fraction);
    nn::AdamState<float> adam;
    std::vector<nn::Tensor<float>> best = model.net.snapshot();
    FitHooks hooks;
    hooks.set_lr = [&](double lr) { adam.lr = lr; };
    hooks.train_step = [&](std::span<const std::size_t> idx) {
        const auto frames = detail::frames_of(train, idx);
        const auto labels = detail::labels_of(train, idx);
        model.net.zero_grad();
        const auto out = model.net.forward(frames_to_tensor<float>(frames), nn::Mode::train);
        std::vector<std::array<nn::Tensor<float>, 3>> grads;
        const double loss = effective_estimator_loss(detail::unstack(out[0], m), make_targets(labels, m), thr, grads);
        model.net.backward({detail::stack(grads, m)});
        nn::adam_step(model.net.params(), adam);
        return loss;
    };
    hooks.validation_loss = [&] {
        return detail::batched_mean(val.size(), 256, [&](std::span<const std::size_t> idx) {
            const auto frames = detail::frames_of(val, idx);
            const auto labels = detail::labels_of(val, idx);
            const auto out = model.net.predict(frames_to_tensor<float>(frames));
            std::vector<std::array<nn::Tensor<float>, 3>> grads;
            return effective_estimator_loss(detail::unstack(out[0], m), make_targets(labels, m), thr, grads);
        });
    };
    hooks.save_best = [&] { best = model.net.snapshot(); };
    hooks.restore_best = [&] { model.net.restore(best); };
    return fit(train.size(), epochs, cfg, hooks);
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_estimator(SinusoidEstimator& est, const std::string& path) {
    nn::write_checkpoint(path, est.named_tensors());
}

inline SinusoidEstimator load_estimator(const std::string& path, std::size_t N, std::size_t m, int bits) {
    SinusoidEstimator est(N, m, bits);
    nn::read_checkpoint(path, est.named_tensors());
    return est;
}

inline void save_detection(DetectionModel& d, const std::string& path) {
    nn::write_checkpoint(path, d.net.named_tensors());
}

inline DetectionModel load_detection(const std::string& path, std::size_t N, std::size_t M, int bits) {
    DetectionModel d(N, M, bits);
    nn::read_checkpoint(path, d.net.named_tensors());
    return d;
}

/// Text manifest of a SignalNet bundle:
///   qsine-bundle v1 / bits = b / N = n / M = m / detection = path / estimator.<m> = path
struct BundleManifest {
    int bits = 0;
    std::size_t N = 64;
    std::size_t M = 5;
    std::string detection;
    std::map<std::size_t, std::string> estimators;
};

inline void write_bundle(const std::string& path, const BundleManifest& b) {
    std::ofstream os(path);
    if (!os) {
        throw DataError("bundle: cannot write " + path);
    }
    os << "qsine-bundle v1\n";
    os << "bits = " << b.bits << "\nN = " << b.N << "\nM = " << b.M << "\n";
    if (!b.detection.empty()) {
        os << "detection = " << b.detection << "\n";
    }
    for (const auto& [m, p] : b.estimators) {
        os << "estimator." << m << " = " << p << "\n";
    }
}

inline BundleManifest read_bundle(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("bundle: cannot open " + path);
    }
    std::string line;
    if (!std::getline(is, line) || line != "qsine-bundle v1") {
        throw DataError("bundle: bad header in " + path);
    }
    BundleManifest b;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto z = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string{} : s.substr(a, z - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "bits") {
            b.bits = std::stoi(value);
        } else if (key == "N") {
            b.N = std::stoul(value);
        } else if (key == "M") {
            b.M = std::stoul(value);
        } else if (key == "detection") {
            b.detection = value;
        } else if (key.rfind("estimator.", 0) == 0) {
            b.estimators[std::stoul(key.substr(10))] = value;
        }
    }
    return b;
}

} // namespace qsine
