#pragma once

#include <qsine/errors.hpp>
#include <qsine/nn/tensor.hpp>
#include <qsine/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace qsine::nn {

enum class LayerKind { conv1d, maxpool1d, batchnorm1d, dense, activation, dropout, flatten };
enum class ActivationKind { relu, selu, softmax, linear };

inline const char* to_string(LayerKind k) {
    switch (k) {
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::maxpool1d: return "maxpool1d";
    case LayerKind::batchnorm1d: return "batchnorm1d";
    case LayerKind::dense: return "dense";
    case LayerKind::activation: return "activation";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    }
    return "?";
}

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

/// A unary layer. forward() records what backward() needs; predict() is a
/// side-effect-free inference pass that may run concurrently.
template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    [[nodiscard]] virtual LayerKind kind() const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
    [[nodiscard]] virtual Tensor<T> predict(const Tensor<T>& x) const = 0;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
    virtual std::vector<Param<T>*> params() { return {}; }
    /// Non-trainable persistent tensors (BatchNorm running statistics).
    virtual std::vector<Tensor<T>*> state() { return {}; }
    virtual void init(Rng&) {}
};

namespace detail {
template <typename T>
void lecun_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
    const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (auto& v : w.data) {
        v = static_cast<T>(uniform(rng, -limit, limit));
    }
}
} // namespace detail

/// Cross-correlation over [batch, length, in_ch] with "same" zero padding,
/// stride 1. Weights are stored [kernel][in_ch][out_ch].
template <typename T>
class Conv1D final : public Layer<T> {
public:
    Conv1D(std::size_t in_ch, std::size_t out_ch, std::size_t kernel = 3)
        : in_(in_ch), out_(out_ch), k_(kernel), weight_("conv1d.weight", {kernel, in_ch, out_ch}),
          bias_("conv1d.bias", {out_ch}) {}

    [[nodiscard]] LayerKind kind() const override { return LayerKind::conv1d; }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

    void init(Rng& rng) override {
        detail::lecun_uniform(weight_.value, k_ * in_, rng);
        bias_.value.fill(T{0});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        input_ = x;
        return predict(x);
    }

    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override {
        check(x);
        const std::size_t B = x.dim(0);
        const std::size_t L = x.dim(1);
        const std::size_t pad = (k_ - 1) / 2;
        Tensor<T> y({B, L, out_});
        const T* w = weight_.value.data.data();
        for (std::size_t b = 0; b < B; ++b) {
            const T* xb = x.data.data() + b * L * in_;
            T* yb = y.data.data() + b * L * out_;
            for (std::size_t n = 0; n < L; ++n) {
                T* yr = yb + n * out_;
                std::copy(bias_.value.data.begin(), bias_.value.data.end(), yr);
                for (std::size_t j = 0; j < k_; ++j) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + j) - static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) {
                        continue;
                    }
                    const T* xr = xb + static_cast<std::size_t>(src) * in_;
                    for (std::size_t ci = 0; ci < in_; ++ci) {
                        const T xv = xr[ci];
                        const T* wr = w + (j * in_ + ci) * out_;
                        for (std::size_t co = 0; co < out_; ++co) {
                            yr[co] += xv * wr[co];
                        }
                    }
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        const Tensor<T>& x = input_;
        const std::size_t B = x.dim(0);
        const std::size_t L = x.dim(1);
        const std::size_t pad = (k_ - 1) / 2;
        Tensor<T> gx(x.shape);
        const T* w = weight_.value.data.data();
        T* gw = weight_.grad.data.data();
        T* gb = bias_.grad.data.data();
        for (std::size_t b = 0; b < B; ++b) {
            const T* xb = x.data.data() + b * L * in_;
            T* gxb = gx.data.data() + b * L * in_;
            const T* gyb = g.data.data() + b * L * out_;
            for (std::size_t n = 0; n < L; ++n) {
                const T* gr = gyb + n * out_;
                for (std::size_t co = 0; co < out_; ++co) {
                    gb[co] += gr[co];
                }
                for (std::size_t j = 0; j < k_; ++j) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + j) - static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) {
                        continue;
                    }
                    const T* xr = xb + static_cast<std::size_t>(src) * in_;
                    T* gxr = gxb + static_cast<std::size_t>(src) * in_;
                    for (std::size_t ci = 0; ci < in_; ++ci) {
                        const T xv = xr[ci];
                        const T* wr = w + (j * in_ + ci) * out_;
                        T* gwr = gw + (j * in_ + ci) * out_;
                        T acc{0};
                        for (std::size_t co = 0; co < out_; ++co) {
                            gwr[co] += xv * gr[co];
                            acc += wr[co] * gr[co];
                        }
                        gxr[ci] += acc;
                    }
                }
            }
        }
        return gx;
    }

    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

private:
    void check(const Tensor<T>& x) const {
        if (x.rank() != 3 || x.dim(2) != in_) {
            throw ShapeError("conv1d: expected [batch, length, " + std::to_string(in_) + "], got " +
                             shape_string(x.shape));
        }
    }
    std::size_t in_, out_, k_;
    Param<T> weight_;
    Param<T> bias_;
    Tensor<T> input_;
};

/// Non-overlapping max pooling over the length axis. A length that is not a
/// multiple of the window is padded with -inf.
template <typename T>
class MaxPool1D final : public Layer<T> {
public:
    explicit MaxPool1D(std::size_t size) : size_(size) {
        if (size < 1) {
            throw ParameterError("maxpool1d: size must be >= 1");
        }
    }
    [[nodiscard]] LayerKind kind() const override { return LayerKind::maxpool1d; }

    Tensor<T> forward(const Tensor<T>& x, Mode) override { return run(x, &argmax_, &in_shape_); }
    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override { return run(x, nullptr, nullptr); }

    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> gx(in_shape_);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx.data[argmax_[i]] += g.data[i];
        }
        return gx;
    }

private:
    Tensor<T> run(const Tensor<T>& x, std::vector<std::size_t>* argmax, std::vector<std::size_t>* shape) const {
        if (x.rank() != 3) {
            throw ShapeError("maxpool1d: expected rank-3 input, got " + shape_string(x.shape));
        }
        const std::size_t B = x.dim(0);
        const std::size_t L = x.dim(1);
        const std::size_t C = x.dim(2);
        const std::size_t Lo = (L + size_ - 1) / size_;
        Tensor<T> y({B, Lo, C});
        if (argmax) {
            argmax->assign(y.size(), 0);
            *shape = x.shape;
        }
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t o = 0; o < Lo; ++o) {
                for (std::size_t c = 0; c < C; ++c) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t j = 0; j < size_; ++j) {
                        const std::size_t n = o * size_ + j;
                        if (n >= L) {
                            break;
                        }
                        const std::size_t idx = (b * L + n) * C + c;
                        if (x.data[idx] > best || j == 0) {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                    const std::size_t out_idx = (b * Lo + o) * C + c;
                    y.data[out_idx] = best;
                    if (argmax) {
                        (*argmax)[out_idx] = best_idx;
                    }
                }
            }
        }
        return y;
    }

    std::size_t size_;
    std::vector<std::size_t> argmax_;
    std::vector<std::size_t> in_shape_;
};

/// Per-channel batch normalization over all axes but the last.
/// Running statistics follow r <- momentum * r + (1 - momentum) * batch.
template <typename T>
class BatchNorm1D final : public Layer<T> {
public:
    explicit BatchNorm1D(std::size_t channels, double eps = 1e-5, double momentum = 0.99)
        : C_(channels), eps_(eps), momentum_(momentum), gamma_("batchnorm1d.gamma", {channels}),
          beta_("batchnorm1d.beta", {channels}), running_mean_({channels}), running_var_({channels}, T{1}) {
        gamma_.value.fill(T{1});
    }

    [[nodiscard]] LayerKind kind() const override { return LayerKind::batchnorm1d; }
    Param<T>& gamma() { return gamma_; }
    Param<T>& beta() { return beta_; }
    Tensor<T>& running_mean() { return running_mean_; }
    Tensor<T>& running_var() { return running_var_; }

    void init(Rng&) override {
        gamma_.value.fill(T{1});
        beta_.value.fill(T{0});
        running_mean_.fill(T{0});
        running_var_.fill(T{1});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        if (mode == Mode::infer) {
            return forward_infer(x);
        }
        check(x);
        infer_ = false;
        const std::size_t rows = x.size() / C_;
        if (x.dim(0) < 2) {
            throw ParameterError("batchnorm1d: train mode needs batch >= 2");
        }
        std::vector<double> mean(C_, 0.0);
        std::vector<double> var(C_, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < C_; ++c) {
                mean[c] += static_cast<double>(x.data[r * C_ + c]);
            }
        }
        for (auto& v : mean) {
            v /= static_cast<double>(rows);
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < C_; ++c) {
                const double d = static_cast<double>(x.data[r * C_ + c]) - mean[c];
                var[c] += d * d;
            }
        }
        for (auto& v : var) {
            v /= static_cast<double>(rows);
        }
        inv_std_.assign(C_, T{0});
        for (std::size_t c = 0; c < C_; ++c) {
            inv_std_[c] = static_cast<T>(1.0 / std::sqrt(var[c] + eps_));
            running_mean_.data[c] =
                static_cast<T>(momentum_ * static_cast<double>(running_mean_.data[c]) + (1.0 - momentum_) * mean[c]);
            running_var_.data[c] =
                static_cast<T>(momentum_ * static_cast<double>(running_var_.data[c]) + (1.0 - momentum_) * var[c]);
        }
        xhat_ = Tensor<T>(x.shape);
        Tensor<T> y(x.shape);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < C_; ++c) {
                const std::size_t i = r * C_ + c;
                const T xh = static_cast<T>((static_cast<double>(x.data[i]) - mean[c])) * inv_std_[c];
                xhat_.data[i] = xh;
                y.data[i] = gamma_.value.data[c] * xh + beta_.value.data[c];
            }
        }
        return y;
    }

    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override {
        check(x);
        const std::size_t rows = x.size() / C_;
        Tensor<T> y(x.shape);
        for (std::size_t c = 0; c < C_; ++c) {
            const T scale = gamma_.value.data[c] /
                            static_cast<T>(std::sqrt(static_cast<double>(running_var_.data[c]) + eps_));
            const T shift = beta_.value.data[c] - scale * running_mean_.data[c];
            for (std::size_t r = 0; r < rows; ++r) {
                y.data[r * C_ + c] = scale * x.data[r * C_ + c] + shift;
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        if (g.shape != xhat_.shape) {
            throw ShapeError("batchnorm1d: backward without a matching forward");
        }
        const std::size_t rows = g.size() / C_;
        std::vector<T> sum_g(C_, T{0});
        std::vector<T> sum_gx(C_, T{0});
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < C_; ++c) {
                const std::size_t i = r * C_ + c;
                sum_g[c] += g.data[i];
                sum_gx[c] += g.data[i] * xhat_.data[i];
            }
        }
        for (std::size_t c = 0; c < C_; ++c) {
            beta_.grad.data[c] += sum_g[c];
            gamma_.grad.data[c] += sum_gx[c];
        }
        Tensor<T> gx(g.shape);
        if (infer_) {
            // running statistics are constants: the layer is affine
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < C_; ++c) {
                    gx.data[r * C_ + c] = gamma_.value.data[c] * inv_std_[c] * g.data[r * C_ + c];
                }
            }
            return gx;
        }
        const T inv_rows = T{1} / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < C_; ++c) {
                const std::size_t i = r * C_ + c;
                const T k = gamma_.value.data[c] * inv_std_[c];
                gx.data[i] = k * (g.data[i] - inv_rows * sum_g[c] - xhat_.data[i] * inv_rows * sum_gx[c]);
            }
        }
        return gx;
    }

    std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
    std::vector<Tensor<T>*> state() override { return {&running_mean_, &running_var_}; }

private:
    Tensor<T> forward_infer(const Tensor<T>& x) {
        check(x);
        infer_ = true;
        const std::size_t rows = x.size() / C_;
        inv_std_.assign(C_, T{0});
        xhat_ = Tensor<T>(x.shape);
        for (std::size_t c = 0; c < C_; ++c) {
            inv_std_[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_.data[c]) + eps_));
            for (std::size_t r = 0; r < rows; ++r) {
                xhat_.data[r * C_ + c] = (x.data[r * C_ + c] - running_mean_.data[c]) * inv_std_[c];
            }
        }
        return predict(x);
    }

    void check(const Tensor<T>& x) const {
        if (x.rank() < 2 || x.shape.back() != C_) {
            throw ShapeError("batchnorm1d: last axis must have " + std::to_string(C_) + " channels, got " +
                             shape_string(x.shape));
        }
    }
    std::size_t C_;
    double eps_;
    double momentum_;
    Param<T> gamma_;
    Param<T> beta_;
    Tensor<T> running_mean_;
    Tensor<T> running_var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
    bool infer_ = false;
};

/// y = x W + b over [batch, in]. W is stored [in][out].
template <typename T>
class Dense final : public Layer<T> {
public:
    Dense(std::size_t in, std::size_t out)
        : in_(in), out_(out), weight_("dense.weight", {in, out}), bias_("dense.bias", {out}) {}

    [[nodiscard]] LayerKind kind() const override { return LayerKind::dense; }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

    void init(Rng& rng) override {
        detail::lecun_uniform(weight_.value, in_, rng);
        bias_.value.fill(T{0});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        input_ = x;
        return predict(x);
    }

    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override {
        if (x.rank() != 2 || x.dim(1) != in_) {
            throw ShapeError("dense: expected [batch, " + std::to_string(in_) + "], got " + shape_string(x.shape));
        }
        const std::size_t B = x.dim(0);
        Tensor<T> y({B, out_});
        const T* w = weight_.value.data.data();
        for (std::size_t b = 0; b < B; ++b) {
            T* yr = y.data.data() + b * out_;
            std::copy(bias_.value.data.begin(), bias_.value.data.end(), yr);
            const T* xr = x.data.data() + b * in_;
            for (std::size_t i = 0; i < in_; ++i) {
                const T xv = xr[i];
                const T* wr = w + i * out_;
                for (std::size_t o = 0; o < out_; ++o) {
                    yr[o] += xv * wr[o];
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        const std::size_t B = input_.dim(0);
        Tensor<T> gx({B, in_});
        const T* w = weight_.value.data.data();
        T* gw = weight_.grad.data.data();
        for (std::size_t b = 0; b < B; ++b) {
            const T* gr = g.data.data() + b * out_;
            const T* xr = input_.data.data() + b * in_;
            T* gxr = gx.data.data() + b * in_;
            for (std::size_t o = 0; o < out_; ++o) {
                bias_.grad.data[o] += gr[o];
            }
            for (std::size_t i = 0; i < in_; ++i) {
                const T xv = xr[i];
                const T* wr = w + i * out_;
                T* gwr = gw + i * out_;
                T acc{0};
                for (std::size_t o = 0; o < out_; ++o) {
                    gwr[o] += xv * gr[o];
                    acc += wr[o] * gr[o];
                }
                gxr[i] = acc;
            }
        }
        return gx;
    }

    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

private:
    std::size_t in_, out_;
    Param<T> weight_;
    Param<T> bias_;
    Tensor<T> input_;
};

template <typename T>
class Activation final : public Layer<T> {
public:
    explicit Activation(ActivationKind k) : kind_(k) {}
    [[nodiscard]] LayerKind kind() const override { return LayerKind::activation; }
    [[nodiscard]] ActivationKind activation() const { return kind_; }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        input_ = x;
        output_ = predict(x);
        return output_;
    }

    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override {
        Tensor<T> y(x.shape);
        switch (kind_) {
        case ActivationKind::relu:
            for (std::size_t i = 0; i < x.size(); ++i) {
                y.data[i] = x.data[i] > T{0} ? x.data[i] : T{0};
            }
            break;
        case ActivationKind::selu:
            for (std::size_t i = 0; i < x.size(); ++i) {
                const T v = x.data[i];
                y.data[i] = v > T{0} ? static_cast<T>(kSeluLambda) * v
                                     : static_cast<T>(kSeluLambda * kSeluAlpha) * std::expm1(v);
            }
            break;
        case ActivationKind::softmax: {
            const std::size_t C = x.shape.back();
            for (std::size_t r = 0; r < x.size() / C; ++r) {
                const T* xr = x.data.data() + r * C;
                T* yr = y.data.data() + r * C;
                const T mx = *std::max_element(xr, xr + C);
                T sum{0};
                for (std::size_t c = 0; c < C; ++c) {
                    yr[c] = std::exp(xr[c] - mx);
                    sum += yr[c];
                }
                for (std::size_t c = 0; c < C; ++c) {
                    yr[c] /= sum;
                }
            }
            break;
        }
        case ActivationKind::linear:
            y.data = x.data;
            break;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> gx(g.shape);
        switch (kind_) {
        case ActivationKind::relu:
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx.data[i] = input_.data[i] > T{0} ? g.data[i] : T{0};
            }
            break;
        case ActivationKind::selu:
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = input_.data[i];
                gx.data[i] = v > T{0} ? static_cast<T>(kSeluLambda) * g.data[i]
                                      : (output_.data[i] + static_cast<T>(kSeluLambda * kSeluAlpha)) * g.data[i];
            }
            break;
        case ActivationKind::softmax: {
            const std::size_t C = g.shape.back();
            for (std::size_t r = 0; r < g.size() / C; ++r) {
                const T* yr = output_.data.data() + r * C;
                const T* gr = g.data.data() + r * C;
                T dot{0};
                for (std::size_t c = 0; c < C; ++c) {
                    dot += gr[c] * yr[c];
                }
                for (std::size_t c = 0; c < C; ++c) {
                    gx.data[r * C + c] = yr[c] * (gr[c] - dot);
                }
            }
            break;
        }
        case ActivationKind::linear:
            gx.data = g.data;
            break;
        }
        return gx;
    }

private:
    ActivationKind kind_;
    Tensor<T> input_;
    Tensor<T> output_;
};

/// Inverted dropout: survivors are scaled by 1/(1 - rate) in training so
/// inference is the identity.
template <typename T>
class Dropout final : public Layer<T> {
public:
    explicit Dropout(double rate, std::uint64_t seed = 0) : rate_(rate), rng_(seed) {
        if (!(rate >= 0.0 && rate < 1.0)) {
            throw ParameterError("dropout: rate must be in [0, 1)");
        }
    }
    [[nodiscard]] LayerKind kind() const override { return LayerKind::dropout; }
    [[nodiscard]] double rate() const { return rate_; }
    void reseed(std::uint64_t seed) { rng_.seed(seed); }
    /// Keep the current mask across forward calls (finite-difference checks).
    void freeze_mask(bool on) { frozen_ = on; }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        if (mode == Mode::infer || rate_ == 0.0) {
            mask_.assign(x.size(), T{1});
            return x;
        }
        if (!frozen_ || mask_.size() != x.size()) {
            const T scale = static_cast<T>(1.0 / (1.0 - rate_));
            mask_.resize(x.size());
            for (auto& m : mask_) {
                m = uniform(rng_, 0.0, 1.0) < rate_ ? T{0} : scale;
            }
        }
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) {
            y.data[i] = x.data[i] * mask_[i];
        }
        return y;
    }

    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override { return x; }

    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> gx(g.shape);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx.data[i] = g.data[i] * mask_[i];
        }
        return gx;
    }

private:
    double rate_;
    Rng rng_;
    bool frozen_ = false;
    std::vector<T> mask_;
};

/// [batch, ...] -> [batch, product(...)]
template <typename T>
class Flatten final : public Layer<T> {
public:
    [[nodiscard]] LayerKind kind() const override { return LayerKind::flatten; }
    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        in_shape_ = x.shape;
        return predict(x);
    }
    [[nodiscard]] Tensor<T> predict(const Tensor<T>& x) const override {
        Tensor<T> y;
        y.shape = {x.dim(0), x.size() / x.dim(0)};
        y.data = x.data;
        return y;
    }
    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> gx;
        gx.shape = in_shape_;
        gx.data = g.data;
        return gx;
    }

private:
    std::vector<std::size_t> in_shape_;
};

} // namespace qsine::nn
