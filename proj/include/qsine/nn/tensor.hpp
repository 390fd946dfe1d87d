#pragma once

#include <qsine/errors.hpp>

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace qsine::nn {

/// Dense row-major tensor. Sequence activations use [batch, length, channels];
/// dense activations use [batch, features].
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, T fill = T{0}) : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
    }

    [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
    [[nodiscard]] bool empty() const noexcept { return data.empty(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape.at(i); }
    [[nodiscard]] std::size_t rank() const noexcept { return shape.size(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? ", " : "") + std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<std::size_t>& s, const char* who) {
    if (t.shape != s) {
        throw ShapeError(std::string(who) + ": expected shape " + shape_string(s) + ", got " + shape_string(t.shape));
    }
}

/// Trainable tensor and its accumulated gradient.
template <typename T>
struct Param {
    std::string role;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string r, std::vector<std::size_t> shape) : role(std::move(r)), value(shape), grad(shape) {}
};

enum class Mode { train, infer };

} // namespace qsine::nn
