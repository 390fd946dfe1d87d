#pragma once

#include <qsine/errors.hpp>
#include <qsine/nn/layers.hpp>
#include <qsine/nn/tensor.hpp>
#include <qsine/rng.hpp>

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace qsine::nn {

/// Directed acyclic graph of unary layers. Every node consumes the output of
/// one earlier node (or the graph input, named "input"), so insertion order
/// is a topological order and cycles cannot be built.
template <typename T>
class Network {
public:
    static constexpr const char* kInput = "input";

    Network() = default;
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    Layer<T>& add(std::string name, std::unique_ptr<Layer<T>> layer, const std::string& input) {
        if (name == kInput || find(name) >= 0) {
            throw ConfigurationError("network: duplicate node name " + name);
        }
        int src = -1;
        if (input != kInput) {
            src = find(input);
            if (src < 0) {
                throw ConfigurationError("network: node " + name + " reads unknown node " + input);
            }
        }
        nodes_.push_back({std::move(name), std::move(layer), src});
        return *nodes_.back().layer;
    }

    /// Appends a layer reading the most recently added node.
    template <typename L, typename... Args>
    L& chain(std::string name, Args&&... args) {
        const std::string input = nodes_.empty() ? std::string(kInput) : nodes_.back().name;
        return chain_from<L>(std::move(name), input, std::forward<Args>(args)...);
    }

    template <typename L, typename... Args>
    L& chain_from(std::string name, const std::string& input, Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        add(std::move(name), std::move(layer), input);
        return ref;
    }

    void set_outputs(const std::vector<std::string>& names) {
        outputs_.clear();
        for (const auto& n : names) {
            const int id = find(n);
            if (id < 0) {
                throw ConfigurationError("network: unknown output node " + n);
            }
            outputs_.push_back(id);
        }
    }

    [[nodiscard]] std::size_t output_count() const { return outputs_.size(); }

    std::vector<Tensor<T>> forward(const Tensor<T>& x, Mode mode) {
        std::vector<Tensor<T>> acts(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& src = nodes_[i].input < 0 ? x : acts[static_cast<std::size_t>(nodes_[i].input)];
            acts[i] = nodes_[i].layer->forward(src, mode);
        }
        return collect(acts);
    }

    /// Inference pass; const and free of side effects.
    [[nodiscard]] std::vector<Tensor<T>> predict(const Tensor<T>& x) const {
        std::vector<Tensor<T>> acts(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& src = nodes_[i].input < 0 ? x : acts[static_cast<std::size_t>(nodes_[i].input)];
            acts[i] = nodes_[i].layer->predict(src);
        }
        return collect(acts);
    }

    /// Backpropagates per-output gradients (an empty tensor means zero) from
    /// the last forward() call. Returns the gradient w.r.t. the graph input.
    Tensor<T> backward(const std::vector<Tensor<T>>& grad_outputs) {
        if (grad_outputs.size() != outputs_.size()) {
            throw ShapeError("network: expected one gradient per output");
        }
        std::vector<Tensor<T>> grads(nodes_.size());
        for (std::size_t k = 0; k < outputs_.size(); ++k) {
            if (!grad_outputs[k].empty()) {
                accumulate(grads[static_cast<std::size_t>(outputs_[k])], grad_outputs[k]);
            }
        }
        Tensor<T> grad_input;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (grads[i].empty()) {
                continue;
            }
            Tensor<T> g = nodes_[i].layer->backward(grads[i]);
            grads[i] = Tensor<T>{};
            if (nodes_[i].input < 0) {
                accumulate(grad_input, g);
            } else {
                accumulate(grads[static_cast<std::size_t>(nodes_[i].input)], g);
            }
        }
        return grad_input;
    }

    void init(Rng& rng) {
        for (auto& n : nodes_) {
            n.layer->init(rng);
        }
    }

    void zero_grad() {
        for (auto* p : params()) {
            p->grad.fill(T{0});
        }
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (auto& n : nodes_) {
            for (auto* p : n.layer->params()) {
                out.push_back(p);
            }
        }
        return out;
    }

    /// Every persistent tensor (parameters, then running statistics) with a
    /// stable name, in node order. This is the checkpoint manifest order.
    std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& n : nodes_) {
            for (auto* p : n.layer->params()) {
                out.emplace_back(n.name + "/" + p->role, &p->value);
            }
            std::size_t s = 0;
            for (auto* t : n.layer->state()) {
                out.emplace_back(n.name + "/" + to_string(n.layer->kind()) + ".state" + std::to_string(s++), t);
            }
        }
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& n : nodes_) {
            for (auto* p : n.layer->params()) {
                total += p->value.size();
            }
        }
        return total;
    }

    Layer<T>& layer(const std::string& name) {
        const int id = find(name);
        if (id < 0) {
            throw ConfigurationError("network: unknown node " + name);
        }
        return *nodes_[static_cast<std::size_t>(id)].layer;
    }

    template <typename F>
    void for_each_layer(F&& f) {
        for (auto& n : nodes_) {
            f(n.name, *n.layer);
        }
    }

    /// Copies of every persistent tensor, for best-epoch restore.
    std::vector<Tensor<T>> snapshot() {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named_tensors()) {
            out.push_back(*t);
        }
        return out;
    }

    void restore(const std::vector<Tensor<T>>& snap) {
        auto named = named_tensors();
        if (named.size() != snap.size()) {
            throw ConfigurationError("network: snapshot does not match network");
        }
        for (std::size_t i = 0; i < snap.size(); ++i) {
            *named[i].second = snap[i];
        }
    }

private:
    struct Node {
        std::string name;
        std::unique_ptr<Layer<T>> layer;
        int input = -1;
    };

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].name == name) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    std::vector<Tensor<T>> collect(std::vector<Tensor<T>>& acts) const {
        if (outputs_.empty()) {
            throw ConfigurationError("network: no outputs declared");
        }
        std::vector<Tensor<T>> out;
        out.reserve(outputs_.size());
        for (int id : outputs_) {
            out.push_back(acts[static_cast<std::size_t>(id)]);
        }
        return out;
    }

    static void accumulate(Tensor<T>& into, const Tensor<T>& g) {
        if (into.empty()) {
            into = g;
            return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            into.data[i] += g.data[i];
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> outputs_;
};

} // namespace qsine::nn
