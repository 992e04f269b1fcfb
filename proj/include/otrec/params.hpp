#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "otrec/graph.hpp"
#include "otrec/rng.hpp"
#include "otrec/tensor.hpp"

namespace otrec {

template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;
};

template <typename S>
class ParamStore {
public:
    Param<S>& add(const std::string& name, std::vector<int> shape) {
        if (find(name)) throwf("duplicate parameter: %s", name.c_str());
        params_.push_back(Param<S>{name, Tensor<S>(shape, S(0)), Tensor<S>(std::move(shape), S(0))});
        return params_.back();
    }

    Param<S>* find(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    const Param<S>* find(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    Param<S>& require(const std::string& name) {
        Param<S>* p = find(name);
        if (!p) throwf("unknown parameter: %s", name.c_str());
        return *p;
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(S(0));
    }

    double grad_norm() const {
        double total = 0;
        for (const auto& p : params_) {
            for (S g : p.grad.data) total += static_cast<double>(g) * static_cast<double>(g);
        }
        return std::sqrt(total);
    }

    void scale_grads(double k) {
        for (auto& p : params_) {
            for (S& g : p.grad.data) g = static_cast<S>(g * k);
        }
    }

    size_t size() const { return params_.size(); }
    Param<S>& operator[](size_t i) { return params_[i]; }
    const Param<S>& operator[](size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<Param<S>> params_;
};

// uniform +-sqrt(6 / (fan_in + fan_out))
template <typename S>
void glorot_init(Tensor<S>& w, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : w.data) v = static_cast<S>(rng.uniform(-bound, bound));
}

// Binds every parameter of a store into a graph as leaf nodes, in store
// order, and copies gradients back out after a backward pass.
template <typename S>
class GraphBinding {
public:
    GraphBinding(Graph<S>& g, ParamStore<S>& store) : graph_(&g), store_(&store) {
        vars_.reserve(store.size());
        for (size_t i = 0; i < store.size(); ++i) vars_.push_back(g.leaf(store[i].value));
    }

    // bind pre-existing graph vars (store-order) instead of the stored values;
    // used by gradient verification to probe parameters
    GraphBinding(Graph<S>& g, ParamStore<S>& store, std::vector<Var> vars)
        : graph_(&g), store_(&store), vars_(std::move(vars)) {
        if (vars_.size() != store.size()) throwf("binding size mismatch");
    }

    Var operator[](const std::string& name) const {
        for (size_t i = 0; i < store_->size(); ++i) {
            if ((*store_)[i].name == name) return vars_[i];
        }
        throwf("unbound parameter: %s", name.c_str());
    }

    // store.grad += scale * graph gradient
    void accumulate_grads(S scale) {
        for (size_t i = 0; i < store_->size(); ++i) {
            const Tensor<S>& g = graph_->grad(vars_[i]);
            Tensor<S>& dst = (*store_)[i].grad;
            for (int64_t j = 0; j < dst.numel(); ++j) dst[j] += scale * g[j];
        }
    }

private:
    Graph<S>* graph_;
    ParamStore<S>* store_;
    std::vector<Var> vars_;
};

}  // namespace otrec
