#ifndef DV_PARAMS_HPP
#define DV_PARAMS_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "graph.hpp"
#include "tensor.hpp"

namespace dv {

// Named trainable tensors plus Adam moment buffers. Entry order is creation
// order and is what checkpoints and the optimizer iterate over.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        Tensor m;
        Tensor v;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    Tensor& add(const std::string& name, Tensor init) {
        check(index.find(name) == index.end(), "param store: duplicate name " + name);
        Entry e;
        e.name = name;
        e.m = Tensor(init.shape);
        e.v = Tensor(init.shape);
        e.value = std::move(init);
        index[name] = entries.size();
        entries.push_back(std::move(e));
        return entries.back().value;
    }

    bool has(const std::string& name) const { return index.find(name) != index.end(); }

    Entry& at(const std::string& name) {
        auto it = index.find(name);
        check(it != index.end(), "param store: unknown name " + name);
        return entries[it->second];
    }

    const Entry& at(const std::string& name) const {
        auto it = index.find(name);
        check(it != index.end(), "param store: unknown name " + name);
        return entries[it->second];
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.value.numel();
        return n;
    }
};

// Binds every parameter into a graph as a differentiable input. Returned ids
// align with store entry order.
inline std::vector<int> bind_params(Graph& g, const ParamStore& ps) {
    std::vector<int> ids;
    ids.reserve(ps.entries.size());
    for (const auto& e : ps.entries) ids.push_back(g.input(e.value, true));
    return ids;
}

// Parameter ids bound into a graph, addressable by name.
struct BoundParams {
    const ParamStore* ps = nullptr;
    std::vector<int> ids;

    int operator()(const std::string& name) const {
        auto it = ps->index.find(name);
        check(it != ps->index.end(), "bound params: unknown name " + name);
        return ids[it->second];
    }
};

inline BoundParams bind_named(Graph& g, const ParamStore& ps) {
    return BoundParams{&ps, bind_params(g, ps)};
}

// Same binding but with gradients disabled, for frozen networks that sit
// inside a training graph (feature extractors, the discriminator during a
// generator step).
template <class S>
BoundParams bind_frozen(GraphT<S>& g, const ParamStore& ps) {
    BoundParams b;
    b.ps = &ps;
    b.ids.reserve(ps.entries.size());
    for (const auto& e : ps.entries) b.ids.push_back(g.input(e.value.cast<S>(), false));
    return b;
}

struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;

    // grads[i] pairs with ps.entries[i]; parameters with no gradient this
    // step still advance the moment decay (gradient zero).
    void step(ParamStore& ps, Graph& g, const std::vector<int>& ids) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, (double)t);
        const double bc2 = 1.0 - std::pow(beta2, (double)t);
        for (size_t i = 0; i < ps.entries.size(); ++i) {
            auto& e = ps.entries[i];
            const Tensor& grad = g.grad(ids[i]);
            for (int64_t j = 0; j < e.value.numel(); ++j) {
                const double gj = grad[j];
                const double m = beta1 * (double)e.m[j] + (1.0 - beta1) * gj;
                const double v = beta2 * (double)e.v[j] + (1.0 - beta2) * gj * gj;
                e.m[j] = (float)m;
                e.v[j] = (float)v;
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                e.value[j] -= (float)(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

}  // namespace dv

#endif
