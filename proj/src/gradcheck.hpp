#ifndef DV_GRADCHECK_HPP
#define DV_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "graph.hpp"
#include "tensor.hpp"

namespace dv {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t checked = 0;
    std::string worst;
};

// Central-difference check in double precision. `build` receives a fresh
// graph plus input ids for `params` (in order) and returns the scalar loss
// id; it must be a pure function of the parameter values. Relative error is
// |analytic - numeric| / max(|numeric|, 1e-8). `stride` subsamples entries
// for larger parameter sets; stride 1 checks everything.
template <class Build>
GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor64>> params, Build build,
                           double eps = 1e-5, int64_t stride = 1) {
    std::vector<Tensor64> analytic;
    {
        Graph64 g;
        std::vector<int> ids;
        ids.reserve(params.size());
        for (auto& pr : params) ids.push_back(g.input(pr.second, true));
        int loss = build(g, ids);
        g.backward(loss);
        for (int id : ids) analytic.push_back(g.grad(id));
    }

    auto eval = [&]() -> double {
        Graph64 g;
        std::vector<int> ids;
        ids.reserve(params.size());
        for (auto& pr : params) ids.push_back(g.input(pr.second, false));
        int loss = build(g, ids);
        return g.val(loss)[0];
    };

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor64& t = params[pi].second;
        for (int64_t i = 0; i < t.numel(); i += stride) {
            const double keep = t[i];
            t[i] = keep + eps;
            const double fp = eval();
            t[i] = keep - eps;
            const double fm = eval();
            t[i] = keep;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = analytic[pi][i];
            const double rel = std::abs(ana - num) / std::max(std::abs(num), 1e-8);
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = params[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

}  // namespace dv

#endif
