#pragma once

#include <functional>
#include <vector>

#include "otrec/graph.hpp"
#include "otrec/tensor.hpp"

namespace otrec {

// Central finite differences vs reverse mode. `build` reconstructs the graph
// through the op under test from the current input values and returns a
// scalar output; it is re-evaluated for every probe, so it must be a pure
// function of the inputs.
//
// Returns max over input elements of |analytic - numeric| /
// max(|analytic|, |numeric|, 1e-8).
inline double grad_check(
    const std::function<Var(Graph<double>&, const std::vector<Var>&)>& build,
    std::vector<Tensor<double>>& inputs, double h = 1e-5) {
    Graph<double> g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.leaf(t));
    const Var out = build(g, vars);
    if (g.val(out).numel() != 1) throwf("grad_check: build must return a scalar");
    g.backward(out);

    auto scalar_at = [&](size_t which, int64_t j, double v) {
        const double saved = inputs[which][j];
        inputs[which][j] = v;
        Graph<double> g2;
        std::vector<Var> vars2;
        vars2.reserve(inputs.size());
        for (const auto& t : inputs) vars2.push_back(g2.leaf(t));
        const double y = g2.val(build(g2, vars2))[0];
        inputs[which][j] = saved;
        return y;
    };

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<double>& analytic = g.grad(vars[i]);
        for (int64_t j = 0; j < inputs[i].numel(); ++j) {
            const double x = inputs[i][j];
            const double fp = scalar_at(i, j, x + h);
            const double fm = scalar_at(i, j, x - h);
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[j];
            const double err =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace otrec
