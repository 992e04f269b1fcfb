#pragma once

#include <cmath>
#include <vector>

#include "otrec/params.hpp"
#include "otrec/tensor.hpp"

namespace otrec {

// Bias-corrected Adam over a ParamStore.
template <typename S>
class Adam {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;

    explicit Adam(double lr_in = 1e-3) : lr(lr_in) {}

    void step(ParamStore<S>& params) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.value.shape, S(0));
                v_.emplace_back(p.value.shape, S(0));
            }
        }
        if (m_.size() != params.size()) throwf("adam: parameter set changed");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Param<S>& p = params[i];
            Tensor<S>& m = m_[i];
            Tensor<S>& v = v_[i];
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                const double g = static_cast<double>(p.grad[j]);
                if (!std::isfinite(g))
                    throwf("adam: non-finite gradient in %s at element %lld", p.name.c_str(),
                           static_cast<long long>(j));
                const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * g;
                const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * g * g;
                m[j] = static_cast<S>(mj);
                v[j] = static_cast<S>(vj);
                const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps);
                p.value[j] = static_cast<S>(static_cast<double>(p.value[j]) - update);
            }
        }
    }

    const std::vector<Tensor<S>>& first_moments() const { return m_; }
    const std::vector<Tensor<S>>& second_moments() const { return v_; }

private:
    std::vector<Tensor<S>> m_;
    std::vector<Tensor<S>> v_;
};

}  // namespace otrec
