#include "fx/adamw.hpp"

#include <cmath>
#include <stdexcept>

namespace fx {

void adamw_update(std::span<double> theta, std::span<const double> grad, AdamWState& state, double lr,
                  const AdamWHyper& hyper) {
    if (state.m.empty()) {
        state.m = Tensor({theta.size()}, 0.0);
        state.v = Tensor({theta.size()}, 0.0);
    }
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    auto m = state.m.data();
    auto v = state.v.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] = theta[i] - lr * hyper.weight_decay * theta[i] - lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
}

void AdamW::step(ParamStore& params, const LrFn& lr_of) {
    for (const auto& p : params.all()) {
        if (!p.trainable) continue;
        for (double g : p.grad.data())
            if (!std::isfinite(g)) throw std::domain_error("adamw: non-finite gradient for parameter '" + p.name + "'");
    }
    for (auto& p : params.all()) {
        if (!p.trainable) continue;
        auto& st = states_[p.name];
        if (st.m.empty()) {
            st.m = Tensor(p.value.shape(), 0.0);
            st.v = Tensor(p.value.shape(), 0.0);
        }
        adamw_update(p.value.data(), p.grad.data(), st, lr_of(p), hyper_);
    }
}

const AdamWState* AdamW::state(const std::string& name) const {
    auto it = states_.find(name);
    return it == states_.end() ? nullptr : &it->second;
}

}  // namespace fx
