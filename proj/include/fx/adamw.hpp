#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "fx/parameter.hpp"
#include "fx/tensor.hpp"

namespace fx {

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    std::uint64_t step_count = 0;
    Tensor m;
    Tensor v;
};

/// One decoupled-weight-decay Adam update of a single tensor, in place.
void adamw_update(std::span<double> theta, std::span<const double> grad, AdamWState& state, double lr,
                  const AdamWHyper& hyper);

/// AdamW over a ParamStore with per-parameter learning rates. Frozen
/// parameters are skipped entirely, so their values and moments stay untouched.
class AdamW {
public:
    using LrFn = std::function<double(const Parameter&)>;

    explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

    /// Throws std::domain_error naming the first trainable parameter whose
    /// gradient is non-finite; nothing is modified in that case.
    void step(ParamStore& params, const LrFn& lr_of);

    const AdamWHyper& hyper() const noexcept { return hyper_; }
    const AdamWState* state(const std::string& name) const;
    std::map<std::string, AdamWState>& states() noexcept { return states_; }
    const std::map<std::string, AdamWState>& states() const noexcept { return states_; }

private:
    AdamWHyper hyper_;
    std::map<std::string, AdamWState> states_;
};

}  // namespace fx
