#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fx/autodiff.hpp"
#include "fx/parameter.hpp"

namespace fx {

struct GradCheckEntry {
    std::string name;
    ComponentId component;
    std::size_t elements = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> trainable;
    std::vector<std::string> frozen;
    double max_rel_error = 0.0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Builds the loss on a fresh tape; parameters must be bound with Tape::parameter.
using LossBuilder = std::function<Var(Tape&)>;

/// Relative error used by grad_check: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares reverse-mode gradients of every trainable parameter against
/// central finite differences with step h. Frozen parameters are listed but
/// not perturbed. `floor` bounds the relative-error denominator from below.
GradCheckReport grad_check(ParamStore& params, const LossBuilder& build_loss, double h = 1e-5, double floor = 1e-6);

}  // namespace fx
