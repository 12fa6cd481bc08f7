#include "fx/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace fx {

double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport grad_check(ParamStore& params, const LossBuilder& build_loss, double h, double floor) {
    params.zero_grad();
    {
        Tape tape;
        tape.backward(build_loss(tape));
    }
    auto eval = [&] {
        Tape tape;
        return build_loss(tape).value().item();
    };

    GradCheckReport report;
    for (auto& p : params.all()) {
        if (!p.trainable) {
            report.frozen.push_back(p.name);
            continue;
        }
        GradCheckEntry entry{p.name, p.component, p.value.numel(), 0.0};
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double saved = p.value[i];
            const double hi = saved + h, lo = saved - h;
            p.value[i] = hi;
            const double up = eval();
            p.value[i] = lo;
            const double down = eval();
            p.value[i] = saved;
            const double numeric = (up - down) / (hi - lo);
            entry.max_rel_error = std::max(entry.max_rel_error, relative_error(p.grad[i], numeric, floor));
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.trainable.push_back(std::move(entry));
    }
    return report;
}

}  // namespace fx
