#include <cmath>
#include <limits>
#include <stdexcept>

#include "fx/losses.hpp"

namespace fx {

Assignment hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2) throw std::invalid_argument("hungarian_match: cost must be a Q x T matrix");
    const std::size_t q = cost.dim(0), t = cost.dim(1);
    if (q < t) throw std::invalid_argument("hungarian_match: fewer queries (" + std::to_string(q) + ") than targets (" +
                                           std::to_string(t) + ")");
    for (double c : cost.data())
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian_match: non-finite cost");

    // Rows are targets (n <= m), columns are queries; 1-based with a virtual column 0.
    const std::size_t n = t, m = q;
    auto a = [&](std::size_t i, std::size_t j) { return cost[(j - 1) * t + (i - 1)]; };
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment out;
    out.target_to_query.assign(t, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) out.target_to_query[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < t; ++i) out.cost += cost[out.target_to_query[i] * t + i];
    return out;
}

}  // namespace fx
