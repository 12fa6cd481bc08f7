#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "fx/autodiff.hpp"

namespace fx {
namespace {

[[noreturn]] void shape_fail(const Tape& tape, std::string_view op, const Shape& a, const Shape& b,
                             std::string_view detail = {}) {
    std::string msg = tape.where(op) + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b);
    if (!detail.empty()) {
        msg += " (";
        msg += detail;
        msg += ')';
    }
    throw ShapeError(msg);
}

void require_rank(const Tape& tape, std::string_view op, const Shape& s, std::size_t rank) {
    if (s.size() != rank)
        throw ShapeError(tape.where(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_to_string(s));
}

void same_tape(Var a, Var b, std::string_view op) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

// Index maps from each output element to the contributing element of a and b.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> a_index;
    std::vector<std::size_t> b_index;
    bool trivial = false;
};

BroadcastPlan plan_broadcast(const Tape& tape, std::string_view op, const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.trivial = true;
        return plan;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    plan.out.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_fail(tape, op, a, b, "not broadcastable");
        plan.out[i] = std::max(pa[i], pb[i]);
    }
    std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : acc_a;
        sb[i] = pb[i] == 1 ? 0 : acc_b;
        acc_a *= pa[i];
        acc_b *= pb[i];
    }
    const std::size_t n = shape_numel(plan.out);
    plan.a_index.resize(n);
    plan.b_index.resize(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t k = 0; k < n; ++k) {
        plan.a_index[k] = ia;
        plan.b_index[k] = ib;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < plan.out[d]) break;
            ia -= sa[d] * idx[d];
            ib -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    return plan;
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
    same_tape(a, b, "matmul");
    auto& tape = a.tape();
    const auto& A = a.value();
    const auto& B = b.value();
    require_rank(tape, "matmul", A.shape(), 2);
    require_rank(tape, "matmul", B.shape(), 2);
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    if (B.dim(0) != k) shape_fail(tape, "matmul", A.shape(), B.shape());

    Tensor out({m, n}, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = &B.data()[p * n];
            double* orow = &out.data()[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }

    return tape.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& A = a.value();
        const auto& B = b.value();
        if (grads[0]) {
            auto& ga = *grads[0];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (grads[1]) {
            auto& gb = *grads[1];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                }
        }
    });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t pad) {
    same_tape(x, weight, "conv2d");
    auto& tape = x.tape();
    const auto& X = x.value();
    const auto& W = weight.value();
    require_rank(tape, "conv2d", X.shape(), 4);
    require_rank(tape, "conv2d", W.shape(), 4);
    const std::size_t nb = X.dim(0), cin = X.dim(1), h = X.dim(2), w = X.dim(3);
    const std::size_t cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    if (W.dim(1) != cin) shape_fail(tape, "conv2d", X.shape(), W.shape(), "input channels");
    if (h + 2 * pad < kh || w + 2 * pad < kw) shape_fail(tape, "conv2d", X.shape(), W.shape(), "kernel larger than padded input");
    if (bias.valid()) {
        same_tape(x, bias, "conv2d");
        if (bias.shape() != Shape{cout}) shape_fail(tape, "conv2d", W.shape(), bias.shape(), "bias");
    }
    const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
    const auto ipad = static_cast<std::ptrdiff_t>(pad);

    // Valid output column range for kernel column q: ow index o reads input o + q - pad.
    auto col_range = [=](std::size_t q) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, ipad - static_cast<std::ptrdiff_t>(q));
        const std::ptrdiff_t hi =
            std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow), static_cast<std::ptrdiff_t>(w) + ipad - static_cast<std::ptrdiff_t>(q));
        return std::pair{lo, hi};
    };

    Tensor out({nb, cout, oh, ow}, 0.0);
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t o = 0; o < cout; ++o) {
            double* oplane = &out.data()[(b * cout + o) * oh * ow];
            if (bias.valid()) std::fill(oplane, oplane + oh * ow, bias.value()[o]);
            for (std::size_t c = 0; c < cin; ++c) {
                const double* iplane = &X.data()[(b * cin + c) * h * w];
                for (std::size_t p = 0; p < kh; ++p)
                    for (std::size_t q = 0; q < kw; ++q) {
                        const double wv = W[((o * cin + c) * kh + p) * kw + q];
                        const auto [lo, hi] = col_range(q);
                        for (std::size_t r = 0; r < oh; ++r) {
                            const auto ir = static_cast<std::ptrdiff_t>(r + p) - ipad;
                            if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h)) continue;
                            const double* irow = iplane + ir * static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(q) - ipad;
                            double* orow = oplane + r * ow;
                            for (std::ptrdiff_t s = lo; s < hi; ++s) orow[s] += wv * irow[s];
                        }
                    }
            }
        }

    std::vector<Var> parents{x, weight};
    if (bias.valid()) parents.push_back(bias);
    return tape.record("conv2d", std::move(out), std::move(parents),
                       [=](const Tensor& g, std::span<Tensor* const> grads) {
                           const auto& X = x.value();
                           const auto& W = weight.value();
                           Tensor* gx = grads[0];
                           Tensor* gw = grads[1];
                           Tensor* gbias = grads.size() > 2 ? grads[2] : nullptr;
                           for (std::size_t b = 0; b < nb; ++b)
                               for (std::size_t o = 0; o < cout; ++o) {
                                   const double* gplane = &g.data()[(b * cout + o) * oh * ow];
                                   if (gbias) {
                                       double s = 0.0;
                                       for (std::size_t k = 0; k < oh * ow; ++k) s += gplane[k];
                                       (*gbias)[o] += s;
                                   }
                                   for (std::size_t c = 0; c < cin; ++c) {
                                       const double* iplane = &X.data()[(b * cin + c) * h * w];
                                       double* gxplane = gx ? &gx->data()[(b * cin + c) * h * w] : nullptr;
                                       for (std::size_t p = 0; p < kh; ++p)
                                           for (std::size_t q = 0; q < kw; ++q) {
                                               const std::size_t widx = ((o * cin + c) * kh + p) * kw + q;
                                               const double wv = W[widx];
                                               const auto [lo, hi] = col_range(q);
                                               double dw = 0.0;
                                               for (std::size_t r = 0; r < oh; ++r) {
                                                   const auto ir = static_cast<std::ptrdiff_t>(r + p) - ipad;
                                                   if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(h)) continue;
                                                   const std::ptrdiff_t off =
                                                       ir * static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(q) - ipad;
                                                   const double* grow = gplane + r * ow;
                                                   const double* irow = iplane + off;
                                                   for (std::ptrdiff_t s = lo; s < hi; ++s) dw += grow[s] * irow[s];
                                                   if (gxplane) {
                                                       double* gxrow = gxplane + off;
                                                       for (std::ptrdiff_t s = lo; s < hi; ++s) gxrow[s] += wv * grow[s];
                                                   }
                                               }
                                               if (gw) (*gw)[widx] += dw;
                                           }
                                   }
                               }
                       });
}

Var relu(Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return x.tape().record("relu", std::move(out), {x}, [x](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& X = x.value();
        auto& gx = *grads[0];
        for (std::size_t i = 0; i < X.numel(); ++i)
            if (X[i] > 0.0) gx[i] += g[i];
    });
}

Var sigmoid(Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = stable_sigmoid(v);
    Tensor y = out;
    return x.tape().record("sigmoid", std::move(out), {x}, [y = std::move(y)](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t i = 0; i < y.numel(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var softmax(Var x) {
    auto& tape = x.tape();
    const auto& X = x.value();
    if (X.rank() == 0) throw ShapeError(tape.where("softmax") + ": softmax of a scalar");
    const std::size_t c = X.shape().back();
    const std::size_t rows = X.numel() / c;
    Tensor out(X.shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &X.data()[r * c];
        double* o = &out.data()[r * c];
        const double mx = *std::max_element(in, in + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < c; ++j) o[j] /= z;
    }
    Tensor y = out;
    return tape.record("softmax", std::move(out), {x}, [y = std::move(y), rows, c](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
}

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Var binary_broadcast(std::string_view op, Var a, Var b, Fwd fwd, BwdA dfa, BwdB dfb) {
    same_tape(a, b, op);
    auto& tape = a.tape();
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(tape, op, a.shape(), b.shape()));
    const auto& A = a.value();
    const auto& B = b.value();
    Tensor out(plan->out, 0.0);
    if (plan->trivial) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(A[i], B[i]);
    } else {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(A[plan->a_index[i]], B[plan->b_index[i]]);
    }
    return tape.record(op, std::move(out), {a, b}, [a, b, plan, dfa, dfb](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& A = a.value();
        const auto& B = b.value();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const std::size_t ia = plan->trivial ? i : plan->a_index[i];
            const std::size_t ib = plan->trivial ? i : plan->b_index[i];
            if (grads[0]) (*grads[0])[ia] += g[i] * dfa(A[ia], B[ib]);
            if (grads[1]) (*grads[1])[ib] += g[i] * dfb(A[ia], B[ib]);
        }
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary_broadcast(
        "add", a, b, [](double u, double v) { return u + v; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var mul(Var a, Var b) {
    return binary_broadcast(
        "mul", a, b, [](double u, double v) { return u * v; }, [](double, double v) { return v; },
        [](double u, double) { return u; });
}

Var mean(Var x) {
    const auto& X = x.value();
    const double n = static_cast<double>(X.numel());
    double s = 0.0;
    for (double v : X.data()) s += v;
    return x.tape().record("mean", Tensor::scalar(s / n), {x}, [n](const Tensor& g, std::span<Tensor* const> grads) {
        const double d = g[0] / n;
        for (auto& v : grads[0]->data()) v += d;
    });
}

Var mean(Var x, std::vector<std::size_t> axes) {
    auto& tape = x.tape();
    const auto& X = x.value();
    const Shape& in = X.shape();
    std::vector<bool> reduce(in.size(), false);
    for (auto a : axes) {
        if (a >= in.size())
            throw ShapeError(tape.where("mean") + ": axis " + std::to_string(a) + " out of range for " + shape_to_string(in));
        reduce[a] = true;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t d = 0; d < in.size(); ++d) {
        if (reduce[d])
            count *= in[d];
        else
            out_shape.push_back(in[d]);
    }
    // Output strides expressed per input axis (0 along reduced axes).
    std::vector<std::size_t> ostride(in.size(), 0);
    std::size_t acc = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
        if (reduce[d]) continue;
        ostride[d] = acc;
        acc *= in[d];
    }
    auto map = std::make_shared<std::vector<std::size_t>>(X.numel());
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t oi = 0;
    for (std::size_t k = 0; k < X.numel(); ++k) {
        (*map)[k] = oi;
        for (std::size_t d = in.size(); d-- > 0;) {
            ++idx[d];
            oi += ostride[d];
            if (idx[d] < in[d]) break;
            oi -= ostride[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor out(out_shape, 0.0);
    for (std::size_t k = 0; k < X.numel(); ++k) out[(*map)[k]] += X[k];
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out.data()) v *= inv;
    return tape.record("mean_axes", std::move(out), {x}, [map, inv](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t k = 0; k < map->size(); ++k) gx[k] += g[(*map)[k]] * inv;
    });
}

Var max_pool2d(Var x, std::size_t kernel) {
    auto& tape = x.tape();
    const auto& X = x.value();
    require_rank(tape, "max_pool2d", X.shape(), 4);
    const std::size_t nb = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    if (kernel == 0 || h % kernel || w % kernel)
        throw ShapeError(tape.where("max_pool2d") + ": spatial size " + shape_to_string(X.shape()) +
                         " not divisible by kernel " + std::to_string(kernel));
    const std::size_t oh = h / kernel, ow = w / kernel;
    Tensor out({nb, c, oh, ow}, 0.0);
    auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
    for (std::size_t pl = 0; pl < nb * c; ++pl)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t s = 0; s < ow; ++s) {
                std::size_t best = pl * h * w + (r * kernel) * w + s * kernel;
                for (std::size_t i = 0; i < kernel; ++i)
                    for (std::size_t j = 0; j < kernel; ++j) {
                        const std::size_t k = pl * h * w + (r * kernel + i) * w + s * kernel + j;
                        if (X[k] > X[best]) best = k;
                    }
                const std::size_t o = (pl * oh + r) * ow + s;
                out[o] = X[best];
                (*arg)[o] = best;
            }
    return tape.record("max_pool2d", std::move(out), {x}, [arg](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += g[o];
    });
}

Var upsample_nearest(Var x, std::size_t factor) {
    auto& tape = x.tape();
    const auto& X = x.value();
    require_rank(tape, "upsample_nearest", X.shape(), 4);
    if (factor == 0) throw ShapeError(tape.where("upsample_nearest") + ": factor must be positive");
    const std::size_t nb = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    const std::size_t oh = h * factor, ow = w * factor;
    Tensor out({nb, c, oh, ow}, 0.0);
    for (std::size_t pl = 0; pl < nb * c; ++pl)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t s = 0; s < ow; ++s) out[(pl * oh + r) * ow + s] = X[(pl * h + r / factor) * w + s / factor];
    return tape.record("upsample_nearest", std::move(out), {x},
                       [=](const Tensor& g, std::span<Tensor* const> grads) {
                           auto& gx = *grads[0];
                           for (std::size_t pl = 0; pl < nb * c; ++pl)
                               for (std::size_t r = 0; r < oh; ++r)
                                   for (std::size_t s = 0; s < ow; ++s)
                                       gx[(pl * h + r / factor) * w + s / factor] += g[(pl * oh + r) * ow + s];
                       });
}

Var reshape(Var x, Shape shape) {
    auto& tape = x.tape();
    if (shape_numel(shape) != x.value().numel()) shape_fail(tape, "reshape", x.shape(), shape);
    return tape.record("reshape", x.value().reshaped(std::move(shape)), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
}

Var transpose(Var x) {
    auto& tape = x.tape();
    const auto& X = x.value();
    if (X.rank() < 2) throw ShapeError(tape.where("transpose") + ": need rank >= 2, got " + shape_to_string(X.shape()));
    const std::size_t r = X.dim(X.rank() - 2), c = X.dim(X.rank() - 1), outer = X.numel() / (r * c);
    Shape shape = X.shape();
    std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
    Tensor y(shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) y[o * r * c + j * r + i] = X[o * r * c + i * c + j];
    return tape.record("transpose", std::move(y), {x}, [r, c, outer](const Tensor& g, std::span<Tensor* const> grads) {
        auto& gx = *grads[0];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[o * r * c + i * c + j] += g[o * r * c + j * r + i];
    });
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
    auto& tape = x.tape();
    const auto& X = x.value();
    if (X.rank() == 0) throw ShapeError(tape.where("gather_rows") + ": cannot gather rows of a scalar");
    if (rows.empty()) throw ShapeError(tape.where("gather_rows") + ": empty row selection");
    const std::size_t n = X.dim(0);
    const std::size_t width = X.numel() / n;
    for (auto r : rows)
        if (r >= n)
            throw ShapeError(tape.where("gather_rows") + ": row " + std::to_string(r) + " out of range for " +
                             shape_to_string(X.shape()));
    Shape out_shape = X.shape();
    out_shape[0] = rows.size();
    Tensor out(out_shape, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(&X.data()[rows[i] * width], width, &out.data()[i * width]);
    return tape.record("gather_rows", std::move(out), {x},
                       [rows = std::move(rows), width](const Tensor& g, std::span<Tensor* const> grads) {
                           auto& gx = *grads[0];
                           for (std::size_t i = 0; i < rows.size(); ++i)
                               for (std::size_t j = 0; j < width; ++j) gx[rows[i] * width + j] += g[i * width + j];
                       });
}

Var scale(Var x, double factor) { return mul(x, x.tape().constant(Tensor::scalar(factor))); }

Var sum(Var x) { return scale(mean(x), static_cast<double>(x.value().numel())); }

Var bce_with_logits(Var logits, const Tensor& targets) {
    auto& tape = logits.tape();
    const auto& X = logits.value();
    if (X.shape() != targets.shape()) shape_fail(tape, "bce_with_logits", X.shape(), targets.shape());
    const double n = static_cast<double>(X.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < X.numel(); ++i) {
        const double x = X[i], y = targets[i];
        s += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    return tape.record("bce_with_logits", Tensor::scalar(s / n), {logits},
                       [logits, targets, n](const Tensor& g, std::span<Tensor* const> grads) {
                           const auto& X = logits.value();
                           auto& gx = *grads[0];
                           const double d = g[0] / n;
                           for (std::size_t i = 0; i < X.numel(); ++i) gx[i] += d * (stable_sigmoid(X[i]) - targets[i]);
                       });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> weights) {
    auto& tape = logits.tape();
    const auto& X = logits.value();
    require_rank(tape, "softmax_cross_entropy", X.shape(), 2);
    const std::size_t n = X.dim(0), c = X.dim(1);
    if (targets.size() != n || weights.size() != n)
        shape_fail(tape, "softmax_cross_entropy", X.shape(), Shape{targets.size(), weights.size()}, "targets/weights");
    double wsum = 0.0, s = 0.0;
    Tensor probs(X.shape(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] >= c) throw std::out_of_range(tape.where("softmax_cross_entropy") + ": target class out of range");
        const double* in = &X.data()[r * c];
        double* p = &probs.data()[r * c];
        const double mx = *std::max_element(in, in + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < c; ++j) p[j] /= z;
        const double lse = mx + std::log(z);
        s += weights[r] * (lse - in[targets[r]]);
        wsum += weights[r];
    }
    if (!(wsum > 0.0)) throw std::invalid_argument(tape.where("softmax_cross_entropy") + ": weights must sum to a positive value");
    std::vector<std::size_t> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return tape.record("softmax_cross_entropy", Tensor::scalar(s / wsum), {logits},
                       [probs = std::move(probs), t = std::move(t), w = std::move(w), wsum, n, c](
                           const Tensor& g, std::span<Tensor* const> grads) {
                           auto& gx = *grads[0];
                           for (std::size_t r = 0; r < n; ++r) {
                               const double d = g[0] * w[r] / wsum;
                               for (std::size_t j = 0; j < c; ++j)
                                   gx[r * c + j] += d * (probs[r * c + j] - (j == t[r] ? 1.0 : 0.0));
                           }
                       });
}

Var l1_distance(Var pred, const Tensor& target) {
    auto& tape = pred.tape();
    const auto& P = pred.value();
    if (P.shape() != target.shape()) shape_fail(tape, "l1_distance", P.shape(), target.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < P.numel(); ++i) s += std::abs(P[i] - target[i]);
    return tape.record("l1_distance", Tensor::scalar(s), {pred}, [pred, target](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& P = pred.value();
        auto& gp = *grads[0];
        for (std::size_t i = 0; i < P.numel(); ++i) {
            const double d = P[i] - target[i];
            gp[i] += g[0] * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
    });
}

namespace {

struct IouParts {
    double iou, inter, uni;
    double ix, iy;              // intersection extents
    double ax1, ax2, ay1, ay2;  // predicted box edges
    double bx1, bx2, by1, by2;  // target box edges
};

IouParts iou_parts(const double* a, const double* b) {
    IouParts p{};
    p.ax1 = a[0] - a[2] / 2, p.ax2 = a[0] + a[2] / 2, p.ay1 = a[1] - a[3] / 2, p.ay2 = a[1] + a[3] / 2;
    p.bx1 = b[0] - b[2] / 2, p.bx2 = b[0] + b[2] / 2, p.by1 = b[1] - b[3] / 2, p.by2 = b[1] + b[3] / 2;
    p.ix = std::max(0.0, std::min(p.ax2, p.bx2) - std::max(p.ax1, p.bx1));
    p.iy = std::max(0.0, std::min(p.ay2, p.by2) - std::max(p.ay1, p.by1));
    p.inter = p.ix * p.iy;
    p.uni = a[2] * a[3] + b[2] * b[3] - p.inter;
    p.iou = p.uni > 0.0 ? p.inter / p.uni : 0.0;
    return p;
}

}  // namespace

Var box_iou(Var pred, const Tensor& target) {
    auto& tape = pred.tape();
    const auto& P = pred.value();
    if (P.rank() != 2 || P.dim(1) != 4 || P.shape() != target.shape()) shape_fail(tape, "box_iou", P.shape(), target.shape());
    const std::size_t m = P.dim(0);
    Tensor out({m}, 0.0);
    for (std::size_t i = 0; i < m; ++i) out[i] = iou_parts(&P.data()[i * 4], &target.data()[i * 4]).iou;
    return tape.record("box_iou", std::move(out), {pred}, [pred, target, m](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& P = pred.value();
        auto& gp = *grads[0];
        for (std::size_t i = 0; i < m; ++i) {
            const double* a = &P.data()[i * 4];
            const auto q = iou_parts(a, &target.data()[i * 4]);
            if (q.uni <= 0.0) continue;
            // d inter / d edges of the predicted box.
            double dx1 = 0, dx2 = 0, dy1 = 0, dy2 = 0;
            if (q.ix > 0 && q.iy > 0) {
                if (q.ax2 < q.bx2) dx2 = q.iy;
                if (q.ax1 > q.bx1) dx1 = -q.iy;
                if (q.ay2 < q.by2) dy2 = q.ix;
                if (q.ay1 > q.by1) dy1 = -q.ix;
            }
            // Chain through edges to (cx, cy, w, h).
            const double di_cx = dx1 + dx2, di_cy = dy1 + dy2;
            const double di_w = (dx2 - dx1) / 2, di_h = (dy2 - dy1) / 2;
            const double darea_w = a[3], darea_h = a[2];
            const double u2 = q.uni * q.uni;
            auto diou = [&](double dinter, double darea) { return (dinter * q.uni - q.inter * (darea - dinter)) / u2; };
            gp[i * 4 + 0] += g[i] * diou(di_cx, 0.0);
            gp[i * 4 + 1] += g[i] * diou(di_cy, 0.0);
            gp[i * 4 + 2] += g[i] * diou(di_w, darea_w);
            gp[i * 4 + 3] += g[i] * diou(di_h, darea_h);
        }
    });
}

Var soft_dice_loss(Var probs, const Tensor& mask, double smooth) {
    auto& tape = probs.tape();
    const auto& P = probs.value();
    if (P.shape() != mask.shape()) shape_fail(tape, "soft_dice_loss", P.shape(), mask.shape());
    require_rank(tape, "soft_dice_loss", P.shape(), 4);
    const std::size_t slices = P.dim(0) * P.dim(1);
    const std::size_t plane = P.dim(2) * P.dim(3);
    std::vector<double> inter(slices, 0.0), denom(slices, 0.0);
    double loss = 0.0;
    for (std::size_t s = 0; s < slices; ++s) {
        for (std::size_t k = 0; k < plane; ++k) {
            const double p = P[s * plane + k], m = mask[s * plane + k];
            inter[s] += p * m;
            denom[s] += p + m;
        }
        loss += 1.0 - (2.0 * inter[s] + smooth) / (denom[s] + smooth);
    }
    const double ns = static_cast<double>(slices);
    return tape.record("soft_dice_loss", Tensor::scalar(loss / ns), {probs},
                       [mask, inter = std::move(inter), denom = std::move(denom), smooth, ns, plane](
                           const Tensor& g, std::span<Tensor* const> grads) {
                           auto& gp = *grads[0];
                           for (std::size_t s = 0; s < inter.size(); ++s) {
                               const double d = denom[s] + smooth;
                               const double num = 2.0 * inter[s] + smooth;
                               for (std::size_t k = 0; k < plane; ++k) {
                                   const double m = mask[s * plane + k];
                                   gp[s * plane + k] += -g[0] / ns * (2.0 * m * d - num) / (d * d);
                               }
                           }
                       });
}

Var mse(Var x, const Tensor& target) {
    auto& tape = x.tape();
    const auto& X = x.value();
    if (X.shape() != target.shape()) shape_fail(tape, "mse", X.shape(), target.shape());
    const double n = static_cast<double>(X.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < X.numel(); ++i) {
        const double d = X[i] - target[i];
        s += d * d;
    }
    return tape.record("mse", Tensor::scalar(s / n), {x}, [x, target, n](const Tensor& g, std::span<Tensor* const> grads) {
        const auto& X = x.value();
        auto& gx = *grads[0];
        for (std::size_t i = 0; i < X.numel(); ++i) gx[i] += g[0] * 2.0 * (X[i] - target[i]) / n;
    });
}

}  // namespace fx
