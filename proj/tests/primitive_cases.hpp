#pragma once

// Small seeded losses, one per tape primitive, for finite-difference checks.

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "fx/autodiff.hpp"
#include "fx/grad_check.hpp"

namespace fx {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

// Random projection so every output element influences the scalar loss.
inline Var project(Var y, std::mt19937_64& rng) {
    auto r = y.tape().constant(random_tensor(y.shape().empty() ? Shape{1} : y.shape(), rng));
    if (y.shape().empty()) return mul(y, reshape(r, {}));
    return mean(mul(y, r));
}

// Each case builds a loss over randomly initialised parameters in `store`.
using CaseBuilder = std::function<LossBuilder(ParamStore&, std::mt19937_64&)>;

struct PrimitiveCase {
    const char* name;
    CaseBuilder build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
    return {
        {"matmul",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& a = s.add("a", random_tensor({3, 4}, rng), ComponentId::backbone());
             auto& b = s.add("b", random_tensor({4, 2}, rng), ComponentId::backbone());
             auto r = std::make_shared<std::mt19937_64>(rng());
             auto seed = (*r)();
             return [&a, &b, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(matmul(t.parameter(a), t.parameter(b)), g);
             };
         }},
        {"conv2d",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 2, 5, 5}, rng), ComponentId::backbone());
             auto& w = s.add("w", random_tensor({3, 2, 3, 3}, rng), ComponentId::backbone());
             auto& b = s.add("b", random_tensor({3}, rng), ComponentId::backbone());
             const std::size_t pad = rng() % 2;
             auto seed = rng();
             return [&, pad, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(conv2d(t.parameter(x), t.parameter(w), t.parameter(b), pad), g);
             };
         }},
        {"relu",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({10}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(relu(t.parameter(x)), g);
             };
         }},
        {"sigmoid",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({10}, rng, 2.0), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(sigmoid(t.parameter(x)), g);
             };
         }},
        {"softmax",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({3, 5}, rng, 2.0), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(softmax(t.parameter(x)), g);
             };
         }},
        {"add_broadcast",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& a = s.add("a", random_tensor({2, 1, 3}, rng), ComponentId::backbone());
             auto& b = s.add("b", random_tensor({4, 3}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(add(t.parameter(a), t.parameter(b)), g);
             };
         }},
        {"mul_broadcast",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& a = s.add("a", random_tensor({2, 3, 4}, rng), ComponentId::backbone());
             auto& b = s.add("b", random_tensor({3, 1}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(mul(t.parameter(a), t.parameter(b)), g);
             };
         }},
        {"mean_axes",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 3, 4, 5}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(mean(t.parameter(x), {1, 3}), g);
             };
         }},
        {"max_pool2d",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 2, 4, 6}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(max_pool2d(t.parameter(x), 2), g);
             };
         }},
        {"upsample_nearest",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({1, 2, 3, 2}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(upsample_nearest(t.parameter(x), 2), g);
             };
         }},
        {"reshape_gather",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 3, 4}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(gather_rows(reshape(t.parameter(x), {6, 4}), {5, 0, 3, 0}), g);
             };
         }},
        {"transpose",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 3, 5}, rng), ComponentId::backbone());
             auto seed = rng();
             return [&, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(transpose(t.parameter(x)), g);
             };
         }},
        {"bce_with_logits",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({4, 3}, rng, 3.0), ComponentId::backbone());
             Tensor y({4, 3});
             for (auto& v : y.data()) v = static_cast<double>(rng() % 2);
             return [&, y](Tape& t) { return bce_with_logits(t.parameter(x), y); };
         }},
        {"softmax_cross_entropy",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({5, 4}, rng, 2.0), ComponentId::backbone());
             std::vector<std::size_t> tgt(5);
             std::vector<double> w(5);
             for (std::size_t i = 0; i < 5; ++i) {
                 tgt[i] = rng() % 4;
                 w[i] = 0.1 + static_cast<double>(rng() % 10) / 10.0;
             }
             return [&, tgt, w](Tape& t) { return softmax_cross_entropy(t.parameter(x), tgt, w); };
         }},
        {"l1_distance",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({3, 4}, rng), ComponentId::backbone());
             Tensor y = random_tensor({3, 4}, rng);
             return [&, y](Tape& t) { return l1_distance(t.parameter(x), y); };
         }},
        {"box_iou",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             std::uniform_real_distribution<double> c(0.35, 0.65), wh(0.2, 0.5);
             Tensor a({4, 4}), b({4, 4});
             for (std::size_t i = 0; i < 4; ++i) {
                 a[i * 4] = c(rng), a[i * 4 + 1] = c(rng), a[i * 4 + 2] = wh(rng), a[i * 4 + 3] = wh(rng);
                 b[i * 4] = c(rng), b[i * 4 + 1] = c(rng), b[i * 4 + 2] = wh(rng), b[i * 4 + 3] = wh(rng);
             }
             auto& x = s.add("x", a, ComponentId::backbone());
             auto seed = rng();
             return [&, b, seed](Tape& t) {
                 std::mt19937_64 g(seed);
                 return project(box_iou(t.parameter(x), b), g);
             };
         }},
        {"soft_dice_loss",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 2, 3, 3}, rng), ComponentId::backbone());
             Tensor m({2, 2, 3, 3});
             for (auto& v : m.data()) v = static_cast<double>(rng() % 2);
             return [&, m](Tape& t) { return soft_dice_loss(sigmoid(t.parameter(x)), m, 1.0); };
         }},
        {"mse",
         [](ParamStore& s, std::mt19937_64& rng) -> LossBuilder {
             auto& x = s.add("x", random_tensor({2, 5}, rng), ComponentId::backbone());
             Tensor y = random_tensor({2, 5}, rng);
             return [&, y](Tape& t) { return mse(t.parameter(x), y); };
         }},
    };
}

}  // namespace fx
