#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fx/parameter.hpp"
#include "fx/tensor.hpp"

namespace fx {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// the recording order is already a topological order for backward().
///
/// A tape is single-threaded. Independent tapes share no mutable state.
class Tape {
public:
    /// Receives d(loss)/d(output) and one pointer per parent; the pointer is
    /// null when that parent does not require a gradient.
    using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf that requires a gradient but is not bound to a Parameter.
    Var variable(Tensor value);
    /// Leaf bound to a parameter. requires_grad follows p.trainable. A
    /// parameter is recorded at most once per tape.
    Var parameter(Parameter& p);
    /// Leaf holding a copy of the parameter's value that never requires a gradient.
    Var frozen(const Parameter& p);

    Var record(std::string_view op, Tensor value, std::vector<Var> parents, BackwardFn backward);

    /// Reverse sweep from a scalar loss. Node gradients are reset first;
    /// gradients of parameter leaves are added into Parameter::grad, so callers
    /// zero those explicitly between steps.
    void backward(Var loss);

    /// Gradient of a node after backward(), or nullptr when the node does not
    /// require one.
    const Tensor* grad(Var v) const;

    std::size_t size() const noexcept { return nodes_.size(); }

    class Scope {
    public:
        Scope(Tape& tape, std::string name) : tape_(tape) { tape_.scopes_.push_back(std::move(name)); }
        ~Scope() { tape_.scopes_.pop_back(); }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape& tape_;
    };
    [[nodiscard]] Scope scope(std::string name) { return Scope(*this, std::move(name)); }

    /// Qualified node name for diagnostics, e.g. "loc_decoder.1/matmul".
    std::string where(std::string_view op) const;

private:
    friend class Var;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
    std::vector<std::string> scopes_;
};

// Network primitives.
Var matmul(Var a, Var b);
/// Stride-1 convolution over NCHW input with square kernel and symmetric zero padding.
Var conv2d(Var x, Var weight, Var bias, std::size_t pad);
Var relu(Var x);
Var sigmoid(Var x);
/// Softmax over the last axis.
Var softmax(Var x);
/// Elementwise with numpy-style broadcasting.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var mean(Var x);
/// Mean over the listed axes; those axes are removed from the result.
Var mean(Var x, std::vector<std::size_t> axes);
Var max_pool2d(Var x, std::size_t kernel);
Var upsample_nearest(Var x, std::size_t factor);

// Structural helpers (no arithmetic).
Var reshape(Var x, Shape shape);
/// Rows of x along axis 0, in the given order.
Var gather_rows(Var x, std::vector<std::size_t> rows);
/// Swaps the last two axes.
Var transpose(Var x);

// Convenience compositions.
Var scale(Var x, double factor);
Var sum(Var x);

// Fused loss kernels. Targets are plain tensors so they can never carry gradient.
/// Mean binary cross-entropy with logits.
Var bce_with_logits(Var logits, const Tensor& targets);
/// Weighted mean of softmax cross-entropy rows: sum_i w_i CE_i / sum_i w_i.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> weights);
/// Sum of absolute differences.
Var l1_distance(Var pred, const Tensor& target);
/// Row-wise IoU of (cx,cy,w,h) boxes, shape [M].
Var box_iou(Var pred, const Tensor& target);
/// Mean over (batch, channel) slices of 1 - soft Dice for probabilities in [0,1].
Var soft_dice_loss(Var probs, const Tensor& mask, double smooth);
/// Mean squared error against a fixed target.
Var mse(Var x, const Tensor& target);

}  // namespace fx
