#include "fx/autodiff.hpp"

#include <stdexcept>

namespace fx {

const Tensor& Var::value() const { return tape_->nodes_.at(id_).value; }

bool Var::requires_grad() const { return tape_->nodes_.at(id_).requires_grad; }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, true, {}, nullptr, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    nodes_.push_back(Node{p.value, {}, p.trainable, {}, nullptr, &p});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::frozen(const Parameter& p) { return constant(p.value); }

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    node.parents.reserve(parents.size());
    for (const auto& p : parents) {
        if (p.tape_ != this) throw std::invalid_argument(where(op) + ": operand recorded on a different tape");
        node.parents.push_back(p.id_);
        node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss recorded on a different tape");
    const auto& loss_value = nodes_.at(loss.id_).value;
    if (loss_value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_to_string(loss_value.shape()));

    for (auto& n : nodes_) n.grad = Tensor();
    auto& root = nodes_[loss.id_];
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);

    std::vector<Tensor*> parent_grads;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
        parent_grads.clear();
        for (auto pid : node.parents) {
            auto& parent = nodes_[pid];
            if (!parent.requires_grad) {
                parent_grads.push_back(nullptr);
                continue;
            }
            if (parent.grad.empty()) parent.grad = Tensor(parent.value.shape(), 0.0);
            parent_grads.push_back(&parent.grad);
        }
        node.backward(node.grad, parent_grads);
    }

    for (auto& node : nodes_) {
        if (node.param == nullptr || !node.requires_grad || node.grad.empty()) continue;
        auto dst = node.param->grad.data();
        auto src = node.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
}

const Tensor* Tape::grad(Var v) const {
    const auto& node = nodes_.at(v.id_);
    if (!node.requires_grad || node.grad.empty()) return nullptr;
    return &node.grad;
}

std::string Tape::where(std::string_view op) const {
    std::string out;
    for (const auto& s : scopes_) {
        out += s;
        out += '/';
    }
    out += op;
    return out;
}

}  // namespace fx
