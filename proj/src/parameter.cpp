#include "fx/parameter.hpp"

#include <stdexcept>

#include "fx/hash.hpp"

namespace fx {

std::string to_string(ComponentKind kind) {
    switch (kind) {
        case ComponentKind::Backbone: return "Backbone";
        case ComponentKind::ClsHead: return "ClsHead";
        case ComponentKind::LocEncoder: return "LocEncoder";
        case ComponentKind::LocDecoder: return "LocDecoder";
        case ComponentKind::SegDecoder: return "SegDecoder";
        case ComponentKind::SegHead: return "SegHead";
    }
    return "?";
}

std::string to_string(const ComponentId& id) {
    auto s = to_string(id.kind);
    if (!id.shared()) s += "(" + std::to_string(id.index) + ")";
    return s;
}

ComponentId parse_component(const std::string& text) {
    static const std::pair<const char*, ComponentKind> kinds[] = {
        {"Backbone", ComponentKind::Backbone},     {"ClsHead", ComponentKind::ClsHead},
        {"LocEncoder", ComponentKind::LocEncoder}, {"LocDecoder", ComponentKind::LocDecoder},
        {"SegDecoder", ComponentKind::SegDecoder}, {"SegHead", ComponentKind::SegHead},
    };
    auto paren = text.find('(');
    auto head = text.substr(0, paren);
    for (auto& [name, kind] : kinds) {
        if (head != name) continue;
        if (paren == std::string::npos) return {kind, -1};
        if (text.back() != ')') break;
        return {kind, std::stoi(text.substr(paren + 1, text.size() - paren - 2))};
    }
    throw std::invalid_argument("unknown component '" + text + "'");
}

Parameter& ParamStore::add(std::string name, Tensor value, ComponentId component) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    Tensor grad(value.shape(), 0.0);
    params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), component, true});
    return params_.back();
}

Parameter& ParamStore::add_detached(std::string name, Tensor value, ComponentId component) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), Tensor(), component, false});
    return params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return params_[it->second];
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

void ParamStore::set_all_trainable(bool trainable) {
    for (auto& p : params_) p.trainable = trainable;
}

std::size_t ParamStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

std::map<ComponentId, std::uint64_t> component_checksums(const ParamStore& store) {
    std::map<ComponentId, std::uint64_t> out;
    for (const auto& p : store.all()) {
        auto [it, inserted] = out.try_emplace(p.component, kFnvOffset);
        it->second = fnv1a(std::as_bytes(p.value.data()), it->second);
    }
    return out;
}

}  // namespace fx
