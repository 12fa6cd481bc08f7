#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <deque>
#include <vector>

#include "fx/tensor.hpp"

namespace fx {

enum class ComponentKind { Backbone, ClsHead, LocEncoder, LocDecoder, SegDecoder, SegHead };

/// Which part of the model a parameter belongs to. Shared components carry
/// index -1; per-dataset heads/decoders carry their slot within the family.
struct ComponentId {
    ComponentKind kind = ComponentKind::Backbone;
    int index = -1;

    static ComponentId backbone() { return {ComponentKind::Backbone, -1}; }
    static ComponentId loc_encoder() { return {ComponentKind::LocEncoder, -1}; }
    static ComponentId seg_decoder() { return {ComponentKind::SegDecoder, -1}; }
    static ComponentId cls_head(int i) { return {ComponentKind::ClsHead, i}; }
    static ComponentId loc_decoder(int i) { return {ComponentKind::LocDecoder, i}; }
    static ComponentId seg_head(int i) { return {ComponentKind::SegHead, i}; }

    bool shared() const noexcept { return index < 0; }

    auto operator<=>(const ComponentId&) const = default;
};

std::string to_string(ComponentKind kind);
std::string to_string(const ComponentId& id);
/// Inverse of to_string(ComponentId); throws std::invalid_argument.
ComponentId parse_component(const std::string& text);

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    ComponentId component;
    bool trainable = true;
};

/// Named parameter registry. References stay valid as parameters are added.
/// Insertion order is preserved and defines the
/// serialization order.
class ParamStore {
public:
    Parameter& add(std::string name, Tensor value, ComponentId component);
    /// Frozen entry without a gradient buffer.
    Parameter& add_detached(std::string name, Tensor value, ComponentId component);

    bool contains(const std::string& name) const { return index_.contains(name); }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;

    std::deque<Parameter>& all() noexcept { return params_; }
    const std::deque<Parameter>& all() const noexcept { return params_; }
    std::size_t size() const noexcept { return params_.size(); }

    void zero_grad();
    void set_all_trainable(bool trainable);

    std::size_t total_elements() const;

private:
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// FNV-1a over the raw bytes of every parameter of each component.
std::map<ComponentId, std::uint64_t> component_checksums(const ParamStore& store);

}  // namespace fx
