#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fx/autodiff.hpp"
#include "fx/metrics.hpp"
#include "fx/parameter.hpp"
#include "fx/synthdata.hpp"

namespace fx {

struct ArchConfig {
    std::size_t image_size = 32;
    std::size_t in_channels = 1;
    std::size_t stage1_channels = 16;
    std::size_t stage2_channels = 32;
    std::size_t stage3_channels = 64;
    std::size_t loc_enc_channels = 16;
    std::size_t loc_hidden = 32;
    std::size_t num_queries = 10;
    std::size_t seg_channels = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Identifies one per-dataset head or decoder. `subtask` is empty unless the
/// dataset splits that task into per-class subtasks.
struct HeadKey {
    std::string dataset;
    TaskKind task = TaskKind::Cls;
    std::string subtask;

    auto operator<=>(const HeadKey&) const = default;
};

std::string to_string(const HeadKey& key);

struct HeadInfo {
    HeadKey key;
    ComponentId component;
    /// Classes predicted by the head (excluding the no-object slot of loc decoders).
    std::size_t num_classes = 0;
    /// Dataset class index of each predicted class.
    std::vector<std::size_t> class_map;
};

/// Heads for every (dataset, task, subtask) in listed order; indices count up
/// per family starting after `existing`.
std::vector<HeadInfo> layout_heads(const std::vector<SynthDatasetSpec>& specs, const std::vector<HeadInfo>& existing = {});

struct FeatureBundle {
    Var backbone_emb;
    std::optional<Var> loc_enc_emb;
    std::optional<Var> seg_dec_emb;
};

struct BackboneOut {
    Var stage1;  // C1 x H x W
    Var stage2;  // C2 x H/2 x W/2
    Var stage3;  // C3 x H/4 x W/4
    Var emb;     // C3 x H/8 x W/8
};

struct ClsOutput {
    Var logits;  // B x C
    FeatureBundle features;
};

struct LocOutput {
    Var boxes;   // B x Q x 4 in [0,1]
    Var logits;  // B x Q x (C+1), no-object last
    FeatureBundle features;
};

struct SegOutput {
    Var logits;  // B x C x H x W
    FeatureBundle features;
};

/// Supplies tape leaves for named parameters. A student binder records
/// parameters (gradients flow to trainable ones); a detached binder records
/// constants, reading `primary` first and falling back to `fallback`.
class Binder {
public:
    static Binder student(Tape& tape, ParamStore& store);
    static Binder detached(Tape& tape, const ParamStore& primary, const ParamStore* fallback = nullptr);

    Tape& tape() const { return *tape_; }
    Var operator()(const std::string& name);

private:
    Tape* tape_ = nullptr;
    ParamStore* student_ = nullptr;
    const ParamStore* primary_ = nullptr;
    const ParamStore* fallback_ = nullptr;
    std::map<std::string, Var> cache_;
};

class FoundationModel {
public:
    /// Throws std::invalid_argument for an empty dataset list, invalid specs or
    /// duplicate dataset ids.
    static FoundationModel build(const ArchConfig& arch, const std::vector<SynthDatasetSpec>& specs);
    /// Rebuilds the parameter layout from a saved head list; values are freshly initialized.
    static FoundationModel from_layout(const ArchConfig& arch, std::vector<HeadInfo> heads);

    const ArchConfig& arch() const noexcept { return arch_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    const std::vector<HeadInfo>& heads() const noexcept { return heads_; }
    bool has_head(const HeadKey& key) const;
    /// Throws std::invalid_argument naming the dataset when absent.
    const HeadInfo& head(const HeadKey& key) const;
    const HeadInfo& head(const std::string& dataset, TaskKind task, const std::string& subtask = "") const {
        return head(HeadKey{dataset, task, subtask});
    }
    /// Appends freshly initialized heads for every (task, subtask) of `spec`
    /// that has none yet. Returns the new heads.
    std::vector<HeadInfo> add_heads(const SynthDatasetSpec& spec);

    /// Every component present, shared ones included even without heads.
    std::vector<ComponentId> components() const;
    std::vector<std::string> parameter_names(const ComponentId& id) const;

private:
    void add_shared();
    void add_head_params(const HeadInfo& head);
    void init(const std::string& name, Shape shape, ComponentId component, std::size_t fan_in, bool zero = false);

    ArchConfig arch_;
    ParamStore params_;
    std::vector<HeadInfo> heads_;
};

BackboneOut run_backbone(const FoundationModel& model, Binder& bind, Var images);
Var run_loc_encoder(const FoundationModel& model, Binder& bind, const BackboneOut& bb);
Var run_seg_decoder(const FoundationModel& model, Binder& bind, const BackboneOut& bb);

/// Images are B x in_channels x H x W with H, W divisible by 8.
ClsOutput forward_cls(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask = "");
LocOutput forward_loc(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask = "");
SegOutput forward_seg(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask = "");

/// Components the (task, mode) step may update for the given head. EvalOnly
/// freezes all.
std::set<ComponentId> trainable_components(TaskKind task, EpochMode mode, const ComponentId& head);
/// trainable_components, also applied to the trainable flag of every parameter.
std::set<ComponentId> apply_freeze_mask(FoundationModel& model, TaskKind task, EpochMode mode, const ComponentId& head);
/// Freezes everything except `trainable`.
void set_trainable(ParamStore& params, const std::set<ComponentId>& trainable);

struct ParamCensus {
    std::map<ComponentId, std::size_t> per_component;
    std::size_t total = 0;
};

ParamCensus count_params(const ParamStore& params);

}  // namespace fx
