#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fx/adamw.hpp"
#include "fx/losses.hpp"
#include "fx/metrics.hpp"
#include "fx/model.hpp"
#include "fx/synthdata.hpp"

namespace fx {

enum class DataFraction { Half, Full };
std::string to_string(DataFraction f);

struct EpochPlanEntry {
    std::string dataset;
    TaskKind task = TaskKind::Cls;
    EpochMode mode = EpochMode::Release;
    DataFraction fraction = DataFraction::Full;
    std::set<ComponentId> trainable_components;
    std::optional<std::string> subtask;
    ComponentId head;

    HeadKey head_key() const { return {dataset, task, subtask.value_or("")}; }
    /// "loc" or "loc/<subtask>", as written to the metrics log.
    std::string task_label() const;
};

struct CyclePlan {
    std::vector<EpochPlanEntry> entries;
    std::size_t cycle_index = 0;
};

struct TrainConfig {
    double lr_backbone = 1e-5;
    double lr_loc = 1e-4;
    double lr_seg = 1e-4;
    double lr_cls_head = 1e-4;
    double momentum = 0.80;
    std::map<TaskKind, bool> lock_release{{TaskKind::Cls, false}, {TaskKind::Loc, true}, {TaskKind::Seg, true}};
    /// Learning rates are multiplied by factor^floor((epoch-1)/interval); interval 0 disables decay.
    double step_decay_factor = 1.0;
    std::size_t step_decay_interval = 0;
    /// Consecutive epochs run for every plan entry.
    std::size_t epochs_per_task = 1;
    std::size_t num_cycles = 1;
    std::size_t batch_size = 24;
    double weight_decay = 0.01;
    double consistency_weight = 1.0;
    bool student_teacher = true;
    /// Mirror per-dataset heads in the teacher too, not just the shared components.
    bool mirror_heads = false;
    bool eval_after_release = true;
    /// Evaluate every head after every epoch (cross-dataset curves).
    bool eval_all_every_epoch = false;
    LocLossWeights loc_weights;
    std::uint64_t seed = 0;

    bool lock_release_on(TaskKind t) const;
    void validate() const;
};

/// One cycle: datasets in listed order, tasks cls -> loc -> seg, subtasks in
/// listed order, each as (Lock, Release) when lock-release is on for the task
/// or a single Release otherwise.
CyclePlan build_cycle_plan(const std::vector<SynthDatasetSpec>& specs, const TrainConfig& config, std::size_t cycle_index = 0);

/// ceil(n/2) distinct indices of [0, n), sorted.
std::vector<std::size_t> sample_lock_subset(std::size_t n, std::uint64_t epoch_seed);

/// Epoch-wise EMA mirror of the student. Holds copies of the mirrored
/// parameters only; its parameters are never trainable and carry no gradient.
struct TeacherState {
    ParamStore params;
    double momentum = 0.80;
};

TeacherState init_teacher(const FoundationModel& student, double momentum, bool mirror_heads = false);
/// theta_t <- lambda theta_t + (1 - lambda) theta_s for every mirrored parameter.
/// Throws std::invalid_argument when a mirrored parameter is missing or misshapen.
void ema_update(TeacherState& teacher, const ParamStore& student, double lambda);
/// Full inference weight set: student parameters overlaid with teacher mirrors.
ParamStore teacher_weights(const FoundationModel& student, const TeacherState& teacher);

struct DatasetBundle {
    SynthDatasetSpec spec;
    std::vector<SynthSample> samples;
    SplitIndices split;
};

DatasetBundle make_bundle(const SynthDatasetSpec& spec, std::uint64_t split_seed);

struct Batch {
    Tensor images;  // B x 1 x H x W
    std::vector<const SynthSample*> samples;
};

struct EpochResult {
    LossBreakdown mean_loss;
    std::size_t samples_used = 0;
    std::size_t steps = 0;
};

double lr_multiplier(const TrainConfig& config, std::size_t global_epoch);
double component_lr(const TrainConfig& config, const ComponentId& id);

/// One epoch of `entry` over the training split of `data`. Lock epochs draw a
/// fresh half subset from `epoch_seed`. Frozen components are left untouched.
/// `teacher` may be null (student-teacher disabled). Throws on empty data.
EpochResult run_epoch(FoundationModel& model, const TeacherState* teacher, const EpochPlanEntry& entry,
                      const DatasetBundle& data, AdamW& optimizer, const TrainConfig& config, std::uint64_t epoch_seed,
                      std::size_t global_epoch = 1);

/// Raw predictions of one head over a set of samples, enough to recompute the metric.
struct EvalPredictions {
    HeadKey key;
    Tensor scores;  // cls: N x C probabilities
    Tensor labels;  // cls: N x C
    std::vector<Detection> detections;
    std::vector<GroundTruth> ground_truths;
    Tensor pred_masks;  // seg: N x C x H x W binary
    Tensor gt_masks;
};

EvalPredictions predict(const FoundationModel& model, const ParamStore& weights, const DatasetBundle& data,
                        const HeadKey& key, const std::vector<std::size_t>& indices, std::size_t batch_size = 32);
/// AUC, mAP40 or mean per-class Dice (global over all samples).
std::optional<double> score(const EvalPredictions& predictions);
std::optional<double> evaluate(const FoundationModel& model, const ParamStore& weights, const DatasetBundle& data,
                               const HeadKey& key, const std::vector<std::size_t>& indices);

struct EpochSummary {
    std::size_t cycle = 0;
    std::size_t epoch = 0;
    EpochPlanEntry entry;
    EpochResult result;
};

struct EpochEvent {
    std::size_t cycle;
    std::size_t epoch;
    const EpochPlanEntry& entry;
    const FoundationModel& model;
    const TeacherState& teacher;
};

struct PretrainHooks {
    std::function<void(const EpochEvent&)> before_epoch;
    /// Runs after the optimizer steps and the EMA update of the epoch.
    std::function<void(const EpochEvent&)> after_epoch;
    std::function<void(const EpochSummary&)> on_epoch;
    std::function<void(const MetricsRecord&)> on_record;
    std::function<void(std::size_t cycle, const FoundationModel&, const TeacherState&, const AdamW&)> after_cycle;
};

struct PretrainResult {
    TeacherState teacher;
    AdamW optimizer;
    std::vector<MetricsRecord> records;
    std::vector<EpochSummary> epochs;
};

/// Cycles of the plan over `data` (one bundle per model dataset, any order).
/// Evaluation uses student weights on the test split. Epochs and cycles count from 1.
PretrainResult run_pretraining(FoundationModel& model, const std::vector<DatasetBundle>& data, const TrainConfig& config,
                               const PretrainHooks& hooks = {});

enum class FinetuneMode { Full, HeadOnly };
std::string to_string(FinetuneMode mode);
/// Accepts "full", "head-only" and "head_only"; throws std::invalid_argument otherwise.
FinetuneMode parse_finetune_mode(const std::string& text);

struct FinetuneConfig {
    FinetuneMode mode = FinetuneMode::HeadOnly;
    TaskKind task = TaskKind::Loc;
    std::string subtask;
    std::size_t epochs = 5;
    std::optional<std::size_t> few_shot_k;
    bool init_new_head = false;
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    std::vector<MetricsRecord> records;
    std::vector<EpochResult> epochs;
    std::size_t trainable_params = 0;
    std::size_t total_params = 0;
    double trainable_ratio = 0.0;
    std::size_t train_size = 0;
    bool added_head = false;
};

/// Trains the head for (data.spec.id, cfg.task, cfg.subtask). Head-only trains
/// that head alone and verifies after every epoch that every other component is
/// unchanged (std::logic_error otherwise); full trains the task's whole path.
/// A missing head is created only with init_new_head.
FinetuneResult finetune(FoundationModel& model, const DatasetBundle& data, const FinetuneConfig& cfg,
                        const TrainConfig& train);

}  // namespace fx
