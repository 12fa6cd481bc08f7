#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "fx/boxes.hpp"
#include "fx/tensor.hpp"

namespace fx {

/// Normalized Mann-Whitney U of one score column; ties count one half.
/// Empty when the labels are all positive or all negative.
std::optional<double> auc_binary(std::span<const double> scores, std::span<const double> labels);

/// Macro AUC over the columns of N x C score/label matrices, skipping columns
/// without both classes. Empty when no column is evaluable.
std::optional<double> auc(const Tensor& scores, const Tensor& labels);

/// 2|A n B| / (|A| + |B|) of binary masks; 1 when both are empty.
/// Throws ShapeError on shape mismatch.
double dice(const Tensor& pred, const Tensor& gt);

struct Detection {
    std::size_t image_id = 0;
    Box box;
    std::size_t class_id = 0;
    double confidence = 0.0;
};

struct GroundTruth {
    std::size_t image_id = 0;
    Box box;
    std::size_t class_id = 0;
};

/// Mean over classes with at least one ground truth of the all-point
/// interpolated average precision. Detections are visited by descending
/// confidence (stable on ties) and each claims the best-overlapping unmatched
/// ground truth of its image and class when IoU >= threshold.
/// Empty when there is no ground truth at all.
std::optional<double> map_at_iou(std::span<const Detection> detections, std::span<const GroundTruth> ground_truths,
                                 double iou_threshold = 0.40);

enum class TaskKind { Cls, Loc, Seg };
enum class EpochMode { Lock, Release, EvalOnly };

std::string to_string(TaskKind task);
std::string to_string(EpochMode mode);
TaskKind parse_task(const std::string& text);

struct MetricsRecord {
    std::size_t cycle = 0;
    std::size_t epoch = 0;
    std::string dataset;
    std::string task;  // "cls", "loc", "seg" or "loc/<subtask>"
    EpochMode mode = EpochMode::EvalOnly;
    std::string metric;  // "AUC", "mAP40" or "Dice"
    double value = 0.0;
};

std::string metric_name(TaskKind task);

}  // namespace fx
