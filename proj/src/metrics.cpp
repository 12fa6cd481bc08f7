#include "fx/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace fx {

std::optional<double> auc_binary(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midranks (1-based) over tie groups, then U = R_pos - n_pos (n_pos + 1) / 2.
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] > 0.5) {
                rank_sum += midrank;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    const double np = static_cast<double>(n_pos);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

std::optional<double> auc(const Tensor& scores, const Tensor& labels) {
    if (scores.shape() != labels.shape() || scores.rank() != 2)
        throw ShapeError("auc: shape mismatch " + shape_to_string(scores.shape()) + " vs " + shape_to_string(labels.shape()));
    const std::size_t n = scores.dim(0), c = scores.dim(1);
    double total = 0.0;
    std::size_t used = 0;
    std::vector<double> s(n), l(n);
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = scores[i * c + j];
            l[i] = labels[i * c + j];
        }
        if (auto a = auc_binary(s, l)) {
            total += *a;
            ++used;
        }
    }
    if (used == 0) return std::nullopt;
    return total / static_cast<double>(used);
}

double dice(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("dice: shape mismatch " + shape_to_string(pred.shape()) + " vs " + shape_to_string(gt.shape()));
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] > 0.5, g = gt[i] > 0.5;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::optional<double> map_at_iou(std::span<const Detection> detections, std::span<const GroundTruth> ground_truths,
                                 double iou_threshold) {
    std::size_t num_classes = 0;
    for (const auto& g : ground_truths) num_classes = std::max(num_classes, g.class_id + 1);
    if (ground_truths.empty()) return std::nullopt;

    double ap_sum = 0.0;
    std::size_t evaluated = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::vector<std::size_t> gts;
        for (std::size_t i = 0; i < ground_truths.size(); ++i)
            if (ground_truths[i].class_id == c) gts.push_back(i);
        if (gts.empty()) continue;

        std::vector<std::size_t> dets;
        for (std::size_t i = 0; i < detections.size(); ++i)
            if (detections[i].class_id == c) dets.push_back(i);
        std::stable_sort(dets.begin(), dets.end(),
                         [&](std::size_t a, std::size_t b) { return detections[a].confidence > detections[b].confidence; });

        std::vector<bool> taken(gts.size(), false);
        std::vector<double> precision, recall;
        std::size_t tp = 0;
        for (std::size_t k = 0; k < dets.size(); ++k) {
            const auto& d = detections[dets[k]];
            double best = iou_threshold;
            std::ptrdiff_t best_gt = -1;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                const auto& gt = ground_truths[gts[g]];
                if (taken[g] || gt.image_id != d.image_id) continue;
                const double o = iou(d.box, gt.box);
                if (o >= best) {
                    best = o;
                    best_gt = static_cast<std::ptrdiff_t>(g);
                }
            }
            if (best_gt >= 0) {
                taken[static_cast<std::size_t>(best_gt)] = true;
                ++tp;
            }
            precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
            recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
        }
        // Monotone precision envelope, then area under the step curve.
        for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
        double ap = 0.0, prev_recall = 0.0;
        for (std::size_t k = 0; k < precision.size(); ++k) {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
        ap_sum += ap;
        ++evaluated;
    }
    return ap_sum / static_cast<double>(evaluated);
}

std::string to_string(TaskKind task) {
    switch (task) {
        case TaskKind::Cls: return "cls";
        case TaskKind::Loc: return "loc";
        case TaskKind::Seg: return "seg";
    }
    return "?";
}

std::string to_string(EpochMode mode) {
    switch (mode) {
        case EpochMode::Lock: return "Lock";
        case EpochMode::Release: return "Release";
        case EpochMode::EvalOnly: return "eval-only";
    }
    return "?";
}

TaskKind parse_task(const std::string& text) {
    if (text == "cls") return TaskKind::Cls;
    if (text == "loc") return TaskKind::Loc;
    if (text == "seg") return TaskKind::Seg;
    throw std::invalid_argument("unknown task '" + text + "' (expected cls, loc or seg)");
}

std::string metric_name(TaskKind task) {
    switch (task) {
        case TaskKind::Cls: return "AUC";
        case TaskKind::Loc: return "mAP40";
        case TaskKind::Seg: return "Dice";
    }
    return "?";
}

}  // namespace fx
