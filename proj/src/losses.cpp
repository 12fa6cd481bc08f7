#include "fx/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fx {

Tensor matching_cost(const Tensor& boxes, const Tensor& probs, const BoxTarget& target, const LocLossWeights& w) {
    const std::size_t q = boxes.dim(0), t = target.size();
    const std::size_t c = probs.dim(1);
    Tensor cost({q, std::max<std::size_t>(t, 1)}, 0.0);
    for (std::size_t i = 0; i < q; ++i) {
        const Box pb{boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]};
        for (std::size_t j = 0; j < t; ++j) {
            const auto& tb = target.boxes[j];
            const double l1 = std::abs(pb.cx - tb.cx) + std::abs(pb.cy - tb.cy) + std::abs(pb.w - tb.w) + std::abs(pb.h - tb.h);
            const double p = probs[i * c + target.class_ids[j]];
            cost[i * t + j] = w.cls * (1.0 - p) + w.l1 * l1 + w.iou * (1.0 - iou(pb, tb));
        }
    }
    return cost;
}

Var cls_loss(Var logits, const Tensor& targets) {
    for (double x : logits.value().data())
        if (!std::isfinite(x)) throw std::domain_error("cls_loss: non-finite logit");
    return bce_with_logits(logits, targets);
}

Var loc_loss(Var boxes, Var logits, std::span<const BoxTarget> targets, const LocLossWeights& weights) {
    auto& tape = boxes.tape();
    const auto& B = boxes.value();
    const auto& L = logits.value();
    if (B.rank() != 3 || B.dim(2) != 4 || L.rank() != 3 || L.dim(0) != B.dim(0) || L.dim(1) != B.dim(1))
        throw ShapeError(tape.where("loc_loss") + ": shape mismatch " + shape_to_string(B.shape()) + " vs " +
                         shape_to_string(L.shape()));
    const std::size_t nb = B.dim(0), q = B.dim(1), c1 = L.dim(2);
    if (targets.size() != nb) throw std::invalid_argument("loc_loss: one target per image required");
    const std::size_t no_object = c1 - 1;

    std::vector<std::size_t> cls_target(nb * q, no_object);
    std::vector<double> cls_weight(nb * q, weights.no_object);
    std::vector<std::size_t> matched_rows;
    std::vector<double> matched_boxes;

    for (std::size_t b = 0; b < nb; ++b) {
        const auto& tgt = targets[b];
        tgt.validate();
        if (tgt.size() > q) throw std::invalid_argument("loc_loss: more targets than queries");
        if (tgt.size() == 0) continue;
        Tensor pb({q, 4}, std::vector<double>(B.data().begin() + static_cast<std::ptrdiff_t>(b * q * 4),
                                              B.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * q * 4)));
        Tensor probs({q, c1});
        for (std::size_t i = 0; i < q; ++i) {
            const double* row = &L.data()[(b * q + i) * c1];
            const double mx = *std::max_element(row, row + c1);
            double z = 0.0;
            for (std::size_t j = 0; j < c1; ++j) z += (probs[i * c1 + j] = std::exp(row[j] - mx));
            for (std::size_t j = 0; j < c1; ++j) probs[i * c1 + j] /= z;
        }
        for (auto id : tgt.class_ids)
            if (id >= no_object) throw std::out_of_range("loc_loss: target class id out of range");
        const auto match = hungarian_match(matching_cost(pb, probs, tgt, weights));
        for (std::size_t j = 0; j < tgt.size(); ++j) {
            const std::size_t row = b * q + match.target_to_query[j];
            cls_target[row] = tgt.class_ids[j];
            cls_weight[row] = 1.0;
            matched_rows.push_back(row);
            const auto& tb = tgt.boxes[j];
            matched_boxes.insert(matched_boxes.end(), {tb.cx, tb.cy, tb.w, tb.h});
        }
    }

    auto scope = tape.scope("loc_loss");
    Var total = scale(softmax_cross_entropy(reshape(logits, {nb * q, c1}), cls_target, cls_weight), weights.cls);
    if (!matched_rows.empty()) {
        const std::size_t m = matched_rows.size();
        Tensor tb({m, 4}, std::move(matched_boxes));
        Var picked = gather_rows(reshape(boxes, {nb * q, 4}), std::move(matched_rows));
        Var l1 = scale(l1_distance(picked, tb), weights.l1 / static_cast<double>(m));
        Var giou = scale(mean(box_iou(picked, tb)), -weights.iou);
        total = add(add(add(total, l1), tape.constant(Tensor::scalar(weights.iou))), giou);
    }
    return total;
}

Var seg_loss(Var logits, const Tensor& mask) {
    auto& tape = logits.tape();
    if (logits.shape() != mask.shape())
        throw ShapeError(tape.where("seg_loss") + ": shape mismatch " + shape_to_string(logits.shape()) + " vs " +
                         shape_to_string(mask.shape()));
    return add(bce_with_logits(logits, mask), soft_dice_loss(sigmoid(logits), mask, 1.0));
}

Var consistency_loss(Var student, const Tensor& teacher) { return mse(student, teacher); }

LossBreakdown make_breakdown(double task_loss, std::vector<std::pair<std::string, double>> consistency_terms) {
    LossBreakdown out{task_loss, std::move(consistency_terms), task_loss};
    for (const auto& [name, v] : out.consistency_terms) out.total += v;
    return out;
}

}  // namespace fx
