#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fx/autodiff.hpp"
#include "fx/boxes.hpp"

namespace fx {

/// Result of matching T targets onto Q >= T queries.
struct Assignment {
    std::vector<std::size_t> target_to_query;
    double cost = 0.0;
};

/// Minimum-cost injective assignment of targets (columns) to queries (rows)
/// for a Q x T cost matrix, via the shortest augmenting path form of the
/// Hungarian method. Throws std::invalid_argument when Q < T or a cost is not finite.
Assignment hungarian_match(const Tensor& cost);

struct LocLossWeights {
    double cls = 1.0;
    double l1 = 5.0;
    double iou = 2.0;
    /// Relative weight of no-object rows in the classification term.
    double no_object = 0.1;
};

/// Q x T matching cost: w_cls (1 - p_class) + w_l1 L1 + w_iou (1 - IoU).
/// `boxes` is Q x 4, `probs` is Q x (C + 1) softmax output.
Tensor matching_cost(const Tensor& boxes, const Tensor& probs, const BoxTarget& target, const LocLossWeights& w);

/// Mean binary cross-entropy with logits. Throws std::domain_error on non-finite logits.
Var cls_loss(Var logits, const Tensor& targets);

/// Set-prediction loss for a batch. `boxes` is B x Q x 4 in [0,1], `logits` is
/// B x Q x (C + 1) with the last column the no-object class. Each image is
/// matched independently; the class term is a weighted mean over every query,
/// the box terms are averaged over all matched pairs of the batch.
Var loc_loss(Var boxes, Var logits, std::span<const BoxTarget> targets, const LocLossWeights& weights = {});

/// Mean BCE with logits plus (1 - soft Dice) on sigmoid probabilities.
Var seg_loss(Var logits, const Tensor& mask);

/// Mean squared error between student features and detached teacher features.
Var consistency_loss(Var student, const Tensor& teacher);

struct LossBreakdown {
    double task_loss = 0.0;
    std::vector<std::pair<std::string, double>> consistency_terms;
    double total = 0.0;
};

/// Sums task + consistency terms left to right.
LossBreakdown make_breakdown(double task_loss, std::vector<std::pair<std::string, double>> consistency_terms);

}  // namespace fx
