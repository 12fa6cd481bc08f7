#pragma once

#include <cstddef>
#include <vector>

namespace fx {

/// Axis-aligned box in normalized (cx, cy, w, h) form.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    bool operator==(const Box&) const = default;
};

struct BoxTarget {
    std::vector<Box> boxes;
    std::vector<std::size_t> class_ids;

    std::size_t size() const noexcept { return boxes.size(); }
    /// Throws std::invalid_argument on length mismatch or non-positive extent.
    void validate() const;
};

/// Intersection-over-union of two boxes; 0 when disjoint.
double iou(const Box& a, const Box& b);

}  // namespace fx
