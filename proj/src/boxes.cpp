#include "fx/boxes.hpp"

#include <algorithm>
#include <stdexcept>

namespace fx {

void BoxTarget::validate() const {
    if (boxes.size() != class_ids.size()) throw std::invalid_argument("box target: boxes and class ids differ in length");
    for (const auto& b : boxes)
        if (!(b.w > 0.0 && b.h > 0.0)) throw std::invalid_argument("box target: non-positive box extent");
}

double iou(const Box& a, const Box& b) {
    // Areas from the same edges as the intersection, so iou(a, a) is exactly 1.
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double ix = std::min(ax2, bx2) - std::max(ax1, bx1);
    const double iy = std::min(ay2, by2) - std::max(ay1, by1);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter);
}

}  // namespace fx
