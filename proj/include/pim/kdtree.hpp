#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pim/vec.hpp"

namespace pim {

/// Static KD-tree over tagged points of one dimension. Nearest-neighbour
/// queries break distance ties by the smaller tag.
class KdTree {
public:
    struct Point {
        std::string id;
        Vec value;
    };

    KdTree() = default;

    explicit KdTree(std::vector<Point> points)
        : points_(std::move(points))
    {
        if (!points_.empty()) dim_ = points_.front().value.size();
        for (const auto& p : points_)
            if (p.value.size() != dim_) throw Error("KdTree: mixed point dimensions");
        order_.resize(points_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        root_ = build(0, order_.size(), 0);
    }

    std::size_t size() const noexcept { return points_.size(); }
    std::size_t dim() const noexcept { return dim_; }

    /// Nearest point to `q`; nullopt on an empty tree.
    std::optional<Point> nearest(const Vec& q) const
    {
        if (points_.empty()) return std::nullopt;
        if (q.size() != dim_) throw Error("KdTree: query dimension mismatch");
        Best best;
        search(root_, q, best);
        return points_[best.index];
    }

private:
    struct Node {
        std::size_t point = 0;
        std::size_t axis = 0;
        int left = -1;
        int right = -1;
    };

    struct Best {
        std::size_t index = 0;
        double dist2 = std::numeric_limits<double>::infinity();
    };

    int build(std::size_t lo, std::size_t hi, std::size_t depth)
    {
        if (lo >= hi) return -1;
        const std::size_t axis = dim_ ? depth % dim_ : 0;
        const std::size_t mid = lo + (hi - lo) / 2;
        std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                         [&](std::size_t a, std::size_t b) { return points_[a].value[axis] < points_[b].value[axis]; });
        const int idx = static_cast<int>(nodes_.size());
        nodes_.push_back({order_[mid], axis, -1, -1});
        const int l = build(lo, mid, depth + 1);
        const int r = build(mid + 1, hi, depth + 1);
        nodes_[idx].left = l;
        nodes_[idx].right = r;
        return idx;
    }

    bool better(double d2, std::size_t idx, const Best& best) const
    {
        if (d2 < best.dist2) return true;
        return d2 == best.dist2 && points_[idx].id < points_[best.index].id;
    }

    void search(int n, const Vec& q, Best& best) const
    {
        if (n < 0) return;
        const Node& node = nodes_[n];
        const Vec& p = points_[node.point].value;
        double d2 = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) d2 += (p[i] - q[i]) * (p[i] - q[i]);
        if (better(d2, node.point, best)) best = {node.point, d2};
        const double diff = q[node.axis] - p[node.axis];
        const int near = diff < 0 ? node.left : node.right;
        const int far = diff < 0 ? node.right : node.left;
        search(near, q, best);
        // <= keeps equidistant points on the far side reachable for the tie-break.
        if (diff * diff <= best.dist2) search(far, q, best);
    }

    std::vector<Point> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    std::size_t dim_ = 0;
    int root_ = -1;
};

} // namespace pim
