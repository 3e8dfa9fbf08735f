#pragma once

#include <cstdint>
#include <vector>

#include "calibseg/labelmap.hpp"

namespace calibseg {

// Distance to the nearest class interface, in pixels. +inf marks pixels of
// images with no interface at all (constant masks, all-background labels).
struct DistanceMap {
    int h = 0, w = 0;
    std::vector<double> r;

    double at(int y, int x) const { return r[static_cast<std::size_t>(y) * w + x]; }
};

struct LambdaParams {
    double lambda_min = 0.01;
    double lambda_max = 1.0;
    double radius = 10.0; // pixels; weighting is flat at lambda_min beyond this
};

struct LambdaMap {
    int h = 0, w = 0;
    std::vector<double> v;

    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Exact squared Euclidean distance from every pixel to the nearest set pixel
// (mask != 0), by the two-pass separable lower-envelope algorithm with all
// comparisons done in integer arithmetic. INT64_MAX where the set is empty.
std::vector<std::int64_t> edt_sq_to_set(const std::vector<std::uint8_t>& mask, int h, int w);

// Distance from every pixel to the nearest pixel of the opposite value.
// Constant masks give +inf everywhere.
DistanceMap edt_unsigned(const std::vector<std::uint8_t>& mask, int h, int w);

// Distance to the closest foreground-class interface: for each class c in
// {2..num_classes}, binarize labels == c, take its opposite-value EDT minus
// half a pixel (the interface sits between pixels), then the pointwise
// minimum over classes. All-background labelmaps give +inf everywhere.
DistanceMap boundary_distance(const LabelMap& labels, int num_classes);

// lambda(r) = lambda_max * max(radius - r, 0) / radius + lambda_min, exactly.
LambdaMap lambda_map(const DistanceMap& r, const LambdaParams& params);

} // namespace calibseg
