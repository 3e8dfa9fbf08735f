#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "calibseg/distlambda.hpp"
#include "calibseg/labelmap.hpp"
#include "calibseg/tensor.hpp"

namespace calibseg {

// A differentiable scalar plus its per-pixel breakdown (data only, [H,W] or
// [N,H,W] for batched inputs).
struct ScalarMap {
    Tensor scalar;
    Tensor map;
};

// Mean over pixels of -log softmax probability of the true class, in log
// space. logits: [C,H,W] with one labelmap, or [N,C,H,W] with one per sample.
// A non-empty `valid` mask (one byte per pixel) restricts the mean and the
// gradients to the marked pixels.
ScalarMap cross_entropy(Tape& tape, const Tensor& logits, const LabelMap& labels);
ScalarMap cross_entropy(Tape& tape, const Tensor& logits, std::span<const LabelMap> labels,
                        std::span<const std::uint8_t> valid = {});

// Soft-target variant: mean over pixels of -sum_c t_c log softmax_c.
ScalarMap cross_entropy_soft(Tape& tape, const Tensor& logits, const SoftLabelMap& targets);
ScalarMap cross_entropy_soft(Tape& tape, const Tensor& logits, std::span<const SoftLabelMap> targets,
                             std::span<const std::uint8_t> valid = {});

// Per-pixel squared logit difference sum_c (a_c - b_c)^2, zero on masked-out
// pixels; scalar = mean over valid pixels (0 when none). Gradients reach both
// branches. valid has one byte per pixel.
ScalarMap consistency_sq(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                         std::span<const std::uint8_t> valid);

// Weighted scalar: mean over valid pixels of w_j * sum_c (a_c - b_c)^2.
// Weights are per pixel. The optional out-map receives the unweighted
// per-pixel consistency.
Tensor consistency_weighted(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                            std::span<const double> weights, std::span<const std::uint8_t> valid,
                            Tensor* unweighted_map = nullptr);

struct PixelLossMaps {
    Tensor ls;                            // per-pixel supervised loss
    Tensor lc;                            // per-pixel consistency, unweighted
    std::vector<std::uint8_t> valid_mask; // pixels whose round trips stayed in bounds
    Tensor total;                         // differentiable scalar
};

// total = mean(ls) + lambda * mean_valid(lc). lambda = 0 short-circuits to
// exactly the cross-entropy path (branch b untouched).
PixelLossMaps cr_total(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                       const LabelMap& labels, float lambda, std::span<const std::uint8_t> valid);

// total = mean(ls) + mean_valid(lambda_j * lc_j), with the per-pixel weights
// taken from a boundary-distance lambda map.
PixelLossMaps bwcr_total(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                         const LabelMap& labels, const LambdaMap& lam,
                         std::span<const std::uint8_t> valid);

// One-hot targets blurred per class with a normalized 3x3 Gaussian,
// renormalized per pixel. As sigma shrinks the kernel collapses to the
// identity and the targets become exact one-hots.
SoftLabelMap svls_targets(const LabelMap& labels, int num_classes, double sigma = 1.0);

// Mean over pixels of sum_c max(0, max_k z_k - z_c - margin).
Tensor mls_penalty(Tape& tape, const Tensor& logits, float margin);

// Binary-case loss surfaces on a (z, z') grid: ls = -log sigmoid(+/-z)
// depending on label_class, lc = (z - z')^2, total = ls + lambda * lc.
// Row index moves along z, column index along z'.
struct LossLandscape {
    int n = 0;
    std::vector<double> z, zp;          // grid coordinates, size n each
    std::vector<double> ls, lc, total;  // n*n row-major
};

LossLandscape loss_landscape(double z_min, double z_max, double zp_min, double zp_max, int grid_n,
                             double lambda, int label_class = 2);

} // namespace calibseg
