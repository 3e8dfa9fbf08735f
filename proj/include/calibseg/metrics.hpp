#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calibseg/labelmap.hpp"
#include "calibseg/rng.hpp"
#include "calibseg/tensor.hpp"

namespace calibseg {

// Per-pixel class probabilities [C,H,W] paired with ground truth. Probability
// columns must sum to 1 within 1e-4.
struct CalibrationInput {
    Tensor probs;
    LabelMap labels;
};

// 2|P∩G| / (|P|+|G|) for one class id; 1.0 when both masks are empty.
double dice(const LabelMap& pred, const LabelMap& gt, int cls);

// Expected calibration error: confidence = max-class probability, equal-width
// bins on (0,1], pooled over all pixels of the image. Argmax ties go to the
// lowest class id.
double ece(const CalibrationInput& input, int n_bins = 15);

struct TaceResult {
    double value = 0.0;
    bool empty = false; // no probability cleared the threshold in any class
};

// Thresholded adaptive calibration error: per class, probabilities >= threshold
// are sorted (ties by pixel index) and split into equal-count bins, remainder
// spread over the leading bins; the result averages |freq - mean prob| over all
// non-empty (class, bin) cells.
TaceResult tace(const CalibrationInput& input, int n_bins = 15, double threshold = 0.01);

// Two-sided paired permutation test on the mean of differences via random sign
// flips: p = (1 + #{|t*| >= |t|}) / (n_resamples + 1).
double paired_permutation_test(std::span<const double> a, std::span<const double> b,
                               int n_resamples, Rng& rng);

struct Aggregate {
    double mean = 0.0;
    double stdev = 0.0; // sample standard deviation, 0 for a single value
};

Aggregate aggregate(std::span<const double> xs);

struct ImageMetrics {
    std::vector<double> dice_per_class; // foreground classes 2..C
    double dice_mean = 0.0;
    double ece = 0.0;
    double tace = 0.0;
    bool tace_empty = false;
};

struct MetricsReport {
    int num_classes = 0;
    std::vector<ImageMetrics> rows;
    Aggregate dice_agg, ece_agg, tace_agg;
    std::string config_hash;
    std::uint64_t seed = 0;
};

// Computes one row from a prediction; dice is taken over foreground classes.
ImageMetrics evaluate_image(const CalibrationInput& input);

// Fills the aggregates from the per-image rows.
void finalize_report(MetricsReport& report);

} // namespace calibseg
