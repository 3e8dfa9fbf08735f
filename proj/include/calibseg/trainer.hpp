#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calibseg/distlambda.hpp"
#include "calibseg/metrics.hpp"
#include "calibseg/model.hpp"
#include "calibseg/transforms.hpp"

namespace calibseg {

// Training objectives. All transformed methods supervise branch a in the
// original frame; cr and bwcr add a consistency term between two
// independently transformed branches.
enum class Method { baseline, da, cr, bwcr, svls, mls };

Method method_from_string(const std::string& s);
std::string to_string(Method m);

struct TrainConfig {
    Method method = Method::da;
    double lambda = 1.0;            // consistency weight for cr
    LambdaParams lambda_params{};   // boundary weighting for bwcr
    bool bwcr_const_lambda = false; // diagnostic: flat map at `lambda` instead
    bool supervise_both_branches = false;
    double svls_sigma = 1.0;
    double mls_margin = 10.0;
    double mls_weight = 0.1;
    TransformRanges ranges{};       // image_side is taken from the dataset
    int batch_size = 16;
    int iterations = 2000;
    double lr_start = 1e-4;
    double lr_end = 1e-7;
    std::uint64_t seed = 0;
    int val_interval = 100;
    double ema_decay = 0.999;
    std::filesystem::path dataset_dir;
    UNetConfig unet{};
};

void validate(const TrainConfig& cfg);

// Linear ramp from lr_start at t = 0 to lr_end at the last iteration.
// t outside [0, iterations) throws.
double lr_schedule(int t, const TrainConfig& cfg);

// Adam moments kept in double so the update matches a reference
// implementation to float rounding of the stored weights.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::uint64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

AdamState make_adam_state(const WeightSet& ws);

// One bias-corrected update from the gradients currently on the weights.
// Any non-finite gradient leaves weights and state untouched and returns
// false.
bool adam_step(WeightSet& ws, AdamState& state, double lr);

// Per-iteration rows: ls is the supervised term, lc the regularizer
// contribution (consistency or margin penalty, already weighted), so
// total = ls + lc for every method.
struct TrainIterRow {
    int iter = 0;
    double ls = 0.0, lc = 0.0, total = 0.0, lr = 0.0;
};

struct ValRow {
    int iter = 0;
    double dice = 0.0, ece = 0.0;
};

struct TrainLog {
    std::vector<TrainIterRow> iters;
    std::vector<ValRow> vals;
    int best_iter = -1;
    double best_dice = -1.0;
    bool diverged = false;      // loss went non-finite; training stopped early
    int skipped_updates = 0;    // iterations dropped for non-finite gradients
};

struct TrainResult {
    WeightSet weights; // EMA snapshot with the best validation dice
    TrainLog log;
};

// Runs the full loop: per-iteration batches drawn with replacement, method
// dispatch, Adam, EMA shadow, validation on EMA weights every val_interval
// iterations and at the end. Deterministic per (config, seed).
TrainResult train(const TrainConfig& cfg);

// Forward pass over a split with no test-time transforms; one row per image.
MetricsReport evaluate(const WeightSet& ws, const UNetConfig& unet,
                       const std::filesystem::path& dataset_dir, const std::string& split);

// The stored soft labels read as a predictor and scored against the hard
// labels. Upper reference point for calibration on synthetic data.
MetricsReport evaluate_soft_oracle(const std::filesystem::path& dataset_dir,
                                   const std::string& split);

// train_log.csv (iter,ls,lc,total,lr) and val_log.csv (iter,val_dice,val_ece).
void write_train_log(const TrainLog& log, const std::filesystem::path& dir);

// Per-image rows; aggregates are recomputed on read.
void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_metrics_csv(const std::filesystem::path& path);

} // namespace calibseg
