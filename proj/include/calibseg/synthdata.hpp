#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calibseg/labelmap.hpp"
#include "calibseg/rng.hpp"
#include "calibseg/tensor.hpp"

namespace calibseg {

// Scene recipe: random ellipses per foreground class rendered as class
// intensities, boundary ambiguity from Gaussian blur, pixel noise, and a
// smooth annotator-jitter displacement field.
struct SceneSpec {
    int height = 64;
    int width = 64;
    int num_fg_classes = 2;
    int min_shapes = 1;
    int max_shapes = 2;
    std::vector<double> contrasts = {0.15, 0.5, 0.85}; // background first, one per class
    double blur_sigma_min = 2.0;
    double blur_sigma_max = 2.0;
    double noise_sigma_min = 0.05;
    double noise_sigma_max = 0.05;
    double jitter_px = 2.0;
};

void validate(const SceneSpec& spec);

// Stable digest of every generator-relevant field.
std::uint64_t spec_hash(const SceneSpec& spec);

struct Sample {
    Tensor image;            // [1,H,W] in [0,1]
    LabelMap hard_label;     // argmax of the jitter-displaced soft field
    SoftLabelMap soft_label; // latent class distribution before jitter
    std::uint64_t seed = 0;
    std::uint64_t spec_digest = 0;
};

Sample generate_sample(Rng& rng, const SceneSpec& spec);

struct DatasetCounts {
    int train = 0;
    int val = 0;
    int test = 0;
};

// Writes <split>/<index>_{image,label,soft}.tnsr plus manifest.txt. Refuses
// a non-empty target directory unless force is set.
void make_dataset(const std::filesystem::path& dir, std::uint64_t seed, const DatasetCounts& n,
                  const SceneSpec& spec, bool force = false);

struct DatasetInfo {
    std::uint64_t seed = 0;
    std::uint64_t spec_digest = 0;
    DatasetCounts counts;
    int height = 0;
    int width = 0;
    int num_classes = 0; // background included
};

DatasetInfo read_manifest(const std::filesystem::path& dir);

Sample load_sample(const std::filesystem::path& dir, const std::string& split, int index);

} // namespace calibseg
