#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "calibseg/rng.hpp"
#include "calibseg/tensor.hpp"

namespace calibseg {

// Photometric transform parameters. Each stage runs only when its apply flag
// is set; disabled stages keep identity values so the struct always describes
// the full pipeline. noise_seed fixes the additive-noise stream, making the
// whole pipeline a pure function of (image, params).
struct IntensityParams {
    double gamma = 1.0;
    double scale = 1.0;
    double shift = 0.0;
    double blur_sigma = 0.0;
    double sharpen_amount = 0.0;
    double noise_sigma = 0.0;
    bool apply_gamma = false;
    bool apply_affine = false;
    bool apply_blur = false;
    bool apply_sharpen = false;
    bool apply_noise = false;
    std::uint64_t noise_seed = 0;
};

// Affine geometric transform acting on image-center-relative coordinates,
// with its exact inverse cached. Row-major 2x3 layout: [a b tx; c d ty].
struct GeometricParams {
    std::array<double, 6> fwd{1, 0, 0, 0, 1, 0};
    std::array<double, 6> inv{1, 0, 0, 0, 1, 0};
    bool identity = true;
};

// Rotation (degrees, counterclockwise), isotropic scale, translation in
// pixels, composed about the image center. Throws when the linear part is
// near-singular.
GeometricParams make_affine(double rot_deg, double scale, double tx, double ty);

// Swap of forward and inverse matrices.
GeometricParams inverted(const GeometricParams& p);

// (x, y) through the forward matrix, in center-relative coordinates.
std::array<double, 2> apply_affine(const std::array<double, 6>& m, double x, double y);

struct TransformRanges {
    double p_gamma = 0.5, p_affine = 0.5, p_blur = 0.5, p_sharpen = 0.5, p_noise = 0.5;
    double p_geometric = 0.5;
    double gamma_min = 0.5, gamma_max = 2.0;
    double scale_min = 0.8, scale_max = 1.2;
    double shift_min = -0.1, shift_max = 0.1;
    double blur_sigma_min = 0.25, blur_sigma_max = 1.5;
    double sharpen_min = 0.1, sharpen_max = 0.5;
    double noise_sigma_min = 0.01, noise_sigma_max = 0.1;
    double rot_deg_min = -15.0, rot_deg_max = 15.0;
    double geo_scale_min = 0.9, geo_scale_max = 1.1;
    double trans_frac_min = -0.1, trans_frac_max = 0.1; // fraction of image side
    int image_side = 64;                                // converts fractions to pixels
};

void validate_ranges(const TransformRanges& r);

// Both samplers consume a fixed number of draws regardless of which gates
// fire, so parallel substreams stay aligned.
IntensityParams sample_intensity(Rng& rng, const TransformRanges& ranges);
GeometricParams sample_geometric(Rng& rng, const TransformRanges& ranges);

// Photometric pipeline on a [H,W] image in [0,1]:
// gamma -> scale/shift -> blur -> sharpen -> noise -> clip. Blur and the
// sharpen's internal blur use a replicate-edge separable Gaussian.
Tensor apply_intensity(const Tensor& image, const IntensityParams& params);

// In-place separable Gaussian blur, replicate edges, kernel truncated at
// 3 sigma (no-op callers should skip sigma <= 0 themselves).
void gaussian_blur_2d(std::vector<float>& img, int h, int w, double sigma);

enum class WarpMode { bilinear, nearest };

// Backward warping: output pixel o samples the input at inv(A) applied to o
// (center-relative). Out-of-bounds samples produce `fill` and a zero entry in
// *in_bounds (one byte per output pixel, shared across channels). Bilinear
// mode differentiates with respect to image values.
Tensor warp(Tape& tape, const Tensor& image, const GeometricParams& params, WarpMode mode,
            float fill, std::vector<std::uint8_t>* in_bounds = nullptr);

// Per-sample transforms over a batch [N,C,H,W].
Tensor warp(Tape& tape, const Tensor& images, std::span<const GeometricParams> params,
            WarpMode mode, float fill, std::vector<std::uint8_t>* in_bounds = nullptr);

struct EquivariantResult {
    Tensor logits;                    // [C,H,W], original frame
    std::vector<std::uint8_t> valid;  // H*W, pixels whose round trip stayed in bounds
};

// g(X) = unwarp(net(intensity(warp(X)))): the network sees the transformed
// image, the logits come back to the original frame, and gradients flow
// through the inverse warp into the network.
// net maps [1,1,H,W] -> [1,C,H,W] on the given tape. x is [H,W] in [0,1].
EquivariantResult equivariant_forward(Tape& tape,
                                      const std::function<Tensor(Tape&, const Tensor&)>& net,
                                      const Tensor& x, const IntensityParams& phi,
                                      const GeometricParams& psi);

} // namespace calibseg
