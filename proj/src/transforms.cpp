#include "calibseg/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

namespace calibseg {

GeometricParams make_affine(double rot_deg, double scale, double tx, double ty) {
    const double th = rot_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    GeometricParams p;
    p.fwd = {scale * c, -scale * s, tx, scale * s, scale * c, ty};
    const double det = p.fwd[0] * p.fwd[4] - p.fwd[1] * p.fwd[3];
    if (std::abs(det) <= 1e-6) throw std::invalid_argument("make_affine: near-singular linear part");
    const double ia = p.fwd[4] / det, ib = -p.fwd[1] / det;
    const double ic = -p.fwd[3] / det, id = p.fwd[0] / det;
    p.inv = {ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)};
    p.identity = rot_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0;
    return p;
}

GeometricParams inverted(const GeometricParams& p) {
    GeometricParams q = p;
    std::swap(q.fwd, q.inv);
    return q;
}

std::array<double, 2> apply_affine(const std::array<double, 6>& m, double x, double y) {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

void validate_ranges(const TransformRanges& r) {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(r.p_gamma) || !prob(r.p_affine) || !prob(r.p_blur) || !prob(r.p_sharpen) ||
        !prob(r.p_noise) || !prob(r.p_geometric))
        throw std::invalid_argument("transform ranges: probabilities must be in [0,1]");
    auto ordered = [](double lo, double hi) { return lo <= hi; };
    if (!ordered(r.gamma_min, r.gamma_max) || !ordered(r.scale_min, r.scale_max) ||
        !ordered(r.shift_min, r.shift_max) || !ordered(r.blur_sigma_min, r.blur_sigma_max) ||
        !ordered(r.sharpen_min, r.sharpen_max) || !ordered(r.noise_sigma_min, r.noise_sigma_max) ||
        !ordered(r.rot_deg_min, r.rot_deg_max) || !ordered(r.geo_scale_min, r.geo_scale_max) ||
        !ordered(r.trans_frac_min, r.trans_frac_max))
        throw std::invalid_argument("transform ranges: min must not exceed max");
    if (r.gamma_min < 0.25 || r.gamma_max > 4.0)
        throw std::invalid_argument("transform ranges: gamma must stay within [0.25, 4]");
    if (r.blur_sigma_min < 0.0 || r.sharpen_min < 0.0 || r.noise_sigma_min < 0.0)
        throw std::invalid_argument("transform ranges: sigmas and sharpen amount must be nonnegative");
    if (r.geo_scale_min <= 0.0)
        throw std::invalid_argument("transform ranges: geometric scale must be positive");
    if (r.image_side < 1) throw std::invalid_argument("transform ranges: image side must be positive");
}

IntensityParams sample_intensity(Rng& rng, const TransformRanges& ranges) {
    validate_ranges(ranges);
    IntensityParams p;
    // every gate and value is drawn so the stream length never depends on outcomes
    const bool g_on = rng.bernoulli(ranges.p_gamma);
    const double g = rng.uniform(ranges.gamma_min, ranges.gamma_max);
    const bool a_on = rng.bernoulli(ranges.p_affine);
    const double sc = rng.uniform(ranges.scale_min, ranges.scale_max);
    const double sh = rng.uniform(ranges.shift_min, ranges.shift_max);
    const bool b_on = rng.bernoulli(ranges.p_blur);
    const double bs = rng.uniform(ranges.blur_sigma_min, ranges.blur_sigma_max);
    const bool s_on = rng.bernoulli(ranges.p_sharpen);
    const double sa = rng.uniform(ranges.sharpen_min, ranges.sharpen_max);
    const bool n_on = rng.bernoulli(ranges.p_noise);
    const double ns = rng.uniform(ranges.noise_sigma_min, ranges.noise_sigma_max);
    p.noise_seed = rng.next_u64();
    if (g_on) {
        p.apply_gamma = true;
        p.gamma = g;
    }
    if (a_on) {
        p.apply_affine = true;
        p.scale = sc;
        p.shift = sh;
    }
    if (b_on) {
        p.apply_blur = true;
        p.blur_sigma = bs;
    }
    if (s_on) {
        p.apply_sharpen = true;
        p.sharpen_amount = sa;
    }
    if (n_on) {
        p.apply_noise = true;
        p.noise_sigma = ns;
    }
    return p;
}

GeometricParams sample_geometric(Rng& rng, const TransformRanges& ranges) {
    validate_ranges(ranges);
    const bool on = rng.bernoulli(ranges.p_geometric);
    const double rot = rng.uniform(ranges.rot_deg_min, ranges.rot_deg_max);
    const double sc = rng.uniform(ranges.geo_scale_min, ranges.geo_scale_max);
    const double tx = rng.uniform(ranges.trans_frac_min, ranges.trans_frac_max) * ranges.image_side;
    const double ty = rng.uniform(ranges.trans_frac_min, ranges.trans_frac_max) * ranges.image_side;
    if (!on) return GeometricParams{};
    auto p = make_affine(rot, sc, tx, ty);
    p.identity = false;
    return p;
}

// Separable Gaussian with replicate-edge sampling, truncated at 3 sigma.
void gaussian_blur_2d(std::vector<float>& img, int h, int w, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(radius) + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i)
        norm += std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
    for (int i = 0; i <= radius; ++i)
        k[static_cast<std::size_t>(i)] =
            std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma)) / norm;

    std::vector<float> tmp(img.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xi = std::clamp(x + i, 0, w - 1);
                acc += k[static_cast<std::size_t>(std::abs(i))] * img[static_cast<std::size_t>(y) * w + xi];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yi = std::clamp(y + i, 0, h - 1);
                acc += k[static_cast<std::size_t>(std::abs(i))] * tmp[static_cast<std::size_t>(yi) * w + x];
            }
            img[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
}

Tensor apply_intensity(const Tensor& image, const IntensityParams& params) {
    if (image.rank() != 2) throw std::invalid_argument("apply_intensity: image must be [H,W]");
    if (params.apply_gamma && (params.gamma < 0.25 || params.gamma > 4.0))
        throw std::invalid_argument("apply_intensity: gamma outside [0.25, 4]");
    if (params.blur_sigma < 0.0 || params.sharpen_amount < 0.0 || params.noise_sigma < 0.0)
        throw std::invalid_argument("apply_intensity: negative sigma");
    const int h = image.dim(0), w = image.dim(1);
    std::vector<float> buf(image.data().begin(), image.data().end());
    bool touched = false;

    if (params.apply_gamma) {
        touched = true;
        for (auto& v : buf) v = std::pow(std::max(v, 0.0f), static_cast<float>(params.gamma));
    }
    if (params.apply_affine) {
        touched = true;
        const float sc = static_cast<float>(params.scale), sh = static_cast<float>(params.shift);
        for (auto& v : buf) v = sc * v + sh;
    }
    if (params.apply_blur && params.blur_sigma > 0.0) {
        touched = true;
        gaussian_blur_2d(buf, h, w, params.blur_sigma);
    }
    if (params.apply_sharpen && params.sharpen_amount > 0.0) {
        touched = true;
        std::vector<float> low = buf;
        gaussian_blur_2d(low, h, w, 1.0);
        const float amt = static_cast<float>(params.sharpen_amount);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += amt * (buf[i] - low[i]);
    }
    if (params.apply_noise && params.noise_sigma > 0.0) {
        touched = true;
        Rng nr(params.noise_seed);
        const float ns = static_cast<float>(params.noise_sigma);
        for (auto& v : buf) v += ns * static_cast<float>(nr.normal());
    }
    if (touched)
        for (auto& v : buf) v = std::clamp(v, 0.0f, 1.0f);
    return Tensor::from_data({h, w}, std::move(buf));
}

namespace {

void warp_plane_set(const float* in, float* out, int c, int h, int w, const GeometricParams& p,
                    WarpMode mode, float fill, std::uint8_t* mask) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (p.identity) {
        std::memcpy(out, in, sizeof(float) * c * plane);
        if (mask) std::memset(mask, 1, plane);
        return;
    }
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
            const auto s = apply_affine(p.inv, ox - cx, oy - cy);
            const double sx = s[0] + cx, sy = s[1] + cy;
            const std::size_t oidx = static_cast<std::size_t>(oy) * w + ox;
            bool inb = false;
            if (mode == WarpMode::bilinear) {
                inb = sx >= 0.0 && sx <= w - 1 && sy >= 0.0 && sy <= h - 1;
                if (inb) {
                    const int x0 = static_cast<int>(std::floor(sx));
                    const int y0 = static_cast<int>(std::floor(sy));
                    const int x1 = std::min(x0 + 1, w - 1);
                    const int y1 = std::min(y0 + 1, h - 1);
                    const float wx = static_cast<float>(sx - x0), wy = static_cast<float>(sy - y0);
                    for (int ch = 0; ch < c; ++ch) {
                        const float* pl = in + static_cast<std::size_t>(ch) * plane;
                        const float top = (1.0f - wx) * pl[static_cast<std::size_t>(y0) * w + x0] +
                                          wx * pl[static_cast<std::size_t>(y0) * w + x1];
                        const float bot = (1.0f - wx) * pl[static_cast<std::size_t>(y1) * w + x0] +
                                          wx * pl[static_cast<std::size_t>(y1) * w + x1];
                        out[static_cast<std::size_t>(ch) * plane + oidx] = (1.0f - wy) * top + wy * bot;
                    }
                }
            } else {
                const int xi = static_cast<int>(std::floor(sx + 0.5));
                const int yi = static_cast<int>(std::floor(sy + 0.5));
                inb = xi >= 0 && xi < w && yi >= 0 && yi < h;
                if (inb)
                    for (int ch = 0; ch < c; ++ch)
                        out[static_cast<std::size_t>(ch) * plane + oidx] =
                            in[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(yi) * w + xi];
            }
            if (!inb)
                for (int ch = 0; ch < c; ++ch)
                    out[static_cast<std::size_t>(ch) * plane + oidx] = fill;
            if (mask) mask[oidx] = inb ? 1 : 0;
        }
}

void warp_plane_grad(float* in_grad, const float* out_grad, int c, int h, int w,
                     const GeometricParams& p, WarpMode mode) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (p.identity) {
        for (std::size_t i = 0; i < c * plane; ++i) in_grad[i] += out_grad[i];
        return;
    }
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
            const auto s = apply_affine(p.inv, ox - cx, oy - cy);
            const double sx = s[0] + cx, sy = s[1] + cy;
            const std::size_t oidx = static_cast<std::size_t>(oy) * w + ox;
            if (mode == WarpMode::bilinear) {
                if (!(sx >= 0.0 && sx <= w - 1 && sy >= 0.0 && sy <= h - 1)) continue;
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const int x1 = std::min(x0 + 1, w - 1);
                const int y1 = std::min(y0 + 1, h - 1);
                const float wx = static_cast<float>(sx - x0), wy = static_cast<float>(sy - y0);
                for (int ch = 0; ch < c; ++ch) {
                    const float g = out_grad[static_cast<std::size_t>(ch) * plane + oidx];
                    float* pg = in_grad + static_cast<std::size_t>(ch) * plane;
                    pg[static_cast<std::size_t>(y0) * w + x0] += (1.0f - wy) * (1.0f - wx) * g;
                    pg[static_cast<std::size_t>(y0) * w + x1] += (1.0f - wy) * wx * g;
                    pg[static_cast<std::size_t>(y1) * w + x0] += wy * (1.0f - wx) * g;
                    pg[static_cast<std::size_t>(y1) * w + x1] += wy * wx * g;
                }
            } else {
                const int xi = static_cast<int>(std::floor(sx + 0.5));
                const int yi = static_cast<int>(std::floor(sy + 0.5));
                if (!(xi >= 0 && xi < w && yi >= 0 && yi < h)) continue;
                for (int ch = 0; ch < c; ++ch)
                    in_grad[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(yi) * w + xi] +=
                        out_grad[static_cast<std::size_t>(ch) * plane + oidx];
            }
        }
}

Tensor warp_impl(Tape& tape, const Tensor& image, std::vector<GeometricParams> params, WarpMode mode,
                 float fill, std::vector<std::uint8_t>* in_bounds) {
    const bool batched = image.rank() == 4;
    if (!batched && image.rank() != 3)
        throw std::invalid_argument("warp: image must be [C,H,W] or [N,C,H,W]");
    const int n = batched ? image.dim(0) : 1;
    const int c = batched ? image.dim(1) : image.dim(0);
    const int h = batched ? image.dim(2) : image.dim(1);
    const int w = batched ? image.dim(3) : image.dim(2);
    if (static_cast<int>(params.size()) != n)
        throw std::invalid_argument("warp: need one transform per image");

    Tensor out = Tensor::zeros(image.shape());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (in_bounds) in_bounds->assign(static_cast<std::size_t>(n) * plane, 0);
    for (int i = 0; i < n; ++i)
        warp_plane_set(image.data().data() + static_cast<std::size_t>(i) * c * plane,
                       out.data().data() + static_cast<std::size_t>(i) * c * plane, c, h, w,
                       params[static_cast<std::size_t>(i)], mode, fill,
                       in_bounds ? in_bounds->data() + static_cast<std::size_t>(i) * plane : nullptr);

    if (image.requires_grad()) {
        out.set_requires_grad(true);
        Tensor ih = image, oh = out;
        tape.record([ih, oh, params = std::move(params), mode, n, c, h, w, plane]() mutable {
            for (int i = 0; i < n; ++i)
                warp_plane_grad(ih.grad().data() + static_cast<std::size_t>(i) * c * plane,
                                oh.grad().data() + static_cast<std::size_t>(i) * c * plane, c, h, w,
                                params[static_cast<std::size_t>(i)], mode);
        });
    }
    return out;
}

} // namespace

Tensor warp(Tape& tape, const Tensor& image, const GeometricParams& params, WarpMode mode,
            float fill, std::vector<std::uint8_t>* in_bounds) {
    if (image.rank() != 3) throw std::invalid_argument("warp: image must be [C,H,W]");
    return warp_impl(tape, image, {params}, mode, fill, in_bounds);
}

Tensor warp(Tape& tape, const Tensor& images, std::span<const GeometricParams> params, WarpMode mode,
            float fill, std::vector<std::uint8_t>* in_bounds) {
    if (images.rank() != 4) throw std::invalid_argument("warp: images must be [N,C,H,W]");
    return warp_impl(tape, images, {params.begin(), params.end()}, mode, fill, in_bounds);
}

EquivariantResult equivariant_forward(Tape& tape,
                                      const std::function<Tensor(Tape&, const Tensor&)>& net,
                                      const Tensor& x, const IntensityParams& phi,
                                      const GeometricParams& psi) {
    if (x.rank() != 2) throw std::invalid_argument("equivariant_forward: x must be [H,W]");
    const int h = x.dim(0), w = x.dim(1);

    auto x3 = Tensor::from_data({1, h, w}, {x.data().begin(), x.data().end()});
    auto warped = warp(tape, x3, psi, WarpMode::bilinear, 0.0f);
    auto warped_hw = Tensor::from_data({h, w}, {warped.data().begin(), warped.data().end()});
    auto photo = apply_intensity(warped_hw, phi);
    auto net_in = Tensor::from_data({1, 1, h, w}, {photo.data().begin(), photo.data().end()});

    auto logits4 = net(tape, net_in);
    if (logits4.rank() != 4 || logits4.dim(0) != 1 || logits4.dim(2) != h || logits4.dim(3) != w)
        throw std::invalid_argument("equivariant_forward: net must map [1,1,H,W] to [1,C,H,W]");
    const int c = logits4.dim(1);
    auto logits3 = reshape(tape, logits4, {c, h, w});

    EquivariantResult result;
    result.logits = warp(tape, logits3, inverted(psi), WarpMode::bilinear, 0.0f, &result.valid);
    return result;
}

} // namespace calibseg
