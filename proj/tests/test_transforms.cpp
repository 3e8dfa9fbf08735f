#include "doctest.h"

#include <cmath>

#include "calibseg/rng.hpp"
#include "calibseg/transforms.hpp"
#include "oracles.hpp"

using namespace calibseg;

TEST_CASE("affine construction, inverse, and the 90 degree map") {
    auto p = make_affine(90.0, 1.0, 0.0, 0.0);
    auto m = apply_affine(p.fwd, 2.0, 3.0);
    CHECK(m[0] == doctest::Approx(-3.0).epsilon(1e-9));
    CHECK(m[1] == doctest::Approx(2.0).epsilon(1e-9));

    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        auto rng = Rng::keyed(seed, 400);
        auto q = make_affine(rng.uniform(-180, 180), rng.uniform(0.5, 2.0), rng.uniform(-20, 20),
                             rng.uniform(-20, 20));
        const double x = rng.uniform(-30, 30), y = rng.uniform(-30, 30);
        const auto fwd = apply_affine(q.fwd, x, y);
        const auto back = apply_affine(q.inv, fwd[0], fwd[1]);
        CHECK(std::abs(back[0] - x) < 1e-9);
        CHECK(std::abs(back[1] - y) < 1e-9);
    }
    CHECK_THROWS_AS(make_affine(0.0, 0.0, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("sampling with zero probabilities yields identity parameters") {
    TransformRanges r;
    r.p_gamma = r.p_affine = r.p_blur = r.p_sharpen = r.p_noise = r.p_geometric = 0.0;
    auto rng = Rng::keyed(1, 401);
    auto ip = sample_intensity(rng, r);
    CHECK(ip.gamma == 1.0);
    CHECK(ip.scale == 1.0);
    CHECK(ip.shift == 0.0);
    CHECK(ip.blur_sigma == 0.0);
    CHECK(ip.sharpen_amount == 0.0);
    CHECK(ip.noise_sigma == 0.0);
    CHECK_FALSE(ip.apply_gamma);
    auto gp = sample_geometric(rng, r);
    CHECK(gp.identity);
    CHECK(gp.fwd == std::array<double, 6>{1, 0, 0, 0, 1, 0});
}

TEST_CASE("sampling with certain gates and degenerate ranges is deterministic") {
    TransformRanges r;
    r.p_gamma = r.p_affine = r.p_blur = r.p_sharpen = r.p_noise = r.p_geometric = 1.0;
    r.gamma_min = r.gamma_max = 1.7;
    r.scale_min = r.scale_max = 0.9;
    r.shift_min = r.shift_max = 0.05;
    r.blur_sigma_min = r.blur_sigma_max = 0.8;
    r.sharpen_min = r.sharpen_max = 0.3;
    r.noise_sigma_min = r.noise_sigma_max = 0.02;
    r.rot_deg_min = r.rot_deg_max = 10.0;
    r.geo_scale_min = r.geo_scale_max = 1.05;
    r.trans_frac_min = r.trans_frac_max = 0.1;
    r.image_side = 50;
    auto rng = Rng::keyed(2, 402);
    auto ip = sample_intensity(rng, r);
    CHECK(ip.gamma == 1.7);
    CHECK(ip.scale == 0.9);
    CHECK(ip.shift == 0.05);
    CHECK(ip.blur_sigma == 0.8);
    CHECK(ip.sharpen_amount == 0.3);
    CHECK(ip.noise_sigma == 0.02);
    CHECK(ip.apply_gamma);
    CHECK(ip.apply_noise);
    auto gp = sample_geometric(rng, r);
    CHECK_FALSE(gp.identity);
    auto expect = make_affine(10.0, 1.05, 5.0, 5.0);
    for (int i = 0; i < 6; ++i) CHECK(gp.fwd[static_cast<std::size_t>(i)] == expect.fwd[static_cast<std::size_t>(i)]);
}

TEST_CASE("gate outcomes never change stream consumption") {
    TransformRanges never, always;
    never.p_gamma = never.p_affine = never.p_blur = never.p_sharpen = never.p_noise =
        never.p_geometric = 0.0;
    always.p_gamma = always.p_affine = always.p_blur = always.p_sharpen = always.p_noise =
        always.p_geometric = 1.0;
    auto r1 = Rng::keyed(7, 403);
    auto r2 = Rng::keyed(7, 403);
    (void)sample_intensity(r1, never);
    (void)sample_geometric(r1, never);
    (void)sample_intensity(r2, always);
    (void)sample_geometric(r2, always);
    CHECK(r1.next_u64() == r2.next_u64());
}

TEST_CASE("gate rates concentrate near one half") {
    TransformRanges r;
    auto rng = Rng::keyed(11, 404);
    int counts[6] = {0, 0, 0, 0, 0, 0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto ip = sample_intensity(rng, r);
        counts[0] += ip.apply_gamma;
        counts[1] += ip.apply_affine;
        counts[2] += ip.apply_blur;
        counts[3] += ip.apply_sharpen;
        counts[4] += ip.apply_noise;
        counts[5] += sample_geometric(rng, r).identity ? 0 : 1;
    }
    for (int rate : counts) {
        CHECK(rate >= static_cast<int>(0.48 * n));
        CHECK(rate <= static_cast<int>(0.52 * n));
    }
}

TEST_CASE("identity intensity parameters leave the image bit-exact") {
    auto rng = Rng::keyed(3, 405);
    auto img = Tensor::zeros({9, 7});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    auto out = apply_intensity(img, IntensityParams{});
    for (std::size_t i = 0; i < img.data().size(); ++i) CHECK(out.data()[i] == img.data()[i]);
}

TEST_CASE("gamma squares a constant half image") {
    auto img = Tensor::full({4, 4}, 0.5f);
    IntensityParams p;
    p.apply_gamma = true;
    p.gamma = 2.0;
    auto out = apply_intensity(img, p);
    for (float v : out.data()) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("blurring an impulse reproduces the truncated Gaussian kernel") {
    const int n = 15, ctr = 7;
    auto img = Tensor::zeros({n, n});
    img.data()[static_cast<std::size_t>(ctr) * n + ctr] = 1.0f;
    IntensityParams p;
    p.apply_blur = true;
    p.blur_sigma = 1.0;
    auto out = apply_intensity(img, p);

    const double sigma = 1.0;
    const int radius = 3;
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            const double expect =
                std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma)) / (norm * norm);
            CHECK(std::abs(out.data()[static_cast<std::size_t>(ctr + dy) * n + (ctr + dx)] - expect) < 1e-6);
        }
    // outside the truncation radius, and its own mass sums to one
    CHECK(out.data()[static_cast<std::size_t>(ctr + radius + 1) * n + ctr] == 0.0f);
    double total = 0.0;
    for (float v : out.data()) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("noise stage is reproducible from its seed") {
    auto img = Tensor::full({6, 6}, 0.5f);
    IntensityParams p;
    p.apply_noise = true;
    p.noise_sigma = 0.05;
    p.noise_seed = 12345;
    auto a = apply_intensity(img, p);
    auto b = apply_intensity(img, p);
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
    p.noise_seed = 54321;
    auto c = apply_intensity(img, p);
    int diffs = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) diffs += a.data()[i] != c.data()[i];
    CHECK(diffs > 0);
}

TEST_CASE("deterministic pipeline stages preserve pixelwise order") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto rng = Rng::keyed(seed, 406);
        auto x = Tensor::zeros({8, 8});
        auto y = Tensor::zeros({8, 8});
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            const float lo = static_cast<float>(rng.uniform());
            x.data()[i] = lo;
            y.data()[i] = lo + static_cast<float>(rng.uniform()) * (1.0f - lo);
        }
        IntensityParams p;
        p.apply_gamma = true;
        p.gamma = rng.uniform(0.5, 2.0);
        p.apply_affine = true;
        p.scale = rng.uniform(0.8, 1.2);
        p.shift = rng.uniform(-0.1, 0.1);
        p.apply_blur = true;
        p.blur_sigma = rng.uniform(0.25, 1.5);
        auto ox = apply_intensity(x, p);
        auto oy = apply_intensity(y, p);
        for (std::size_t i = 0; i < ox.data().size(); ++i)
            CHECK(ox.data()[i] <= oy.data()[i] + 1e-6f);
    }
}

TEST_CASE("identity warp copies the image and marks everything valid") {
    auto rng = Rng::keyed(4, 407);
    auto img = oracle::random_tensor({2, 5, 5}, rng);
    Tape tape;
    std::vector<std::uint8_t> mask;
    auto out = warp(tape, img, GeometricParams{}, WarpMode::bilinear, -1.0f, &mask);
    for (std::size_t i = 0; i < img.data().size(); ++i) CHECK(out.data()[i] == img.data()[i]);
    for (auto m : mask) CHECK(m == 1);
}

TEST_CASE("integer translation in nearest mode shifts pixels exactly") {
    const int h = 4, w = 6;
    auto img = Tensor::zeros({1, h, w});
    for (int i = 0; i < h * w; ++i) img.data()[static_cast<std::size_t>(i)] = static_cast<float>(i);
    Tape tape;
    std::vector<std::uint8_t> mask;
    auto out = warp(tape, img, make_affine(0.0, 1.0, 3.0, 0.0), WarpMode::nearest, -7.0f, &mask);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (x >= 3) {
                CHECK(out.data()[i] == img.data()[i - 3]);
                CHECK(mask[i] == 1);
            } else {
                CHECK(out.data()[i] == -7.0f);
                CHECK(mask[i] == 0);
            }
        }
}

TEST_CASE("quarter-turn rotation matches the index permutation") {
    auto rng = Rng::keyed(6, 408);
    auto img = oracle::random_tensor({1, 4, 4}, rng);
    Tape tape;
    auto out = warp(tape, img, make_affine(90.0, 1.0, 0.0, 0.0), WarpMode::nearest, 0.0f);
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox)
            CHECK(out.data()[static_cast<std::size_t>(oy) * 4 + ox] ==
                  img.data()[static_cast<std::size_t>(3 - ox) * 4 + oy]);
}

TEST_CASE("nearest round trips restore surviving pixels exactly") {
    auto rng = Rng::keyed(9, 409);
    auto img = oracle::random_tensor({1, 8, 8}, rng);
    for (auto p : {make_affine(0.0, 1.0, 2.0, -3.0), make_affine(90.0, 1.0, 0.0, 0.0),
                   make_affine(180.0, 1.0, 1.0, 0.0)}) {
        Tape tape;
        std::vector<std::uint8_t> m1, m2;
        auto fwd = warp(tape, img, p, WarpMode::nearest, 0.5f, &m1);
        auto back = warp(tape, fwd, inverted(p), WarpMode::nearest, 0.5f, &m2);
        // carry the first-pass validity through the inverse warp
        auto m1img = Tensor::zeros({1, 8, 8});
        for (std::size_t i = 0; i < m1.size(); ++i) m1img.data()[i] = static_cast<float>(m1[i]);
        auto m1back = warp(tape, m1img, inverted(p), WarpMode::nearest, 0.0f);
        int survivors = 0;
        for (std::size_t i = 0; i < img.data().size(); ++i)
            if (m2[i] && m1back.data()[i] == 1.0f) {
                CHECK(back.data()[i] == img.data()[i]);
                ++survivors;
            }
        CHECK(survivors > 0);
    }
}

TEST_CASE("bilinear warp gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto rng = Rng::keyed(seed, 410);
        auto img = oracle::random_tensor({2, 6, 6}, rng, 1.0f, true);
        auto p = make_affine(rng.uniform(-40, 40), rng.uniform(0.85, 1.15), rng.uniform(-2, 2),
                             rng.uniform(-2, 2));
        Tape tape;
        auto loss = sum_all(tape, warp(tape, img, p, WarpMode::bilinear, 0.0f));
        loss.set_requires_grad(true);
        tape.backward(loss);
        auto forward = [&]() { return oracle::sum64(oracle::warp_bilinear64(oracle::to64(img), p, 0.0)); };
        auto r = oracle::fd_check(img, img.grad(), forward);
        CHECK(r.max_rel < 1e-3);
    }
}

TEST_CASE("batched warp applies one transform per sample") {
    auto rng = Rng::keyed(13, 411);
    auto imgs = oracle::random_tensor({2, 1, 5, 5}, rng);
    std::vector<GeometricParams> ps = {GeometricParams{}, make_affine(0.0, 1.0, 1.0, 0.0)};
    Tape tape;
    std::vector<std::uint8_t> mask;
    auto out = warp(tape, imgs, ps, WarpMode::nearest, 0.0f, &mask);
    for (int i = 0; i < 25; ++i) CHECK(out.data()[static_cast<std::size_t>(i)] == imgs.data()[static_cast<std::size_t>(i)]);
    for (int y = 0; y < 5; ++y)
        for (int x = 1; x < 5; ++x)
            CHECK(out.data()[25 + static_cast<std::size_t>(y) * 5 + x] ==
                  imgs.data()[25 + static_cast<std::size_t>(y) * 5 + x - 1]);
    CHECK(mask[25] == 0); // first column of the translated sample
    CHECK(mask[26] == 1);
    CHECK_THROWS_AS(warp(tape, imgs, std::span<const GeometricParams>(ps.data(), 1),
                         WarpMode::nearest, 0.0f),
                    std::invalid_argument);
}

namespace {

std::function<Tensor(Tape&, const Tensor&)> conv_net(const Tensor& k, const Tensor& b) {
    return [k, b](Tape& t, const Tensor& x) { return conv2d(t, x, k, b, 1); };
}

} // namespace

TEST_CASE("equivariant forward with identity transforms equals the plain forward") {
    auto rng = Rng::keyed(15, 412);
    auto x = Tensor::zeros({8, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    auto k = oracle::random_tensor({3, 1, 3, 3}, rng, 0.5f, true);
    auto b = oracle::random_tensor({3}, rng, 0.1f, true);

    Tape t1;
    auto res = equivariant_forward(t1, conv_net(k, b), x, IntensityParams{}, GeometricParams{});
    Tape t2;
    auto plain = conv2d(t2, Tensor::from_data({1, 1, 8, 8}, {x.data().begin(), x.data().end()}), k, b, 1);
    REQUIRE(res.logits.shape() == Shape{3, 8, 8});
    for (std::size_t i = 0; i < res.logits.data().size(); ++i)
        CHECK(res.logits.data()[i] == plain.data()[i]);
    for (auto v : res.valid) CHECK(v == 1);
}

TEST_CASE("integer translation commutes with a conv net on the interior") {
    auto rng = Rng::keyed(16, 413);
    const int n = 16;
    auto x = Tensor::zeros({n, n});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    auto k = oracle::random_tensor({2, 1, 3, 3}, rng, 0.5f, true);
    auto b = oracle::random_tensor({2}, rng, 0.1f, true);
    const int tx = 3, ty = -2;

    Tape t1;
    auto psi = make_affine(0.0, 1.0, tx, ty);
    auto res = equivariant_forward(t1, conv_net(k, b), x, IntensityParams{}, psi);
    Tape t2;
    auto plain = conv2d(t2, Tensor::from_data({1, 1, n, n}, {x.data().begin(), x.data().end()}), k, b, 1);

    const int margin = 1 + 3; // conv halo plus the largest translation component
    for (int c = 0; c < 2; ++c)
        for (int y = margin; y < n - margin; ++y)
            for (int xx = margin; xx < n - margin; ++xx) {
                const std::size_t i = (static_cast<std::size_t>(c) * n + y) * n + xx;
                CHECK(std::abs(res.logits.data()[i] - plain.data()[i]) < 1e-5f);
            }
}

TEST_CASE("equivariant forward under random transforms keeps shape and finiteness") {
    auto rng = Rng::keyed(17, 414);
    auto x = Tensor::zeros({12, 12});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    auto k = oracle::random_tensor({4, 1, 3, 3}, rng, 0.5f, true);
    auto b = oracle::random_tensor({4}, rng, 0.1f, true);
    TransformRanges ranges;
    ranges.image_side = 12;
    for (int trial = 0; trial < 2; ++trial) {
        auto ip = sample_intensity(rng, ranges);
        auto gp = sample_geometric(rng, ranges);
        Tape tape;
        auto res = equivariant_forward(tape, conv_net(k, b), x, ip, gp);
        REQUIRE(res.logits.shape() == Shape{4, 12, 12});
        REQUIRE(res.valid.size() == 144);
        for (float v : res.logits.data()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("gradients flow through the equivariant composition") {
    auto rng = Rng::keyed(18, 415);
    auto x = Tensor::zeros({8, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
    auto k = oracle::random_tensor({2, 1, 3, 3}, rng, 0.5f, true);
    auto b = oracle::random_tensor({2}, rng, 0.1f, true);
    auto psi = make_affine(10.0, 1.05, 1.5, -0.5);
    IntensityParams phi;
    phi.apply_affine = true;
    phi.scale = 1.1;
    phi.shift = -0.02;

    Tape tape;
    auto res = equivariant_forward(tape, conv_net(k, b), x, phi, psi);
    auto loss = sum_all(tape, res.logits);
    loss.set_requires_grad(true);
    tape.backward(loss);

    auto forward = [&]() {
        Tape t2;
        auto r = equivariant_forward(t2, conv_net(k, b), x, phi, psi);
        double acc = 0.0;
        for (float v : r.logits.data()) acc += v;
        return acc;
    };
    auto rk = oracle::fd_check(k, k.grad(), forward, 1e-2, 1e-3);
    auto rb = oracle::fd_check(b, b.grad(), forward, 1e-2, 1e-3);
    CHECK(rk.max_rel < 1e-2);
    CHECK(rb.max_rel < 1e-2);
}
