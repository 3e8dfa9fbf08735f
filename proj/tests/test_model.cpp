#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "calibseg/losses.hpp"
#include "calibseg/model.hpp"
#include "calibseg/rng.hpp"
#include "calibseg/tensor_io.hpp"
#include "oracles.hpp"

using namespace calibseg;

namespace {

// double-precision mirror of the production forward
oracle::T64 unet64(const WeightSet& ws, const oracle::T64& x, const UNetConfig& cfg) {
    using namespace oracle;
    auto conv = [&](const T64& in, const std::string& name, int pad) {
        return conv2d64(in, to64(ws.at(name + ".k")), to64(ws.at(name + ".b")), pad);
    };
    auto conv_relu2 = [&](T64 h, const std::string& prefix) {
        h = relu64(conv(h, prefix + ".conv1", 1));
        h = relu64(conv(h, prefix + ".conv2", 1));
        return h;
    };
    std::vector<T64> skips;
    T64 h = x;
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        h = conv_relu2(h, "enc" + std::to_string(l));
        skips.push_back(h);
        h = downsample2x64(h);
    }
    h = conv_relu2(h, "bott");
    for (int l = cfg.depth - 2; l >= 0; --l) {
        h = upsample2x64(h);
        h = concat_channels64(h, skips[l]);
        h = conv_relu2(h, "dec" + std::to_string(l));
    }
    return conv(h, "head", 0);
}

std::filesystem::path temp_file(const char* stem) {
    return std::filesystem::temp_directory_path() / stem;
}

} // namespace

TEST_CASE("unet forward shape contract") {
    UNetConfig cfg{1, 3, 2, 3};
    WeightSet ws = init_weights(cfg, 1);
    Rng rng(2);
    Tensor x = oracle::random_tensor({2, 1, 16, 16}, rng);
    Tape tape;
    Tensor y = unet_forward(tape, ws, x, cfg);
    REQUIRE(y.rank() == 4);
    CHECK(y.dim(0) == 2);
    CHECK(y.dim(1) == 3);
    CHECK(y.dim(2) == 16);
    CHECK(y.dim(3) == 16);

    Tensor bad = Tensor::zeros({1, 1, 18, 16});
    CHECK_THROWS_AS(unet_forward(tape, ws, bad, cfg), std::invalid_argument);
    Tensor two_ch = Tensor::zeros({1, 2, 16, 16});
    CHECK_THROWS_AS(unet_forward(tape, ws, two_ch, cfg), std::invalid_argument);
}

TEST_CASE("zero weights produce uniform predictions") {
    UNetConfig cfg{1, 4, 2, 3};
    WeightSet ws = init_weights(cfg, 1);
    for (auto& t : ws.tensors)
        for (auto& v : t.data()) v = 0.0f;
    Rng rng(3);
    Tensor x = oracle::random_tensor({1, 1, 8, 8}, rng);
    Tape tape;
    Tensor y = unet_forward(tape, ws, x, cfg);
    for (float v : y.data()) CHECK(v == 0.0f);
    Tensor p = softmax_channels(tape, y);
    for (float v : p.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("forward is deterministic") {
    UNetConfig cfg{1, 2, 2, 3};
    WeightSet ws = init_weights(cfg, 9);
    Rng rng(4);
    Tensor x = oracle::random_tensor({1, 1, 12, 12}, rng);
    Tape t1, t2;
    Tensor y1 = unet_forward(t1, ws, x, cfg);
    Tensor y2 = unet_forward(t2, ws, x, cfg);
    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("initialization is seeded and scaled") {
    UNetConfig cfg{1, 2, 4, 3};
    WeightSet a = init_weights(cfg, 42);
    WeightSet b = init_weights(cfg, 42);
    WeightSet c = init_weights(cfg, 43);
    REQUIRE(a.size() == b.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.names[i] == b.names[i]);
        for (std::size_t j = 0; j < a.tensors[i].numel(); ++j) {
            CHECK(a.tensors[i].data()[j] == b.tensors[i].data()[j]);
            if (a.tensors[i].data()[j] != c.tensors[i].data()[j]) any_diff = true;
        }
    }
    CHECK(any_diff);

    SUBCASE("per-layer spread stays near the target") {
        // uniform(-sqrt(6/fan), sqrt(6/fan)) has std sqrt(2/fan)
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a.names[i].ends_with(".b")) continue;
            const Tensor& k0 = a.tensors[i];
            const int fan = k0.dim(1) * k0.dim(2) * k0.dim(3);
            double ss = 0.0;
            std::size_t n = 0;
            for (std::uint64_t seed = 0; seed < 30; ++seed) {
                WeightSet w = init_weights(cfg, 1000 + seed);
                for (float v : w.tensors[i].data()) {
                    ss += static_cast<double>(v) * v;
                    ++n;
                }
            }
            const double target = std::sqrt(2.0 / fan);
            const double got = std::sqrt(ss / static_cast<double>(n));
            CHECK(got > 0.5 * target);
            CHECK(got < 2.0 * target);
        }
    }
}

TEST_CASE("parameter count formula matches enumeration") {
    for (UNetConfig cfg : {UNetConfig{1, 2, 16, 3}, UNetConfig{1, 3, 2, 3}, UNetConfig{1, 2, 4, 2}}) {
        WeightSet ws = init_weights(cfg, 7);
        std::size_t total = 0;
        for (const auto& t : ws.tensors) total += t.numel();
        CHECK(param_count(cfg) == total);
    }
    CHECK_THROWS_AS(param_count(UNetConfig{1, 1, 16, 3}), std::invalid_argument);
    CHECK_THROWS_AS(param_count(UNetConfig{1, 2, 16, 1}), std::invalid_argument);
}

TEST_CASE("full-model gradients agree with finite differences") {
    UNetConfig cfg{1, 2, 2, 3};
    WeightSet ws = init_weights(cfg, 31);
    Rng rng(32);
    Tensor x = oracle::random_tensor({1, 1, 16, 16}, rng);
    LabelMap lm = make_label_map(16, 16, 1);
    for (auto& v : lm.v) v = static_cast<std::uint8_t>(1 + rng.uniform_int(2));

    Tape tape;
    Tensor logits = unet_forward(tape, ws, x, cfg);
    Tensor flat = reshape(tape, logits, {2, 16, 16});
    auto loss = cross_entropy(tape, flat, lm);
    tape.backward(loss.scalar);

    auto fwd = [&] {
        oracle::T64 y = unet64(ws, oracle::to64(x), cfg);
        y.shape = {2, 16, 16};
        return oracle::cross_entropy64(y, lm);
    };
    Rng pick(33);
    int checked = 0;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        auto gc = oracle::fd_check_sampled(ws.tensors[i], ws.tensors[i].grad(), fwd, 32, pick, 3e-4);
        INFO("param ", ws.names[i], " worst rel ", gc.max_rel, ", skipped ", gc.skipped);
        CHECK(gc.max_rel < 1e-2);
        CHECK(gc.checked >= std::min<int>(4, static_cast<int>(ws.tensors[i].numel())) - 2);
        CHECK(gc.checked >= 1);
        checked += gc.checked;
    }
    CHECK(checked > 250);
}

TEST_CASE("ema tracking") {
    UNetConfig cfg{1, 2, 2, 2};
    WeightSet live = init_weights(cfg, 5);

    SUBCASE("first update copies") {
        EmaState ema;
        ema.decay = 0.999;
        ema_update(ema, live);
        REQUIRE(ema.shadow.size() == live.size());
        for (std::size_t i = 0; i < live.size(); ++i)
            for (std::size_t j = 0; j < live.tensors[i].numel(); ++j)
                CHECK(ema.shadow.tensors[i].data()[j] == live.tensors[i].data()[j]);
        CHECK(ema.updates == 1);
    }
    SUBCASE("decay zero tracks live exactly") {
        EmaState ema;
        ema.decay = 0.0;
        ema_update(ema, live);
        for (auto& t : live.tensors)
            for (auto& v : t.data()) v += 1.0f;
        ema_update(ema, live);
        for (std::size_t i = 0; i < live.size(); ++i)
            for (std::size_t j = 0; j < live.tensors[i].numel(); ++j)
                CHECK(ema.shadow.tensors[i].data()[j] == live.tensors[i].data()[j]);
    }
    SUBCASE("constant weights are a fixed point") {
        EmaState ema;
        ema.decay = 0.9;
        for (int k = 0; k < 4; ++k) ema_update(ema, live);
        for (std::size_t i = 0; i < live.size(); ++i)
            for (std::size_t j = 0; j < live.tensors[i].numel(); ++j)
                CHECK(ema.shadow.tensors[i].data()[j] ==
                      doctest::Approx(live.tensors[i].data()[j]).epsilon(1e-6));
    }
    SUBCASE("half decay on a step sequence") {
        WeightSet zeros = clone_weights(live);
        for (auto& t : zeros.tensors)
            for (auto& v : t.data()) v = 0.0f;
        WeightSet ones = clone_weights(live);
        for (auto& t : ones.tensors)
            for (auto& v : t.data()) v = 1.0f;
        EmaState ema;
        ema.decay = 0.5;
        ema_update(ema, zeros);
        CHECK(ema.shadow.tensors[0].data()[0] == 0.0f);
        ema_update(ema, ones);
        CHECK(ema.shadow.tensors[0].data()[0] == 0.5f);
    }
    SUBCASE("geometric convergence toward constant weights") {
        EmaState ema;
        ema.decay = 0.5;
        WeightSet target = clone_weights(live);
        WeightSet far = clone_weights(live);
        for (auto& t : far.tensors)
            for (auto& v : t.data()) v += 8.0f;
        ema_update(ema, far);
        double prev = 8.0;
        for (int k = 0; k < 5; ++k) {
            ema_update(ema, target);
            const double gap =
                std::abs(ema.shadow.tensors[0].data()[0] - target.tensors[0].data()[0]);
            CHECK(gap == doctest::Approx(prev * 0.5).epsilon(1e-5));
            prev = gap;
        }
    }
    SUBCASE("shape mismatch is rejected") {
        EmaState ema;
        ema_update(ema, live);
        WeightSet other = init_weights(UNetConfig{1, 2, 3, 2}, 5);
        CHECK_THROWS_AS(ema_update(ema, other), std::invalid_argument);
    }
}

TEST_CASE("checkpoint round trip") {
    UNetConfig cfg{1, 3, 2, 3};
    WeightSet ws = init_weights(cfg, 77);
    const auto path = temp_file("calibseg_ckpt_test.ckpt");
    save_checkpoint(ws, path);

    WeightSet back = load_checkpoint(path);
    REQUIRE(back.size() == ws.size());
    for (std::size_t i = 0; i < ws.size(); ++i) {
        CHECK(back.names[i] == ws.names[i]);
        REQUIRE(back.tensors[i].shape_equals(ws.tensors[i].shape()));
        for (std::size_t j = 0; j < ws.tensors[i].numel(); ++j)
            CHECK(back.tensors[i].data()[j] == ws.tensors[i].data()[j]);
    }

    SUBCASE("load into an existing set preserves grad plumbing") {
        WeightSet fresh = init_weights(cfg, 78);
        load_checkpoint_into(fresh, path);
        CHECK(fresh.tensors[0].requires_grad());
        for (std::size_t j = 0; j < ws.tensors[0].numel(); ++j)
            CHECK(fresh.tensors[0].data()[j] == ws.tensors[0].data()[j]);
    }
    SUBCASE("mismatched shapes refuse to load") {
        WeightSet other = init_weights(UNetConfig{1, 3, 4, 3}, 1);
        CHECK_THROWS_AS(load_checkpoint_into(other, path), IoError);
    }
    SUBCASE("truncation and corruption are detected") {
        std::error_code ec;
        const auto sz = std::filesystem::file_size(path, ec);
        REQUIRE(!ec);
        const auto cut = temp_file("calibseg_ckpt_cut.ckpt");
        {
            std::ifstream in(path, std::ios::binary);
            std::vector<char> buf(static_cast<std::size_t>(sz) / 2);
            in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            std::ofstream out(cut, std::ios::binary);
            out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        }
        CHECK_THROWS_AS(load_checkpoint(cut), IoError);

        const auto bad = temp_file("calibseg_ckpt_bad.ckpt");
        {
            std::ofstream out(bad, std::ios::binary);
            out.write("NOTved01", 8);
        }
        CHECK_THROWS_AS(load_checkpoint(bad), IoError);
        CHECK_THROWS_AS(load_checkpoint(temp_file("calibseg_missing.ckpt")), IoError);
        std::filesystem::remove(cut);
        std::filesystem::remove(bad);
    }
    std::filesystem::remove(path);
}

TEST_CASE("infer_config recovers the architecture from a weight set") {
    for (UNetConfig cfg : {UNetConfig{1, 2, 16, 3}, UNetConfig{1, 3, 2, 3}, UNetConfig{1, 2, 4, 2},
                           UNetConfig{2, 4, 8, 4}}) {
        WeightSet ws = init_weights(cfg, 3);
        UNetConfig got = infer_config(ws);
        CHECK(got.in_channels == cfg.in_channels);
        CHECK(got.num_classes == cfg.num_classes);
        CHECK(got.base_width == cfg.base_width);
        CHECK(got.depth == cfg.depth);
    }

    SUBCASE("tampered sets are rejected") {
        WeightSet ws = init_weights(UNetConfig{1, 2, 4, 2}, 3);
        ws.names.pop_back();
        ws.tensors.pop_back();
        CHECK_THROWS_AS(infer_config(ws), std::invalid_argument);

        WeightSet renamed = init_weights(UNetConfig{1, 2, 4, 2}, 3);
        renamed.names[0] = "stem.conv1.k";
        CHECK_THROWS_AS(infer_config(renamed), std::invalid_argument);

        CHECK_THROWS_AS(infer_config(WeightSet{}), std::invalid_argument);
    }
}
