#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "calibseg/synthdata.hpp"
#include "calibseg/trainer.hpp"

using namespace calibseg;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const char* stem)
        : path(std::filesystem::temp_directory_path() / stem) {
        std::filesystem::remove_all(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// One crisp, easy dataset shared by the training cases: 32x32, one
// foreground class, no blur, no noise, no annotator jitter.
const std::filesystem::path& shared_dataset() {
    static TempDir dir("calibseg_trainer_data");
    static bool made = false;
    if (!made) {
        SceneSpec spec;
        spec.height = spec.width = 32;
        spec.num_fg_classes = 1;
        spec.contrasts = {0.15, 0.85};
        spec.blur_sigma_min = spec.blur_sigma_max = 0.0;
        spec.noise_sigma_min = spec.noise_sigma_max = 0.0;
        spec.jitter_px = 0.0;
        make_dataset(dir.path, 77, {8, 2, 4}, spec);
        made = true;
    }
    return dir.path;
}

TrainConfig tiny_config(Method m) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.dataset_dir = shared_dataset();
    cfg.unet = {1, 2, 2, 2};
    cfg.batch_size = 4;
    cfg.iterations = 4;
    cfg.val_interval = 2;
    cfg.seed = 5;
    return cfg;
}

bool same_weights(const WeightSet& a, const WeightSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.names[i] != b.names[i]) return false;
        const auto av = a.tensors[i].data();
        const auto bv = b.tensors[i].data();
        if (!std::equal(av.begin(), av.end(), bv.begin(), bv.end())) return false;
    }
    return true;
}

} // namespace

TEST_CASE("method names round trip and reject junk") {
    for (Method m : {Method::baseline, Method::da, Method::cr, Method::bwcr, Method::svls,
                     Method::mls})
        CHECK(method_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(method_from_string("crr"), std::invalid_argument);
    CHECK_THROWS_AS(method_from_string(""), std::invalid_argument);
}

TEST_CASE("lr schedule is the exact linear ramp") {
    TrainConfig cfg;
    cfg.iterations = 101;
    cfg.lr_start = 1e-4;
    cfg.lr_end = 1e-7;

    CHECK(lr_schedule(0, cfg) == 1e-4);
    CHECK(std::abs(lr_schedule(100, cfg) - 1e-7) < 1e-12);
    CHECK(lr_schedule(37, cfg) == 1e-4 + (1e-7 - 1e-4) * (37.0 / 100.0));
    CHECK_THROWS_AS(lr_schedule(-1, cfg), std::invalid_argument);
    CHECK_THROWS_AS(lr_schedule(101, cfg), std::invalid_argument);

    cfg.iterations = 1;
    CHECK(lr_schedule(0, cfg) == 1e-4);
}

TEST_CASE("adam matches a scalar reference for 100 steps") {
    WeightSet ws;
    ws.add("w", Tensor::from_data({1}, {5.0f}, true));
    AdamState st = make_adam_state(ws);

    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 1e-2;
    float w = 5.0f;
    double m = 0.0, v = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const float g = w - 3.0f;
        ws.tensors[0].zero_grad();
        ws.tensors[0].grad()[0] = g;
        REQUIRE(adam_step(ws, st, lr));

        const double gj = g;
        m = b1 * m + (1.0 - b1) * gj;
        v = b2 * v + (1.0 - b2) * gj * gj;
        const double mh = m / (1.0 - std::pow(b1, static_cast<double>(k)));
        const double vh = v / (1.0 - std::pow(b2, static_cast<double>(k)));
        w = static_cast<float>(static_cast<double>(w) - lr * mh / (std::sqrt(vh) + eps));
        CHECK(ws.tensors[0].data()[0] == w);
    }
    CHECK(st.step == 100);
    // converged near the minimum of 0.5*(w-3)^2
    CHECK(std::abs(w - 3.0f) < 2.0f);
}

TEST_CASE("adam first step moves by about lr and zero grads change nothing") {
    WeightSet ws;
    ws.add("w", Tensor::from_data({2}, {1.0f, -2.0f}, true));
    AdamState st = make_adam_state(ws);

    ws.tensors[0].grad()[0] = 0.37f;
    ws.tensors[0].grad()[1] = -41.0f;
    REQUIRE(adam_step(ws, st, 1e-3));
    CHECK(std::abs(1.0 - static_cast<double>(ws.tensors[0].data()[0])) ==
          doctest::Approx(1e-3).epsilon(1e-3));
    CHECK(std::abs(-2.0 - static_cast<double>(ws.tensors[0].data()[1])) ==
          doctest::Approx(1e-3).epsilon(1e-3));

    WeightSet ws2;
    ws2.add("w", Tensor::from_data({2}, {1.0f, -2.0f}, true));
    AdamState st2 = make_adam_state(ws2);
    REQUIRE(adam_step(ws2, st2, 1e-3));
    CHECK(ws2.tensors[0].data()[0] == 1.0f);
    CHECK(ws2.tensors[0].data()[1] == -2.0f);
    CHECK(st2.step == 1);
}

TEST_CASE("non-finite gradients leave adam untouched") {
    WeightSet ws;
    ws.add("w", Tensor::from_data({2}, {1.0f, 2.0f}, true));
    AdamState st = make_adam_state(ws);

    ws.tensors[0].grad()[0] = 1.0f;
    ws.tensors[0].grad()[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(adam_step(ws, st, 1e-3));
    CHECK(ws.tensors[0].data()[0] == 1.0f);
    CHECK(ws.tensors[0].data()[1] == 2.0f);
    CHECK(st.step == 0);
    CHECK(st.m[0][0] == 0.0);

    ws.tensors[0].grad()[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(adam_step(ws, st, 1e-3));
    CHECK(st.step == 0);

    WeightSet other;
    other.add("a", Tensor::from_data({1}, {0.0f}, true));
    other.add("b", Tensor::from_data({1}, {0.0f}, true));
    CHECK_THROWS_AS(adam_step(other, st, 1e-3), std::invalid_argument);
}

TEST_CASE("config validation rejects bad fields") {
    TrainConfig cfg = tiny_config(Method::da);
    CHECK_NOTHROW(validate(cfg));

    TrainConfig bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = cfg;
    bad.lr_end = 0.0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = cfg;
    bad.ema_decay = 1.0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = cfg;
    bad.lambda = -0.1;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = cfg;
    bad.lambda_params.radius = 0.0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = cfg;
    bad.svls_sigma = 0.0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
}

TEST_CASE("training is deterministic and logs what it promises") {
    const TrainConfig cfg = tiny_config(Method::da);
    TrainResult r1 = train(cfg);
    TrainResult r2 = train(cfg);

    REQUIRE(r1.log.iters.size() == 4);
    REQUIRE(r1.log.vals.size() == 2);
    CHECK(r1.log.vals[0].iter == 1);
    CHECK(r1.log.vals[1].iter == 3);
    CHECK_FALSE(r1.log.diverged);
    CHECK(r1.log.skipped_updates == 0);

    for (std::size_t i = 0; i < r1.log.iters.size(); ++i) {
        const auto& a = r1.log.iters[i];
        const auto& b = r2.log.iters[i];
        CHECK(a.ls == b.ls);
        CHECK(a.lc == b.lc);
        CHECK(a.total == b.total);
        CHECK(a.lr == lr_schedule(static_cast<int>(i), cfg));
        CHECK(a.total == a.ls + a.lc);
    }
    for (std::size_t i = 0; i < r1.log.vals.size(); ++i) {
        CHECK(r1.log.vals[i].dice == r2.log.vals[i].dice);
        CHECK(r1.log.vals[i].ece == r2.log.vals[i].ece);
    }
    CHECK(same_weights(r1.weights, r2.weights));

    double best = -1.0;
    int best_iter = -1;
    for (const ValRow& v : r1.log.vals)
        if (v.dice > best) {
            best = v.dice;
            best_iter = v.iter;
        }
    CHECK(r1.log.best_dice == best);
    CHECK(r1.log.best_iter == best_iter);
}

TEST_CASE("cr with lambda zero reproduces da exactly") {
    TrainConfig da = tiny_config(Method::da);
    TrainConfig cr0 = tiny_config(Method::cr);
    cr0.lambda = 0.0;

    TrainResult ra = train(da);
    TrainResult rb = train(cr0);
    REQUIRE(ra.log.iters.size() == rb.log.iters.size());
    for (std::size_t i = 0; i < ra.log.iters.size(); ++i) {
        CHECK(ra.log.iters[i].ls == rb.log.iters[i].ls);
        CHECK(ra.log.iters[i].lc == rb.log.iters[i].lc);
        CHECK(ra.log.iters[i].total == rb.log.iters[i].total);
    }
    CHECK(same_weights(ra.weights, rb.weights));
}

TEST_CASE("bwcr with a constant map reproduces cr closely") {
    TrainConfig cr = tiny_config(Method::cr);
    cr.lambda = 0.7;
    TrainConfig bw = tiny_config(Method::bwcr);
    bw.lambda = 0.7;
    bw.bwcr_const_lambda = true;

    TrainResult ra = train(cr);
    TrainResult rb = train(bw);
    REQUIRE(ra.log.iters.size() == rb.log.iters.size());
    for (std::size_t i = 0; i < ra.log.iters.size(); ++i) {
        CHECK(ra.log.iters[i].total ==
              doctest::Approx(rb.log.iters[i].total).epsilon(1e-5));
        CHECK(ra.log.iters[i].lc == doctest::Approx(rb.log.iters[i].lc).epsilon(1e-5));
    }
}

TEST_CASE("svls with a collapsed kernel reproduces da exactly") {
    TrainConfig da = tiny_config(Method::da);
    TrainConfig sv = tiny_config(Method::svls);
    sv.svls_sigma = 1e-6;

    TrainResult ra = train(da);
    TrainResult rb = train(sv);
    REQUIRE(ra.log.iters.size() == rb.log.iters.size());
    for (std::size_t i = 0; i < ra.log.iters.size(); ++i)
        CHECK(ra.log.iters[i].total == rb.log.iters[i].total);
    CHECK(same_weights(ra.weights, rb.weights));
}

TEST_CASE("all methods run and stay finite on the tiny dataset") {
    for (Method m : {Method::baseline, Method::cr, Method::bwcr, Method::svls, Method::mls}) {
        TrainConfig cfg = tiny_config(m);
        cfg.iterations = 2;
        cfg.val_interval = 2;
        TrainResult r = train(cfg);
        CHECK_FALSE(r.log.diverged);
        REQUIRE(r.log.iters.size() == 2);
        for (const auto& row : r.log.iters) {
            CHECK(std::isfinite(row.total));
            CHECK(row.total == doctest::Approx(row.ls + row.lc).epsilon(1e-6));
        }
        // consistency between fresh branches is positive; the margin hinge
        // stays inactive while logits are still tiny
        if (m == Method::cr || m == Method::bwcr) CHECK(r.log.iters[0].lc != 0.0);
        if (m == Method::mls) CHECK(r.log.iters[0].lc == 0.0);
    }
}

TEST_CASE("an absurd learning rate is caught as divergence") {
    TrainConfig cfg = tiny_config(Method::da);
    cfg.iterations = 8;
    cfg.lr_start = cfg.lr_end = 1e30;
    TrainResult r = train(cfg);
    CHECK(r.log.diverged);
    CHECK(r.log.iters.size() < 8);
    CHECK(r.weights.size() > 0); // still hands back a usable snapshot
}

TEST_CASE("da drives supervised loss under 0.1 within 300 iterations on easy data") {
    TrainConfig cfg = tiny_config(Method::da);
    cfg.unet = {1, 2, 4, 2};
    cfg.batch_size = 8;
    cfg.iterations = 300;
    cfg.val_interval = 100;
    cfg.seed = 3;
    // Adam moves weights by about lr per step, so a 300-step budget needs a
    // hotter ramp than the long-run default, and an EMA horizon shorter than
    // the run (0.999 would still weight the init ~74% after 300 updates)
    cfg.lr_start = 3e-3;
    cfg.lr_end = 3e-4;
    cfg.ema_decay = 0.9;

    TrainResult r = train(cfg);
    REQUIRE_FALSE(r.log.diverged);
    double min_ls = 1e30;
    for (const auto& row : r.log.iters) min_ls = std::min(min_ls, row.ls);
    CHECK(min_ls < 0.1);
    CHECK(r.log.best_dice > 0.9);
}

TEST_CASE("train rejects a network that disagrees with the dataset") {
    TrainConfig cfg = tiny_config(Method::da);
    cfg.unet.num_classes = 3;
    CHECK_THROWS_AS(train(cfg), std::invalid_argument);

    TrainConfig missing = tiny_config(Method::da);
    missing.dataset_dir = "/nonexistent/calibseg";
    CHECK_THROWS(train(missing));
}

TEST_CASE("evaluation is deterministic and skips test-time transforms") {
    TrainConfig cfg = tiny_config(Method::da);
    cfg.iterations = 2;
    TrainResult r = train(cfg);

    MetricsReport m1 = evaluate(r.weights, cfg.unet, cfg.dataset_dir, "test");
    MetricsReport m2 = evaluate(r.weights, cfg.unet, cfg.dataset_dir, "test");
    REQUIRE(m1.rows.size() == 4);
    REQUIRE(m2.rows.size() == 4);
    for (std::size_t i = 0; i < m1.rows.size(); ++i) {
        CHECK(m1.rows[i].ece == m2.rows[i].ece);
        CHECK(m1.rows[i].dice_mean == m2.rows[i].dice_mean);
        CHECK(m1.rows[i].tace == m2.rows[i].tace);
    }
    CHECK(m1.num_classes == 2);
    CHECK_THROWS_AS(evaluate(r.weights, cfg.unet, cfg.dataset_dir, "bogus"),
                    std::invalid_argument);
}

TEST_CASE("zero weights give uniform probabilities and a hand-computable ece") {
    const UNetConfig unet{1, 2, 2, 2};
    WeightSet zw = init_weights(unet, 1);
    for (Tensor& t : zw.tensors) {
        std::fill(t.data().begin(), t.data().end(), 0.0f);
        t.set_requires_grad(false);
    }

    MetricsReport rep = evaluate(zw, unet, shared_dataset(), "test");
    REQUIRE(rep.rows.size() == 4);
    for (int i = 0; i < 4; ++i) {
        const Sample s = load_sample(shared_dataset(), "test", i);
        std::size_t ones = 0;
        for (std::uint8_t v : s.hard_label.v) ones += v == 1;
        const double frac1 = static_cast<double>(ones) / s.hard_label.v.size();
        // uniform probs: confidence 1/2 everywhere, prediction is class 1
        CHECK(rep.rows[i].ece == doctest::Approx(std::abs(frac1 - 0.5)).epsilon(1e-6));
    }
}

TEST_CASE("the stored soft labels are a perfect predictor on jitter-free data") {
    MetricsReport rep = evaluate_soft_oracle(shared_dataset(), "test");
    REQUIRE(rep.rows.size() == 4);
    for (const ImageMetrics& r : rep.rows) {
        CHECK(r.dice_mean == 1.0);
        CHECK(r.ece == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("train log csv output matches the documented format") {
    TrainLog log;
    log.iters.push_back({0, 0.5, 0.25, 0.75, 0.125});
    log.iters.push_back({1, 0.5, 0.0, 0.5, 0.0625});
    log.vals.push_back({1, 0.875, 0.0625});

    TempDir dir("calibseg_trainlog");
    write_train_log(log, dir.path);
    CHECK(slurp(dir.path / "train_log.csv") ==
          "iter,ls,lc,total,lr\n0,0.5,0.25,0.75,0.125\n1,0.5,0,0.5,0.0625\n");
    CHECK(slurp(dir.path / "val_log.csv") == "iter,val_dice,val_ece\n1,0.875,0.0625\n");
}

TEST_CASE("metrics csv round trips exactly") {
    MetricsReport rep;
    rep.num_classes = 3;
    for (int i = 0; i < 3; ++i) {
        ImageMetrics r;
        r.ece = 0.01 * (i + 1) + 1.0 / 3.0;
        r.tace = 0.003 * (i + 1);
        r.tace_empty = i == 2;
        r.dice_per_class = {0.9 - 0.1 * i, 0.8 + 0.05 * i};
        r.dice_mean = (r.dice_per_class[0] + r.dice_per_class[1]) / 2.0;
        rep.rows.push_back(r);
    }
    finalize_report(rep);

    TempDir dir("calibseg_metricscsv");
    const auto path = dir.path / "metrics.csv";
    write_metrics_csv(rep, path);
    MetricsReport back = read_metrics_csv(path);

    REQUIRE(back.rows.size() == rep.rows.size());
    CHECK(back.num_classes == 3);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        CHECK(back.rows[i].ece == rep.rows[i].ece);
        CHECK(back.rows[i].tace == rep.rows[i].tace);
        CHECK(back.rows[i].tace_empty == rep.rows[i].tace_empty);
        CHECK(back.rows[i].dice_mean == rep.rows[i].dice_mean);
        REQUIRE(back.rows[i].dice_per_class.size() == 2);
        CHECK(back.rows[i].dice_per_class[0] == rep.rows[i].dice_per_class[0]);
        CHECK(back.rows[i].dice_per_class[1] == rep.rows[i].dice_per_class[1]);
    }
    CHECK(back.dice_agg.mean == rep.dice_agg.mean);
    CHECK(back.ece_agg.mean == rep.ece_agg.mean);

    CHECK_THROWS(read_metrics_csv(dir.path / "missing.csv"));
}
