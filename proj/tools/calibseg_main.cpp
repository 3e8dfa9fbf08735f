#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "calibseg/config.hpp"
#include "calibseg/distlambda.hpp"
#include "calibseg/losses.hpp"
#include "calibseg/metrics.hpp"
#include "calibseg/model.hpp"
#include "calibseg/pgm.hpp"
#include "calibseg/rng.hpp"
#include "calibseg/synthdata.hpp"
#include "calibseg/tensor_io.hpp"
#include "calibseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace calibseg;

namespace {

constexpr const char* kVersion = "0.1.0";

// bad invocations exit 1, runtime failures exit 2
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

void print_resolved(const std::string& sub, const Config& cfg, std::uint64_t seed) {
    std::cout << "calibseg " << sub << " " << kVersion << "\n";
    std::cout << "seed: " << seed << "\n";
    std::cout << "config:\n";
    std::istringstream lines(canonical_text(cfg));
    std::string line;
    while (std::getline(lines, line)) std::cout << "  " << line << "\n";
}

void prepare_out(const fs::path& out, bool force) {
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force)
            throw UsageError("output directory " + out.string() +
                             " already has contents (pass --force to replace it)");
        fs::remove_all(out);
    }
    fs::create_directories(out);
}

void write_provenance(const fs::path& out, const std::string& sub, const Config& cfg,
                      std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
    {
        std::ofstream f(out / "resolved.cfg", std::ios::binary);
        f << canonical_text(cfg);
    }
    nlohmann::json j{{"tool", "calibseg"},
                     {"version", kVersion},
                     {"subcommand", sub},
                     {"seed", seed},
                     {"config_hash", hex64(config_hash(cfg))}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream f(out / "run_manifest.json", std::ios::binary);
    f << j.dump(2) << "\n";
}

// String-valued flags funneled into Config keys after parsing, so flags given
// on the command line override file values.
struct FlagMap {
    CLI::App* app;
    std::deque<std::string> strs;
    std::deque<bool> bools;
    std::vector<std::pair<CLI::Option*, std::pair<std::string, const std::string*>>> opts;
    std::vector<std::pair<CLI::Option*, std::pair<std::string, const bool*>>> flags;

    explicit FlagMap(CLI::App* a) : app(a) {}

    CLI::Option* add(const std::string& flag, const std::string& key, const std::string& help) {
        strs.emplace_back();
        CLI::Option* o = app->add_option(flag, strs.back(), help);
        opts.push_back({o, {key, &strs.back()}});
        return o;
    }
    CLI::Option* add_switch(const std::string& flag, const std::string& key,
                            const std::string& help) {
        bools.emplace_back(false);
        CLI::Option* o = app->add_flag(flag, bools.back(), help);
        flags.push_back({o, {key, &bools.back()}});
        return o;
    }
    void apply(Config& cfg) const {
        for (const auto& [o, kv] : opts)
            if (o->count()) cfg.set(kv.first, *kv.second);
        for (const auto& [o, kv] : flags)
            if (o->count()) cfg.set(kv.first, *kv.second ? "true" : "false");
    }
};

// Config mistakes (bad file, unknown key, missing required key, out-of-range
// value) are invocation problems, not runtime failures.
template <typename F>
auto as_usage(F&& f) {
    try {
        return f();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

Config base_config(const std::string& path) {
    if (path.empty()) return Config{};
    try {
        return load_config(path);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

LabelMap labels_from_tensor(const Tensor& t) {
    int h = 0, w = 0;
    if (t.rank() == 2) {
        h = t.dim(0);
        w = t.dim(1);
    } else if (t.rank() == 3 && t.dim(0) == 1) {
        h = t.dim(1);
        w = t.dim(2);
    } else {
        throw std::runtime_error("label tensor must be [H,W] or [1,H,W], got " +
                                 shape_str(t.shape()));
    }
    LabelMap out = make_label_map(h, w);
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double v = d[i];
        const double r = std::round(v);
        if (!(std::abs(v - r) < 1e-3) || r < 1.0 || r > 255.0)
            throw std::runtime_error("label tensor holds non class-id value " +
                                     std::to_string(v));
        out.v[i] = static_cast<std::uint8_t>(r);
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
}

std::string run_display_name(const std::string& arg) {
    fs::path p = fs::path(arg).lexically_normal();
    if (p.filename().empty() || p.filename() == ".") p = p.parent_path();
    std::string name = p.filename().string();
    return name.empty() ? arg : name;
}

} // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("CALIBSEG_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end && *end == '\0' && n > 0)
            set_thread_cap(static_cast<int>(n));
        else
            std::cerr << "warning: ignoring invalid CALIBSEG_THREADS '" << env << "'\n";
    }

    CLI::App app{"Calibrated segmentation toolkit: synthetic datasets, consistency-regularized "
                 "training, evaluation, and report aggregation."};
    app.set_version_flag("--version", std::string("calibseg ") + kVersion);
    app.require_subcommand(1);

    // ---- synth ------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "Generate a synthetic ambiguous-boundary dataset.");
    std::string synth_config, synth_out, synth_blur, synth_noise;
    bool synth_force = false;
    FlagMap synth_fm(synth);
    synth->add_option("--config", synth_config, "configuration file ([synth] section)");
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_flag("--force", synth_force, "replace an existing non-empty output directory");
    synth_fm.add("--seed", "synth.seed", "generator seed (default 0)");
    synth_fm.add("--height", "synth.height", "image height (default 64)");
    synth_fm.add("--width", "synth.width", "image width (default 64)");
    synth_fm.add("--fg-classes", "synth.fg_classes", "foreground classes (default 2)");
    synth_fm.add("--min-shapes", "synth.min_shapes", "min ellipses per class (default 1)");
    synth_fm.add("--max-shapes", "synth.max_shapes", "max ellipses per class (default 2)");
    synth_fm.add("--contrasts", "synth.contrasts",
                 "comma list, background first (default 0.15,0.5,0.85)");
    synth_fm.add("--blur-sigma-min", "synth.blur_sigma_min", "boundary blur lower bound");
    synth_fm.add("--blur-sigma-max", "synth.blur_sigma_max", "boundary blur upper bound");
    synth_fm.add("--noise-sigma-min", "synth.noise_sigma_min", "pixel noise lower bound");
    synth_fm.add("--noise-sigma-max", "synth.noise_sigma_max", "pixel noise upper bound");
    auto* synth_blur_o =
        synth->add_option("--blur-sigma", synth_blur, "boundary blur, both bounds (default 2)");
    auto* synth_noise_o =
        synth->add_option("--noise-sigma", synth_noise, "pixel noise, both bounds (default 0.05)");
    synth_fm.add("--jitter-px", "synth.jitter_px", "annotator jitter amplitude (default 2)");
    synth_fm.add("--n-train", "synth.n_train", "training images (default 200)");
    synth_fm.add("--n-val", "synth.n_val", "validation images (default 20)");
    synth_fm.add("--n-test", "synth.n_test", "test images (default 100)");

    // ---- train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Train a U-Net with the chosen objective.");
    std::string train_config, train_out;
    bool train_force = false;
    FlagMap train_fm(train_cmd);
    train_cmd->add_option("--config", train_config,
                          "configuration file ([train]/[unet]/[lambda]/[transforms] sections)");
    train_cmd->add_option("--out", train_out, "output run directory")->required();
    train_cmd->add_flag("--force", train_force, "replace an existing non-empty output directory");
    train_fm.add("--dataset", "train.dataset", "dataset directory (required here or in config)");
    train_fm.add("--method", "train.method",
                 "objective: baseline, da, cr, bwcr, svls, mls (default da)");
    train_fm.add("--lambda", "train.lambda",
                 "consistency weight for cr (default 1; reference sweep 0, 0.01, 0.1, 1, 10)");
    train_fm.add("--batch-size", "train.batch_size", "images per iteration (default 16)");
    train_fm.add("--iterations", "train.iterations", "optimizer steps (default 2000)");
    train_fm.add("--lr-start", "train.lr_start", "initial learning rate (default 1e-4)");
    train_fm.add("--lr-end", "train.lr_end", "final learning rate (default 1e-7)");
    train_fm.add("--seed", "train.seed", "training seed (default 0)");
    train_fm.add("--val-interval", "train.val_interval", "iterations between validations "
                 "(default 100)");
    train_fm.add("--ema-decay", "train.ema_decay", "weight shadow decay (default 0.999)");
    train_fm.add("--width", "unet.width", "base channel width (default 16)");
    train_fm.add("--depth", "unet.depth", "resolution levels (default 3)");
    train_fm.add("--classes", "unet.classes", "classes incl. background (default 2)");
    train_fm.add("--lambda-min", "lambda.min", "boundary weight floor (default 0.01)");
    train_fm.add("--lambda-max", "lambda.max", "boundary weight peak (default 1.0)");
    train_fm.add("--radius", "lambda.radius", "boundary weight radius R in px (default 10)");
    train_fm.add("--svls-sigma", "train.svls_sigma", "3x3 label-smoothing sigma (default 1.0)");
    train_fm.add("--mls-margin", "train.mls_margin", "logit margin (default 10)");
    train_fm.add("--mls-weight", "train.mls_weight", "margin penalty weight (default 0.1)");
    train_fm.add_switch("--bwcr-const-lambda", "train.bwcr_const_lambda",
                        "diagnostic: flat map at --lambda instead of the boundary weighting");
    train_fm.add_switch("--supervise-both-branches", "train.supervise_both_branches",
                        "average the supervised loss over both transformed branches");

    // ---- eval -------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand(
        "eval", "Score a checkpoint on one dataset split. ECE and TACE use 15 equal-width bins; "
                "the TACE probability threshold is 0.01; per-image rows land in metrics.csv "
                "with TACE stored raw (reports render it x10).");
    std::string eval_ckpt, eval_dataset, eval_split = "test", eval_out;
    bool eval_soft = false, eval_force = false;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "trained weights (architecture is inferred)");
    eval_cmd->add_option("--dataset", eval_dataset, "dataset directory")->required();
    eval_cmd->add_option("--split", eval_split, "train, val, or test (default test)");
    eval_cmd->add_flag("--soft-oracle", eval_soft,
                       "score the generator's latent soft labels instead of a checkpoint");
    eval_cmd->add_option("--out", eval_out, "output directory")->required();
    eval_cmd->add_flag("--force", eval_force, "replace an existing non-empty output directory");

    // ---- lambda-map ---------------------------------------------------------
    auto* lmap_cmd = app.add_subcommand(
        "lambda-map", "Boundary-distance and consistency-weight maps for one label map.");
    std::string lmap_labels, lmap_out;
    int lmap_classes = 0;
    double lmap_min = 0.01, lmap_max = 1.0, lmap_radius = 10.0;
    bool lmap_force = false;
    lmap_cmd->add_option("--labels", lmap_labels, ".tnsr class-id map or binary .pgm")
        ->required();
    lmap_cmd->add_option("--classes", lmap_classes,
                         "class count incl. background (default: largest id present)");
    lmap_cmd->add_option("--lambda-min", lmap_min, "weight floor")->capture_default_str();
    lmap_cmd->add_option("--lambda-max", lmap_max, "weight peak")->capture_default_str();
    lmap_cmd->add_option("--radius", lmap_radius, "radius R in px")->capture_default_str();
    lmap_cmd->add_option("--out", lmap_out, "output directory")->required();
    lmap_cmd->add_flag("--force", lmap_force, "replace an existing non-empty output directory");

    // ---- landscape ----------------------------------------------------------
    auto* land_cmd = app.add_subcommand(
        "landscape", "Binary-case loss surfaces over a (z, z') logit grid.");
    double land_zmin = -5.0, land_zmax = 5.0, land_lambda = 1.0;
    int land_n = 201, land_class = 2;
    std::string land_out;
    bool land_force = false;
    land_cmd->add_option("--zmin", land_zmin, "grid lower bound")->capture_default_str();
    land_cmd->add_option("--zmax", land_zmax, "grid upper bound")->capture_default_str();
    land_cmd->add_option("--n", land_n, "grid points per axis")->capture_default_str();
    land_cmd->add_option("--lambda", land_lambda, "consistency weight")->capture_default_str();
    land_cmd->add_option("--label-class", land_class, "supervised class, 1 or 2")
        ->capture_default_str();
    land_cmd->add_option("--out", land_out, "output directory")->required();
    land_cmd->add_flag("--force", land_force, "replace an existing non-empty output directory");

    // ---- report -------------------------------------------------------------
    auto* rep_cmd = app.add_subcommand(
        "report", "Aggregate per-image metrics across runs. The rendered table shows TACE x10; "
                  "CSV outputs keep raw values.");
    std::vector<std::string> rep_runs, rep_pairs;
    std::string rep_names, rep_metric = "ece", rep_out;
    int rep_resamples = 10000;
    std::uint64_t rep_seed = 0;
    bool rep_force = false;
    rep_cmd->add_option("--runs", rep_runs, "run directories holding metrics.csv (or .csv paths)")
        ->required();
    rep_cmd->add_option("--names", rep_names, "comma list of display names (default: basenames)");
    rep_cmd->add_option("--pair", rep_pairs, "name:name to compare with a paired permutation test");
    rep_cmd->add_option("--metric", rep_metric, "paired test metric")
        ->check(CLI::IsMember({"dice", "ece", "tace"}))
        ->capture_default_str();
    rep_cmd->add_option("--resamples", rep_resamples, "permutation resamples")
        ->capture_default_str();
    rep_cmd->add_option("--seed", rep_seed, "permutation seed")->capture_default_str();
    rep_cmd->add_option("--out", rep_out, "optional output directory for table and p-value files");
    rep_cmd->add_flag("--force", rep_force, "replace an existing non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand(synth)) {
            Config cfg = base_config(synth_config);
            synth_fm.apply(cfg);
            if (synth_blur_o->count()) {
                cfg.set("synth.blur_sigma_min", synth_blur);
                cfg.set("synth.blur_sigma_max", synth_blur);
            }
            if (synth_noise_o->count()) {
                cfg.set("synth.noise_sigma_min", synth_noise);
                cfg.set("synth.noise_sigma_max", synth_noise);
            }
            const SceneSpec spec = as_usage([&] { return make_scene_spec(cfg); });
            const DatasetCounts n = as_usage([&] { return make_dataset_counts(cfg); });
            const std::uint64_t seed = as_usage([&] { return cfg.get_u64("synth.seed", 0); });
            const Config resolved = to_config(spec, n, seed);
            print_resolved("synth", resolved, seed);
            prepare_out(synth_out, synth_force);
            make_dataset(synth_out, seed, n, spec);
            write_provenance(synth_out, "synth", resolved, seed);
            std::cout << "wrote " << n.train << "/" << n.val << "/" << n.test
                      << " train/val/test images to " << synth_out << "\n";
        } else if (app.got_subcommand(train_cmd)) {
            Config cfg = base_config(train_config);
            train_fm.apply(cfg);
            const TrainConfig tc = as_usage([&] { return make_train_config(cfg); });
            const Config resolved = to_config(tc);
            print_resolved("train", resolved, tc.seed);
            prepare_out(train_out, train_force);
            const TrainResult res = train(tc);
            save_checkpoint(res.weights, fs::path(train_out) / "best.ckpt");
            write_train_log(res.log, train_out);
            for (const auto& v : res.log.vals)
                std::cout << "iter " << v.iter << ": val_dice " << fmt("%.4f", v.dice)
                          << ", val_ece " << fmt("%.4f", v.ece) << "\n";
            if (res.log.diverged)
                std::cout << "warning: loss went non-finite; stopped after "
                          << res.log.iters.size() << " iterations\n";
            if (res.log.skipped_updates)
                std::cout << "warning: " << res.log.skipped_updates
                          << " updates skipped for non-finite gradients\n";
            std::cout << "best val dice " << fmt("%.4f", res.log.best_dice) << " at iteration "
                      << res.log.best_iter << "; checkpoint and logs in " << train_out << "\n";
            write_provenance(train_out, "train", resolved, tc.seed,
                             {{"best_iter", res.log.best_iter},
                              {"best_val_dice", res.log.best_dice},
                              {"diverged", res.log.diverged},
                              {"skipped_updates", res.log.skipped_updates}});
        } else if (app.got_subcommand(eval_cmd)) {
            if (!eval_soft && eval_ckpt.empty())
                throw UsageError("eval needs --checkpoint or --soft-oracle");
            if (eval_soft && !eval_ckpt.empty())
                throw UsageError("--checkpoint and --soft-oracle are mutually exclusive");
            const DatasetInfo info = read_manifest(eval_dataset);
            Config resolved;
            resolved.set("eval.dataset", eval_dataset);
            resolved.set("eval.split", eval_split);
            resolved.set("eval.soft_oracle", eval_soft ? "true" : "false");
            if (!eval_soft) resolved.set("eval.checkpoint", eval_ckpt);
            print_resolved("eval", resolved, info.seed);
            prepare_out(eval_out, eval_force);
            MetricsReport rep;
            if (eval_soft) {
                rep = evaluate_soft_oracle(eval_dataset, eval_split);
            } else {
                const WeightSet ws = load_checkpoint(eval_ckpt);
                rep = evaluate(ws, infer_config(ws), eval_dataset, eval_split);
            }
            rep.config_hash = hex64(config_hash(resolved));
            write_metrics_csv(rep, fs::path(eval_out) / "metrics.csv");
            write_provenance(eval_out, "eval", resolved, info.seed,
                             {{"images", rep.rows.size()}});
            std::cout << "images: " << rep.rows.size() << "\n";
            std::cout << "dice: " << fmt("%.4f", rep.dice_agg.mean) << " +/- "
                      << fmt("%.4f", rep.dice_agg.stdev) << "\n";
            std::cout << "ece:  " << fmt("%.4f", rep.ece_agg.mean) << " +/- "
                      << fmt("%.4f", rep.ece_agg.stdev) << "\n";
            std::cout << "tace: " << fmt("%.4f", rep.tace_agg.mean) << " +/- "
                      << fmt("%.4f", rep.tace_agg.stdev) << " (x10: "
                      << fmt("%.4f", 10.0 * rep.tace_agg.mean) << ")\n";
        } else if (app.got_subcommand(lmap_cmd)) {
            const fs::path in = lmap_labels;
            const LabelMap labels = in.extension() == ".pgm" ? read_pgm_labels(in)
                                                             : labels_from_tensor(load_tensor(in));
            int max_id = 1;
            for (std::uint8_t v : labels.v) max_id = std::max<int>(max_id, v);
            const int classes = lmap_classes > 0 ? lmap_classes : std::max(max_id, 2);
            if (classes < max_id)
                throw UsageError("--classes " + std::to_string(classes) +
                                 " is below the largest label id " + std::to_string(max_id));
            Config resolved;
            resolved.set("lambdamap.labels", lmap_labels);
            resolved.set("lambdamap.classes", std::to_string(classes));
            resolved.set("lambda.min", fmt("%.17g", lmap_min));
            resolved.set("lambda.max", fmt("%.17g", lmap_max));
            resolved.set("lambda.radius", fmt("%.17g", lmap_radius));
            print_resolved("lambda-map", resolved, 0);
            const DistanceMap dist = boundary_distance(labels, classes);
            const LambdaMap lam = lambda_map(dist, {lmap_min, lmap_max, lmap_radius});
            prepare_out(lmap_out, lmap_force);
            Tensor dt = Tensor::zeros({labels.h, labels.w});
            Tensor lt = Tensor::zeros({labels.h, labels.w});
            for (std::size_t i = 0; i < dist.r.size(); ++i) {
                dt.data()[i] = static_cast<float>(dist.r[i]);
                lt.data()[i] = static_cast<float>(lam.v[i]);
            }
            save_tensor(fs::path(lmap_out) / "boundary_distance.tnsr", dt);
            save_tensor(fs::path(lmap_out) / "lambda_map.tnsr", lt);
            write_pgm(dt, fs::path(lmap_out) / "boundary_distance.pgm");
            write_pgm(lt, fs::path(lmap_out) / "lambda_map.pgm");
            write_provenance(lmap_out, "lambda-map", resolved, 0);
            std::cout << "wrote " << labels.h << "x" << labels.w
                      << " distance and weight maps to " << lmap_out << "\n";
        } else if (app.got_subcommand(land_cmd)) {
            Config resolved;
            resolved.set("landscape.zmin", fmt("%.17g", land_zmin));
            resolved.set("landscape.zmax", fmt("%.17g", land_zmax));
            resolved.set("landscape.n", std::to_string(land_n));
            resolved.set("landscape.lambda", fmt("%.17g", land_lambda));
            resolved.set("landscape.label_class", std::to_string(land_class));
            print_resolved("landscape", resolved, 0);
            const LossLandscape ls = loss_landscape(land_zmin, land_zmax, land_zmin, land_zmax,
                                                    land_n, land_lambda, land_class);
            prepare_out(land_out, land_force);
            const char* names[3] = {"landscape_ls.tnsr", "landscape_lc.tnsr",
                                    "landscape_total.tnsr"};
            const std::vector<double>* grids[3] = {&ls.ls, &ls.lc, &ls.total};
            for (int g = 0; g < 3; ++g) {
                Tensor t = Tensor::zeros({ls.n, ls.n});
                for (std::size_t i = 0; i < grids[g]->size(); ++i)
                    t.data()[i] = static_cast<float>((*grids[g])[i]);
                save_tensor(fs::path(land_out) / names[g], t);
            }
            {
                std::ofstream csv(fs::path(land_out) / "landscape.csv", std::ios::binary);
                csv << "z,zp,ls,lc,total\n";
                for (int i = 0; i < ls.n; ++i)
                    for (int j = 0; j < ls.n; ++j) {
                        const std::size_t k = static_cast<std::size_t>(i) * ls.n + j;
                        csv << fmt("%.17g", ls.z[i]) << "," << fmt("%.17g", ls.zp[j]) << ","
                            << fmt("%.17g", ls.ls[k]) << "," << fmt("%.17g", ls.lc[k]) << ","
                            << fmt("%.17g", ls.total[k]) << "\n";
                    }
            }
            std::size_t amin = 0;
            for (std::size_t k = 1; k < ls.total.size(); ++k)
                if (ls.total[k] < ls.total[amin]) amin = k;
            write_provenance(land_out, "landscape", resolved, 0);
            std::cout << "wrote " << ls.n << "x" << ls.n << " surfaces to " << land_out
                      << "; total argmin at z=" << fmt("%.3g", ls.z[amin / ls.n])
                      << ", z'=" << fmt("%.3g", ls.zp[amin % ls.n]) << "\n";
        } else if (app.got_subcommand(rep_cmd)) {
            std::vector<std::string> names;
            if (!rep_names.empty()) {
                names = split_list(rep_names, ',');
                if (names.size() != rep_runs.size())
                    throw UsageError("--names lists " + std::to_string(names.size()) +
                                     " names for " + std::to_string(rep_runs.size()) + " runs");
            } else {
                for (const auto& r : rep_runs) names.push_back(run_display_name(r));
            }
            for (std::size_t i = 0; i < names.size(); ++i)
                for (std::size_t j = i + 1; j < names.size(); ++j)
                    if (names[i] == names[j])
                        throw UsageError("duplicate run name '" + names[i] +
                                         "' (disambiguate with --names)");
            Config resolved;
            for (std::size_t i = 0; i < rep_runs.size(); ++i)
                resolved.set("report.run." + names[i], rep_runs[i]);
            resolved.set("report.metric", rep_metric);
            resolved.set("report.resamples", std::to_string(rep_resamples));
            resolved.set("report.seed", std::to_string(rep_seed));
            print_resolved("report", resolved, rep_seed);

            std::vector<MetricsReport> reports;
            for (const auto& r : rep_runs) {
                const fs::path p = fs::is_directory(r) ? fs::path(r) / "metrics.csv" : fs::path(r);
                reports.push_back(read_metrics_csv(p));
            }

            std::ostringstream table;
            char line[160];
            std::snprintf(line, sizeof(line), "%-18s %6s  %-18s %-18s %-18s\n", "run", "n",
                          "dice", "ece", "tace(x10)");
            table << line;
            for (std::size_t i = 0; i < reports.size(); ++i) {
                const MetricsReport& r = reports[i];
                char dice[32], ece[32], tace[32];
                std::snprintf(dice, sizeof(dice), "%.4f +/- %.4f", r.dice_agg.mean,
                              r.dice_agg.stdev);
                std::snprintf(ece, sizeof(ece), "%.4f +/- %.4f", r.ece_agg.mean, r.ece_agg.stdev);
                std::snprintf(tace, sizeof(tace), "%.4f +/- %.4f", 10.0 * r.tace_agg.mean,
                              10.0 * r.tace_agg.stdev);
                std::snprintf(line, sizeof(line), "%-18s %6zu  %-18s %-18s %-18s\n",
                              names[i].c_str(), r.rows.size(), dice, ece, tace);
                table << line;
            }

            auto metric_of = [&](const MetricsReport& r) {
                std::vector<double> v;
                v.reserve(r.rows.size());
                for (const auto& row : r.rows)
                    v.push_back(rep_metric == "dice" ? row.dice_mean
                                                     : (rep_metric == "ece" ? row.ece : row.tace));
                return v;
            };

            std::ostringstream ptext;
            std::vector<std::array<std::string, 2>> pairings;
            std::vector<double> pvalues;
            for (std::size_t k = 0; k < rep_pairs.size(); ++k) {
                const auto parts = split_list(rep_pairs[k], ':');
                if (parts.size() != 2)
                    throw UsageError("--pair wants name:name, got '" + rep_pairs[k] + "'");
                const auto idx = [&](const std::string& n) -> std::size_t {
                    for (std::size_t i = 0; i < names.size(); ++i)
                        if (names[i] == n) return i;
                    throw UsageError("--pair references unknown run '" + n + "'");
                };
                const std::size_t a = idx(parts[0]), b = idx(parts[1]);
                const std::vector<double> va = metric_of(reports[a]), vb = metric_of(reports[b]);
                if (va.size() != vb.size())
                    throw UsageError("paired test needs equal image counts: " + parts[0] +
                                     " has " + std::to_string(va.size()) + ", " + parts[1] +
                                     " has " + std::to_string(vb.size()));
                Rng rng = Rng::keyed(rep_seed, 0x72707274ull, k);
                const double p = paired_permutation_test(va, vb, rep_resamples, rng);
                pairings.push_back({parts[0], parts[1]});
                pvalues.push_back(p);
                ptext << "permutation p (" << parts[0] << " vs " << parts[1] << ", " << rep_metric
                      << ", n=" << va.size() << ", resamples=" << rep_resamples
                      << "): " << fmt("%.6g", p) << "\n";
            }

            std::cout << table.str() << ptext.str();
            if (!rep_out.empty()) {
                prepare_out(rep_out, rep_force);
                {
                    std::ofstream f(fs::path(rep_out) / "aggregate.csv", std::ios::binary);
                    f << "run,n,dice_mean,dice_std,ece_mean,ece_std,tace_mean,tace_std\n";
                    for (std::size_t i = 0; i < reports.size(); ++i) {
                        const MetricsReport& r = reports[i];
                        f << names[i] << "," << r.rows.size() << ","
                          << fmt("%.17g", r.dice_agg.mean) << "," << fmt("%.17g", r.dice_agg.stdev)
                          << "," << fmt("%.17g", r.ece_agg.mean) << ","
                          << fmt("%.17g", r.ece_agg.stdev) << "," << fmt("%.17g", r.tace_agg.mean)
                          << "," << fmt("%.17g", r.tace_agg.stdev) << "\n";
                    }
                }
                {
                    std::ofstream f(fs::path(rep_out) / "pvalues.csv", std::ios::binary);
                    f << "a,b,metric,resamples,p\n";
                    for (std::size_t k = 0; k < pvalues.size(); ++k)
                        f << pairings[k][0] << "," << pairings[k][1] << "," << rep_metric << ","
                          << rep_resamples << "," << fmt("%.17g", pvalues[k]) << "\n";
                }
                {
                    std::ofstream f(fs::path(rep_out) / "report.txt", std::ios::binary);
                    f << table.str() << ptext.str();
                }
                write_provenance(rep_out, "report", resolved, rep_seed);
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
