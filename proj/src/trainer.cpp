#include "calibseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "calibseg/losses.hpp"
#include "calibseg/synthdata.hpp"

namespace calibseg {

namespace {

constexpr std::uint64_t kBatchTag = 0x62617463;  // batch index stream
constexpr std::uint64_t kBranchTag = 0x6272;     // per-branch transform stream

std::string fmt(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", v);
    return b;
}

int split_count(const DatasetInfo& info, const std::string& split) {
    if (split == "train") return info.counts.train;
    if (split == "val") return info.counts.val;
    if (split == "test") return info.counts.test;
    throw std::invalid_argument("unknown split '" + split + "'");
}

// One augmented branch for a whole batch: per-sample geometric warp, then
// photometric transforms, one network pass, then the inverse warps pulling
// the logits back to the original frame.
struct Branch {
    Tensor logits;                   // [N,C,H,W], original frame
    std::vector<std::uint8_t> valid; // N*H*W round-trip mask
};

Branch run_branch(Tape& tape, const WeightSet& ws, const TrainConfig& cfg,
                  const std::vector<Sample>& data, const std::vector<int>& idx, int h, int w,
                  int t, int branch_id) {
    const int n = static_cast<int>(idx.size());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor xb = Tensor::zeros({n, 1, h, w});
    auto xbd = xb.data();
    std::vector<GeometricParams> invp(n);
    for (int s = 0; s < n; ++s) {
        Rng rb = Rng::keyed(cfg.seed, kBranchTag, static_cast<std::uint64_t>(t),
                            static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(branch_id));
        const IntensityParams phi = sample_intensity(rb, cfg.ranges);
        const GeometricParams psi = sample_geometric(rb, cfg.ranges);
        Tensor warped = warp(tape, data[idx[s]].image, psi, WarpMode::bilinear, 0.0f);
        Tensor flat = Tensor::from_data(
            {h, w}, std::vector<float>(warped.data().begin(), warped.data().end()));
        Tensor xi = apply_intensity(flat, phi);
        std::copy(xi.data().begin(), xi.data().end(), xbd.begin() + s * plane);
        invp[s] = inverted(psi);
    }
    Branch out;
    Tensor logits = unet_forward(tape, ws, xb, cfg.unet);
    out.logits = warp(tape, logits, std::span<const GeometricParams>(invp.data(), invp.size()),
                      WarpMode::bilinear, 0.0f, &out.valid);
    return out;
}

ImageMetrics forward_metrics(const WeightSet& ws, const UNetConfig& unet, const Sample& s) {
    Tape tape;
    const int h = s.image.dim(1), w = s.image.dim(2);
    Tensor x = Tensor::from_data({1, 1, h, w},
                                 std::vector<float>(s.image.data().begin(), s.image.data().end()));
    Tensor logits = unet_forward(tape, ws, x, unet);
    Tensor probs4 = softmax_channels(tape, logits);
    Tensor probs = Tensor::from_data(
        {probs4.dim(1), h, w}, std::vector<float>(probs4.data().begin(), probs4.data().end()));
    return evaluate_image({probs, s.hard_label});
}

std::pair<double, double> validate_on(const WeightSet& ws, const UNetConfig& unet,
                                      const std::vector<Sample>& samples) {
    double dsum = 0.0, esum = 0.0;
    for (const Sample& s : samples) {
        const ImageMetrics im = forward_metrics(ws, unet, s);
        dsum += im.dice_mean;
        esum += im.ece;
    }
    const double n = static_cast<double>(samples.size());
    return {dsum / n, esum / n};
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

} // namespace

Method method_from_string(const std::string& s) {
    if (s == "baseline") return Method::baseline;
    if (s == "da") return Method::da;
    if (s == "cr") return Method::cr;
    if (s == "bwcr") return Method::bwcr;
    if (s == "svls") return Method::svls;
    if (s == "mls") return Method::mls;
    throw std::invalid_argument("unknown method '" + s + "'");
}

std::string to_string(Method m) {
    switch (m) {
        case Method::baseline: return "baseline";
        case Method::da: return "da";
        case Method::cr: return "cr";
        case Method::bwcr: return "bwcr";
        case Method::svls: return "svls";
        case Method::mls: return "mls";
    }
    throw std::invalid_argument("unknown method value");
}

void validate(const TrainConfig& cfg) {
    validate(cfg.unet);
    validate_ranges(cfg.ranges);
    if (cfg.batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (cfg.iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
    if (!(cfg.lr_start > 0.0) || !(cfg.lr_end > 0.0))
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (cfg.val_interval < 1) throw std::invalid_argument("TrainConfig: val_interval must be >= 1");
    if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0))
        throw std::invalid_argument("TrainConfig: ema_decay must lie in [0,1)");
    if (!(cfg.lambda >= 0.0)) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (!(cfg.lambda_params.lambda_min >= 0.0) ||
        cfg.lambda_params.lambda_max < cfg.lambda_params.lambda_min ||
        !(cfg.lambda_params.radius > 0.0))
        throw std::invalid_argument("TrainConfig: bad lambda map parameters");
    if (!(cfg.svls_sigma > 0.0)) throw std::invalid_argument("TrainConfig: svls_sigma must be > 0");
    if (!(cfg.mls_margin > 0.0)) throw std::invalid_argument("TrainConfig: mls_margin must be > 0");
    if (!(cfg.mls_weight >= 0.0))
        throw std::invalid_argument("TrainConfig: mls_weight must be >= 0");
}

double lr_schedule(int t, const TrainConfig& cfg) {
    if (t < 0 || t >= cfg.iterations)
        throw std::invalid_argument("lr_schedule: iteration " + std::to_string(t) +
                                    " outside [0," + std::to_string(cfg.iterations) + ")");
    if (cfg.iterations == 1) return cfg.lr_start;
    const double frac = static_cast<double>(t) / static_cast<double>(cfg.iterations - 1);
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
}

AdamState make_adam_state(const WeightSet& ws) {
    AdamState st;
    st.m.reserve(ws.size());
    st.v.reserve(ws.size());
    for (const Tensor& t : ws.tensors) {
        st.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        st.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
    return st;
}

bool adam_step(WeightSet& ws, AdamState& st, double lr) {
    if (st.m.size() != ws.size() || st.v.size() != ws.size())
        throw std::invalid_argument("adam_step: state does not match the weight set");
    for (std::size_t i = 0; i < ws.size(); ++i) {
        if (static_cast<std::size_t>(ws.tensors[i].numel()) != st.m[i].size())
            throw std::invalid_argument("adam_step: state size mismatch at tensor " +
                                        std::to_string(i));
        for (float g : ws.tensors[i].grad())
            if (!std::isfinite(g)) return false;
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < ws.size(); ++i) {
        auto w = ws.tensors[i].data();
        auto g = ws.tensors[i].grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double gj = g[j];
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            w[j] = static_cast<float>(static_cast<double>(w[j]) -
                                      lr * mh / (std::sqrt(vh) + st.eps));
        }
    }
    return true;
}

TrainResult train(const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    validate(cfg);
    if (cfg.unet.in_channels != 1)
        throw std::invalid_argument("train: samples are single-channel images");

    const DatasetInfo info = read_manifest(cfg.dataset_dir);
    if (info.num_classes != cfg.unet.num_classes)
        throw std::invalid_argument("train: dataset has " + std::to_string(info.num_classes) +
                                    " classes, network expects " +
                                    std::to_string(cfg.unet.num_classes));
    const int stride = 1 << (cfg.unet.depth - 1);
    if (info.height % stride != 0 || info.width % stride != 0)
        throw std::invalid_argument("train: image size not divisible by the downsample stride");
    if (info.counts.train < 1 || info.counts.val < 1)
        throw std::invalid_argument("train: dataset needs train and val samples");
    cfg.ranges.image_side = std::max(info.height, info.width);

    const int h = info.height, w = info.width;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    std::vector<Sample> train_set;
    train_set.reserve(info.counts.train);
    for (int i = 0; i < info.counts.train; ++i)
        train_set.push_back(load_sample(cfg.dataset_dir, "train", i));
    std::vector<Sample> val_set;
    val_set.reserve(info.counts.val);
    for (int i = 0; i < info.counts.val; ++i)
        val_set.push_back(load_sample(cfg.dataset_dir, "val", i));

    // per-sample inputs that never change across iterations
    std::vector<std::vector<double>> lam;
    if (cfg.method == Method::bwcr) {
        lam.resize(train_set.size());
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            if (cfg.bwcr_const_lambda) {
                lam[i].assign(plane, cfg.lambda);
            } else {
                const DistanceMap dm = boundary_distance(train_set[i].hard_label, info.num_classes);
                lam[i] = lambda_map(dm, cfg.lambda_params).v;
            }
        }
    }
    std::vector<SoftLabelMap> svls_t;
    if (cfg.method == Method::svls) {
        svls_t.reserve(train_set.size());
        for (const Sample& s : train_set)
            svls_t.push_back(svls_targets(s.hard_label, info.num_classes, cfg.svls_sigma));
    }

    WeightSet ws = init_weights(cfg.unet, cfg.seed);
    AdamState adam = make_adam_state(ws);
    EmaState ema;
    ema.decay = cfg.ema_decay;

    TrainResult out;
    TrainLog& log = out.log;
    WeightSet best;

    for (int t = 0; t < cfg.iterations; ++t) {
        const double lr = lr_schedule(t, cfg);
        Rng bi = Rng::keyed(cfg.seed, kBatchTag, static_cast<std::uint64_t>(t));
        std::vector<int> idx(cfg.batch_size);
        for (int& s : idx) s = bi.uniform_int(static_cast<int>(train_set.size()));

        Tape tape;
        std::vector<LabelMap> labels;
        labels.reserve(idx.size());
        for (int s : idx) labels.push_back(train_set[s].hard_label);

        Tensor ls, lc_term, total;
        if (cfg.method == Method::baseline) {
            Tensor xb = Tensor::zeros({cfg.batch_size, 1, h, w});
            auto xbd = xb.data();
            for (std::size_t s = 0; s < idx.size(); ++s) {
                const auto src = train_set[idx[s]].image.data();
                std::copy(src.begin(), src.end(), xbd.begin() + s * plane);
            }
            Tensor logits = unet_forward(tape, ws, xb, cfg.unet);
            ls = cross_entropy(tape, logits, std::span<const LabelMap>(labels)).scalar;
            total = ls;
        } else {
            Branch a = run_branch(tape, ws, cfg, train_set, idx, h, w, t, 0);
            ls = cross_entropy(tape, a.logits, std::span<const LabelMap>(labels), a.valid).scalar;
            switch (cfg.method) {
                case Method::da:
                    total = ls;
                    break;
                case Method::svls: {
                    std::vector<SoftLabelMap> targets;
                    targets.reserve(idx.size());
                    for (int s : idx) targets.push_back(svls_t[s]);
                    ls = cross_entropy_soft(tape, a.logits,
                                            std::span<const SoftLabelMap>(targets), a.valid)
                             .scalar;
                    total = ls;
                    break;
                }
                case Method::mls: {
                    Tensor pen = mls_penalty(tape, a.logits, static_cast<float>(cfg.mls_margin));
                    lc_term = scale(tape, pen, static_cast<float>(cfg.mls_weight));
                    total = add(tape, ls, lc_term);
                    break;
                }
                case Method::cr: {
                    if (cfg.lambda == 0.0) {
                        total = ls;
                        break;
                    }
                    Branch b = run_branch(tape, ws, cfg, train_set, idx, h, w, t, 1);
                    if (cfg.supervise_both_branches) {
                        Tensor lsb = cross_entropy(tape, b.logits,
                                                   std::span<const LabelMap>(labels), b.valid)
                                         .scalar;
                        ls = add(tape, scale(tape, ls, 0.5f), scale(tape, lsb, 0.5f));
                    }
                    std::vector<std::uint8_t> both(a.valid.size());
                    for (std::size_t j = 0; j < both.size(); ++j)
                        both[j] = a.valid[j] && b.valid[j];
                    ScalarMap lc = consistency_sq(tape, a.logits, b.logits, both);
                    lc_term = scale(tape, lc.scalar, static_cast<float>(cfg.lambda));
                    total = add(tape, ls, lc_term);
                    break;
                }
                case Method::bwcr: {
                    Branch b = run_branch(tape, ws, cfg, train_set, idx, h, w, t, 1);
                    if (cfg.supervise_both_branches) {
                        Tensor lsb = cross_entropy(tape, b.logits,
                                                   std::span<const LabelMap>(labels), b.valid)
                                         .scalar;
                        ls = add(tape, scale(tape, ls, 0.5f), scale(tape, lsb, 0.5f));
                    }
                    std::vector<std::uint8_t> both(a.valid.size());
                    for (std::size_t j = 0; j < both.size(); ++j)
                        both[j] = a.valid[j] && b.valid[j];
                    std::vector<double> weights(idx.size() * plane);
                    for (std::size_t s = 0; s < idx.size(); ++s)
                        std::copy(lam[idx[s]].begin(), lam[idx[s]].end(),
                                  weights.begin() + s * plane);
                    lc_term = consistency_weighted(tape, a.logits, b.logits, weights, both);
                    total = add(tape, ls, lc_term);
                    break;
                }
                case Method::baseline:
                    break; // handled above
            }
        }

        const double ls_v = ls.item();
        const double lc_v = lc_term.defined() ? lc_term.item() : 0.0;
        const double tot_v = total.item();
        log.iters.push_back({t, ls_v, lc_v, tot_v, lr});
        if (!std::isfinite(tot_v)) {
            log.diverged = true;
            break;
        }

        tape.backward(total);
        if (!adam_step(ws, adam, lr)) ++log.skipped_updates;
        for (Tensor& p : ws.tensors) p.zero_grad();
        ema_update(ema, ws);

        if ((t + 1) % cfg.val_interval == 0 || t + 1 == cfg.iterations) {
            const auto [vd, ve] = validate_on(ema.shadow, cfg.unet, val_set);
            log.vals.push_back({t, vd, ve});
            if (vd > log.best_dice) {
                log.best_dice = vd;
                log.best_iter = t;
                best = clone_weights(ema.shadow);
            }
        }
    }

    if (best.size()) {
        out.weights = std::move(best);
    } else {
        out.weights = clone_weights(ema.shadow.size() ? ema.shadow : ws);
        for (Tensor& p : out.weights.tensors) p.set_requires_grad(false);
    }
    return out;
}

MetricsReport evaluate(const WeightSet& ws, const UNetConfig& unet,
                       const std::filesystem::path& dataset_dir, const std::string& split) {
    const DatasetInfo info = read_manifest(dataset_dir);
    if (info.num_classes != unet.num_classes)
        throw std::invalid_argument("evaluate: dataset has " + std::to_string(info.num_classes) +
                                    " classes, network expects " +
                                    std::to_string(unet.num_classes));
    const int count = split_count(info, split);

    MetricsReport rep;
    rep.num_classes = info.num_classes;
    rep.seed = info.seed;
    rep.rows.reserve(count);
    for (int i = 0; i < count; ++i) {
        const Sample s = load_sample(dataset_dir, split, i);
        rep.rows.push_back(forward_metrics(ws, unet, s));
    }
    finalize_report(rep);
    return rep;
}

MetricsReport evaluate_soft_oracle(const std::filesystem::path& dataset_dir,
                                   const std::string& split) {
    const DatasetInfo info = read_manifest(dataset_dir);
    const int count = split_count(info, split);

    MetricsReport rep;
    rep.num_classes = info.num_classes;
    rep.seed = info.seed;
    rep.rows.reserve(count);
    for (int i = 0; i < count; ++i) {
        const Sample s = load_sample(dataset_dir, split, i);
        Tensor probs = Tensor::from_data({s.soft_label.c, s.soft_label.h, s.soft_label.w},
                                         s.soft_label.p);
        rep.rows.push_back(evaluate_image({probs, s.hard_label}));
    }
    finalize_report(rep);
    return rep;
}

void write_train_log(const TrainLog& log, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "train_log.csv");
        f << "iter,ls,lc,total,lr\n";
        for (const TrainIterRow& r : log.iters)
            f << r.iter << ',' << fmt(r.ls) << ',' << fmt(r.lc) << ',' << fmt(r.total) << ','
              << fmt(r.lr) << '\n';
        if (!f) throw std::runtime_error("write_train_log: cannot write train_log.csv");
    }
    {
        std::ofstream f(dir / "val_log.csv");
        f << "iter,val_dice,val_ece\n";
        for (const ValRow& r : log.vals)
            f << r.iter << ',' << fmt(r.dice) << ',' << fmt(r.ece) << '\n';
        if (!f) throw std::runtime_error("write_train_log: cannot write val_log.csv");
    }
}

void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    f << "image,ece,tace,tace_empty,dice_mean";
    for (int c = 2; c <= report.num_classes; ++c) f << ",dice_c" << c;
    f << '\n';
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const ImageMetrics& r = report.rows[i];
        f << i << ',' << fmt(r.ece) << ',' << fmt(r.tace) << ',' << (r.tace_empty ? 1 : 0) << ','
          << fmt(r.dice_mean);
        for (double d : r.dice_per_class) f << ',' << fmt(d);
        f << '\n';
    }
    if (!f) throw std::runtime_error("write_metrics_csv: cannot write " + path.string());
}

MetricsReport read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_metrics_csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("read_metrics_csv: empty file");
    const auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "image" || header[1] != "ece" || header[2] != "tace" ||
        header[3] != "tace_empty" || header[4] != "dice_mean")
        throw std::runtime_error("read_metrics_csv: unexpected header in " + path.string());

    MetricsReport rep;
    rep.num_classes = static_cast<int>(header.size()) - 4;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("read_metrics_csv: ragged row in " + path.string());
        ImageMetrics r;
        r.ece = std::stod(cells[1]);
        r.tace = std::stod(cells[2]);
        r.tace_empty = cells[3] != "0";
        r.dice_mean = std::stod(cells[4]);
        for (std::size_t c = 5; c < cells.size(); ++c)
            r.dice_per_class.push_back(std::stod(cells[c]));
        rep.rows.push_back(std::move(r));
    }
    finalize_report(rep);
    return rep;
}

} // namespace calibseg
