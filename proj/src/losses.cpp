#include "calibseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace calibseg {

namespace {

struct Dims {
    int n, c, h, w;
    std::size_t pixels() const { return static_cast<std::size_t>(n) * h * w; }
};

Dims logits_dims(const Tensor& t, const char* who) {
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    throw std::invalid_argument(std::string(who) + ": logits must be [C,H,W] or [N,C,H,W], got " +
                                shape_str(t.shape()));
}

Tensor map_tensor(const Dims& d) {
    if (d.n == 1) return Tensor::zeros({d.h, d.w});
    return Tensor::zeros({d.n, d.h, d.w});
}

void check_labels(const Dims& d, std::span<const LabelMap> labels, const char* who) {
    if (static_cast<int>(labels.size()) != d.n)
        throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(d.n) +
                                    " label maps, got " + std::to_string(labels.size()));
    for (const auto& lm : labels) {
        if (lm.h != d.h || lm.w != d.w)
            throw std::invalid_argument(std::string(who) + ": label map size mismatch");
        for (std::uint8_t v : lm.v)
            if (v < 1 || v > d.c)
                throw std::invalid_argument(std::string(who) + ": label id " + std::to_string(v) +
                                            " outside [1," + std::to_string(d.c) + "]");
    }
}

// log sum exp over the class axis at one pixel, max-stabilized
double pixel_lse(const float* z, int c, std::size_t stride) {
    double m = z[0];
    for (int k = 1; k < c; ++k) m = std::max(m, static_cast<double>(z[k * stride]));
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += std::exp(static_cast<double>(z[k * stride]) - m);
    return m + std::log(s);
}

void pixel_softmax(const float* z, int c, std::size_t stride, double* out) {
    double m = z[0];
    for (int k = 1; k < c; ++k) m = std::max(m, static_cast<double>(z[k * stride]));
    double s = 0.0;
    for (int k = 0; k < c; ++k) {
        out[k] = std::exp(static_cast<double>(z[k * stride]) - m);
        s += out[k];
    }
    for (int k = 0; k < c; ++k) out[k] /= s;
}

void check_valid(const Dims& d, std::span<const std::uint8_t> valid, const char* who) {
    if (!valid.empty() && valid.size() != d.pixels())
        throw std::invalid_argument(std::string(who) + ": valid mask size mismatch");
}

ScalarMap cross_entropy_impl(Tape& tape, const Tensor& logits, std::span<const LabelMap> labels,
                             std::span<const std::uint8_t> valid) {
    const Dims d = logits_dims(logits, "cross_entropy");
    check_labels(d, labels, "cross_entropy");
    check_valid(d, valid, "cross_entropy");

    Tensor map = map_tensor(d);
    const auto z = logits.data();
    auto mp = map.data();
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t sample = plane * d.c;
    std::size_t n_used = 0;
    double acc = 0.0;
    for (int i = 0; i < d.n; ++i) {
        const LabelMap& lm = labels[i];
        for (std::size_t j = 0; j < plane; ++j) {
            const float* base = z.data() + i * sample + j;
            const double lse = pixel_lse(base, d.c, plane);
            const int y = lm.v[j] - 1;
            const double loss = lse - static_cast<double>(base[y * plane]);
            mp[i * plane + j] = static_cast<float>(loss);
            if (valid.empty() || valid[i * plane + j]) {
                acc += loss;
                ++n_used;
            }
        }
    }
    const double inv = n_used ? 1.0 / static_cast<double>(n_used) : 0.0;
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv), logits.requires_grad());

    if (logits.requires_grad() && n_used) {
        Tensor zh = logits, oh = out;
        std::vector<LabelMap> lab(labels.begin(), labels.end());
        std::vector<std::uint8_t> vm(valid.begin(), valid.end());
        tape.record([zh, oh, lab, vm, d, plane, sample, inv]() mutable {
            const float g = oh.grad()[0];
            if (g == 0.0f) return;
            auto zg = zh.grad();
            const auto zv = zh.data();
            std::vector<double> sm(d.c);
            const double s = static_cast<double>(g) * inv;
            for (int i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < plane; ++j) {
                    if (!vm.empty() && !vm[i * plane + j]) continue;
                    const float* base = zv.data() + i * sample + j;
                    pixel_softmax(base, d.c, plane, sm.data());
                    const int y = lab[i].v[j] - 1;
                    for (int k = 0; k < d.c; ++k) {
                        double gk = sm[k];
                        if (k == y) gk -= 1.0;
                        zg[i * sample + k * plane + j] += static_cast<float>(s * gk);
                    }
                }
            }
        });
    }
    return {out, map};
}

ScalarMap cross_entropy_soft_impl(Tape& tape, const Tensor& logits,
                                  std::span<const SoftLabelMap> targets,
                                  std::span<const std::uint8_t> valid) {
    const Dims d = logits_dims(logits, "cross_entropy_soft");
    if (static_cast<int>(targets.size()) != d.n)
        throw std::invalid_argument("cross_entropy_soft: target count mismatch");
    for (const auto& t : targets)
        if (t.c != d.c || t.h != d.h || t.w != d.w)
            throw std::invalid_argument("cross_entropy_soft: target shape mismatch");
    check_valid(d, valid, "cross_entropy_soft");

    Tensor map = map_tensor(d);
    const auto z = logits.data();
    auto mp = map.data();
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t sample = plane * d.c;
    std::size_t n_used = 0;
    double acc = 0.0;
    for (int i = 0; i < d.n; ++i) {
        const SoftLabelMap& t = targets[i];
        for (std::size_t j = 0; j < plane; ++j) {
            const float* base = z.data() + i * sample + j;
            const double lse = pixel_lse(base, d.c, plane);
            double loss = 0.0;
            for (int k = 0; k < d.c; ++k) {
                const double tk = t.p[k * plane + j];
                loss += tk * (lse - static_cast<double>(base[k * plane]));
            }
            mp[i * plane + j] = static_cast<float>(loss);
            if (valid.empty() || valid[i * plane + j]) {
                acc += loss;
                ++n_used;
            }
        }
    }
    const double inv = n_used ? 1.0 / static_cast<double>(n_used) : 0.0;
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv), logits.requires_grad());

    if (logits.requires_grad() && n_used) {
        Tensor zh = logits, oh = out;
        std::vector<SoftLabelMap> tgt(targets.begin(), targets.end());
        std::vector<std::uint8_t> vm(valid.begin(), valid.end());
        tape.record([zh, oh, tgt, vm, d, plane, sample, inv]() mutable {
            const float g = oh.grad()[0];
            if (g == 0.0f) return;
            auto zg = zh.grad();
            const auto zv = zh.data();
            std::vector<double> sm(d.c);
            const double s = static_cast<double>(g) * inv;
            for (int i = 0; i < d.n; ++i) {
                const SoftLabelMap& t = tgt[i];
                for (std::size_t j = 0; j < plane; ++j) {
                    if (!vm.empty() && !vm[i * plane + j]) continue;
                    const float* base = zv.data() + i * sample + j;
                    pixel_softmax(base, d.c, plane, sm.data());
                    double tsum = 0.0;
                    for (int k = 0; k < d.c; ++k) tsum += t.p[k * plane + j];
                    for (int k = 0; k < d.c; ++k) {
                        const double gk = sm[k] * tsum - static_cast<double>(t.p[k * plane + j]);
                        zg[i * sample + k * plane + j] += static_cast<float>(s * gk);
                    }
                }
            }
        });
    }
    return {out, map};
}

// shared core for unit-weight and per-pixel-weight consistency
Tensor consistency_impl(Tape& tape, const Tensor& a, const Tensor& b,
                        std::span<const double> weights, std::span<const std::uint8_t> valid,
                        Tensor* out_map, const char* who) {
    const Dims d = logits_dims(a, who);
    if (!b.shape_equals(a.shape()))
        throw std::invalid_argument(std::string(who) + ": branch shapes differ, " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t px = d.pixels();
    if (valid.size() != px)
        throw std::invalid_argument(std::string(who) + ": valid mask size mismatch");
    if (!weights.empty() && weights.size() != px)
        throw std::invalid_argument(std::string(who) + ": weight size mismatch");

    Tensor map = map_tensor(d);
    const auto av = a.data();
    const auto bv = b.data();
    auto mp = map.data();
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t sample = plane * d.c;
    std::size_t n_valid = 0;
    double acc = 0.0;
    for (int i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < plane; ++j) {
            const std::size_t pj = i * plane + j;
            if (!valid[pj]) continue;
            ++n_valid;
            double dsum = 0.0;
            for (int k = 0; k < d.c; ++k) {
                const std::size_t idx = i * sample + k * plane + j;
                const double diff = static_cast<double>(av[idx]) - static_cast<double>(bv[idx]);
                dsum += diff * diff;
            }
            mp[pj] = static_cast<float>(dsum);
            acc += weights.empty() ? dsum : weights[pj] * dsum;
        }
    }
    const bool needs_grad = a.requires_grad() || b.requires_grad();
    const double inv = n_valid ? 1.0 / static_cast<double>(n_valid) : 0.0;
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv), needs_grad);
    if (out_map) *out_map = map;

    if (needs_grad && n_valid) {
        Tensor ah = a, bh = b, oh = out;
        std::vector<double> w(weights.begin(), weights.end());
        std::vector<std::uint8_t> vm(valid.begin(), valid.end());
        tape.record([ah, bh, oh, w, vm, d, plane, sample, inv]() mutable {
            const float g = oh.grad()[0];
            if (g == 0.0f) return;
            const auto av = ah.data();
            const auto bv = bh.data();
            for (int i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < plane; ++j) {
                    const std::size_t pj = i * plane + j;
                    if (!vm[pj]) continue;
                    const double coef = 2.0 * static_cast<double>(g) * inv * (w.empty() ? 1.0 : w[pj]);
                    for (int k = 0; k < d.c; ++k) {
                        const std::size_t idx = i * sample + k * plane + j;
                        const float dd =
                            static_cast<float>(coef * (static_cast<double>(av[idx]) -
                                                       static_cast<double>(bv[idx])));
                        if (ah.requires_grad()) ah.grad()[idx] += dd;
                        if (bh.requires_grad()) bh.grad()[idx] -= dd;
                    }
                }
            }
        });
    }
    return out;
}

} // namespace

ScalarMap cross_entropy(Tape& tape, const Tensor& logits, const LabelMap& labels) {
    return cross_entropy_impl(tape, logits, std::span<const LabelMap>(&labels, 1), {});
}

ScalarMap cross_entropy(Tape& tape, const Tensor& logits, std::span<const LabelMap> labels,
                        std::span<const std::uint8_t> valid) {
    return cross_entropy_impl(tape, logits, labels, valid);
}

ScalarMap cross_entropy_soft(Tape& tape, const Tensor& logits, const SoftLabelMap& targets) {
    return cross_entropy_soft_impl(tape, logits, std::span<const SoftLabelMap>(&targets, 1), {});
}

ScalarMap cross_entropy_soft(Tape& tape, const Tensor& logits,
                             std::span<const SoftLabelMap> targets,
                             std::span<const std::uint8_t> valid) {
    return cross_entropy_soft_impl(tape, logits, targets, valid);
}

ScalarMap consistency_sq(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                         std::span<const std::uint8_t> valid) {
    Tensor map;
    Tensor scalar = consistency_impl(tape, logits_a, logits_b, {}, valid, &map, "consistency_sq");
    return {scalar, map};
}

Tensor consistency_weighted(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                            std::span<const double> weights, std::span<const std::uint8_t> valid,
                            Tensor* unweighted_map) {
    if (weights.empty())
        throw std::invalid_argument("consistency_weighted: weights are required");
    return consistency_impl(tape, logits_a, logits_b, weights, valid, unweighted_map,
                            "consistency_weighted");
}

PixelLossMaps cr_total(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                       const LabelMap& labels, float lambda, std::span<const std::uint8_t> valid) {
    if (!(lambda >= 0.0f))
        throw std::invalid_argument("cr_total: lambda must be >= 0");
    const Dims d = logits_dims(logits_a, "cr_total");

    PixelLossMaps out;
    out.valid_mask.assign(valid.begin(), valid.end());
    auto [ls_scalar, ls_map] = cross_entropy(tape, logits_a, labels);
    out.ls = ls_map;
    if (lambda == 0.0f) {
        out.lc = Tensor::zeros({d.h, d.w});
        out.total = ls_scalar;
        return out;
    }
    auto [lc_scalar, lc_map] = consistency_sq(tape, logits_a, logits_b, valid);
    out.lc = lc_map;
    out.total = add(tape, ls_scalar, scale(tape, lc_scalar, lambda));
    return out;
}

PixelLossMaps bwcr_total(Tape& tape, const Tensor& logits_a, const Tensor& logits_b,
                         const LabelMap& labels, const LambdaMap& lam,
                         std::span<const std::uint8_t> valid) {
    const Dims d = logits_dims(logits_a, "bwcr_total");
    if (d.n != 1)
        throw std::invalid_argument("bwcr_total: expects single-sample logits [C,H,W]");
    if (lam.h != d.h || lam.w != d.w)
        throw std::invalid_argument("bwcr_total: lambda map size mismatch");

    PixelLossMaps out;
    out.valid_mask.assign(valid.begin(), valid.end());
    auto [ls_scalar, ls_map] = cross_entropy(tape, logits_a, labels);
    out.ls = ls_map;
    Tensor lc_map;
    Tensor wlc = consistency_weighted(tape, logits_a, logits_b, lam.v, valid, &lc_map);
    out.lc = lc_map;
    out.total = add(tape, ls_scalar, wlc);
    return out;
}

SoftLabelMap svls_targets(const LabelMap& labels, int num_classes, double sigma) {
    if (num_classes < 2) throw std::invalid_argument("svls_targets: need at least 2 classes");
    if (!(sigma > 0.0)) throw std::invalid_argument("svls_targets: sigma must be > 0");
    for (std::uint8_t v : labels.v)
        if (v < 1 || v > num_classes)
            throw std::invalid_argument("svls_targets: label id outside class range");

    const int h = labels.h, w = labels.w;
    // 3x3 Gaussian normalized to unit mass
    double k[3][3];
    double ksum = 0.0;
    const double inv2s2 = 0.5 / (sigma * sigma);
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            k[dy + 1][dx + 1] = std::exp(-(dx * dx + dy * dy) * inv2s2);
            ksum += k[dy + 1][dx + 1];
        }
    for (auto& row : k)
        for (double& v : row) v /= ksum;

    SoftLabelMap out = make_soft_label_map(num_classes, h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> acc(num_classes);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::fill(acc.begin(), acc.end(), 0.0);
            double total = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= h) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= w) continue;
                    const double kv = k[dy + 1][dx + 1];
                    acc[labels.v[yy * static_cast<std::size_t>(w) + xx] - 1] += kv;
                    total += kv;
                }
            }
            for (int c = 0; c < num_classes; ++c)
                out.p[c * plane + y * static_cast<std::size_t>(w) + x] =
                    static_cast<float>(acc[c] / total);
        }
    }
    return out;
}

Tensor mls_penalty(Tape& tape, const Tensor& logits, float margin) {
    if (!(margin > 0.0f)) throw std::invalid_argument("mls_penalty: margin must be > 0");
    const Dims d = logits_dims(logits, "mls_penalty");

    const auto z = logits.data();
    const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t sample = plane * d.c;
    double acc = 0.0;
    for (int i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < plane; ++j) {
            const float* base = z.data() + i * sample + j;
            double m = base[0];
            for (int c = 1; c < d.c; ++c) m = std::max(m, static_cast<double>(base[c * plane]));
            for (int c = 0; c < d.c; ++c) {
                const double gap = m - static_cast<double>(base[c * plane]) - margin;
                if (gap > 0.0) acc += gap;
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(d.pixels());
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv), logits.requires_grad());

    if (logits.requires_grad()) {
        Tensor zh = logits, oh = out;
        const double mg = margin;
        tape.record([zh, oh, d, plane, sample, inv, mg]() mutable {
            const float g = oh.grad()[0];
            if (g == 0.0f) return;
            auto zg = zh.grad();
            const auto zv = zh.data();
            const float s = static_cast<float>(static_cast<double>(g) * inv);
            for (int i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < plane; ++j) {
                    const float* base = zv.data() + i * sample + j;
                    int am = 0;
                    double m = base[0];
                    for (int c = 1; c < d.c; ++c) {
                        const double v = base[c * plane];
                        if (v > m) { m = v; am = c; }
                    }
                    for (int c = 0; c < d.c; ++c) {
                        if (m - static_cast<double>(base[c * plane]) - mg > 0.0) {
                            zg[i * sample + c * plane + j] -= s;
                            zg[i * sample + am * plane + j] += s;
                        }
                    }
                }
            }
        });
    }
    return out;
}

LossLandscape loss_landscape(double z_min, double z_max, double zp_min, double zp_max, int grid_n,
                             double lambda, int label_class) {
    if (grid_n < 2) throw std::invalid_argument("loss_landscape: grid_n must be >= 2");
    if (!(z_min < z_max) || !(zp_min < zp_max))
        throw std::invalid_argument("loss_landscape: empty range");
    if (!(lambda >= 0.0)) throw std::invalid_argument("loss_landscape: lambda must be >= 0");
    if (label_class != 1 && label_class != 2)
        throw std::invalid_argument("loss_landscape: label_class must be 1 or 2");

    // -log sigmoid(z) evaluated without overflow
    auto softplus = [](double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); };

    LossLandscape out;
    out.n = grid_n;
    out.z.resize(grid_n);
    out.zp.resize(grid_n);
    for (int i = 0; i < grid_n; ++i) {
        const double t = static_cast<double>(i) / (grid_n - 1);
        out.z[i] = z_min + t * (z_max - z_min);
        out.zp[i] = zp_min + t * (zp_max - zp_min);
    }
    const std::size_t nn = static_cast<std::size_t>(grid_n) * grid_n;
    out.ls.resize(nn);
    out.lc.resize(nn);
    out.total.resize(nn);
    for (int i = 0; i < grid_n; ++i) {
        const double z = out.z[i];
        const double ls = label_class == 2 ? softplus(-z) : softplus(z);
        for (int j = 0; j < grid_n; ++j) {
            const double diff = z - out.zp[j];
            const double lc = diff * diff;
            const std::size_t idx = static_cast<std::size_t>(i) * grid_n + j;
            out.ls[idx] = ls;
            out.lc[idx] = lc;
            out.total[idx] = ls + lambda * lc;
        }
    }
    return out;
}

} // namespace calibseg
