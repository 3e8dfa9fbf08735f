#include "calibseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace calibseg {

namespace {

struct ProbView {
    const float* p;
    int c, h, w;
    std::size_t plane;
};

ProbView check_input(const CalibrationInput& in, const char* who) {
    const Tensor& t = in.probs;
    if (!t.defined() || t.rank() != 3)
        throw std::invalid_argument(std::string(who) + ": probs must be [C,H,W]");
    const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    if (c < 2) throw std::invalid_argument(std::string(who) + ": need at least 2 classes");
    if (in.labels.h != h || in.labels.w != w)
        throw std::invalid_argument(std::string(who) + ": label map size mismatch");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const float* p = t.data().data();
    for (std::size_t j = 0; j < plane; ++j) {
        double s = 0.0;
        for (int k = 0; k < c; ++k) {
            const float v = p[k * plane + j];
            if (!(v >= 0.0f) || v > 1.0f + 1e-6f)
                throw std::invalid_argument(std::string(who) + ": probability outside [0,1]");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-4)
            throw std::invalid_argument(std::string(who) + ": probabilities do not sum to 1");
        const std::uint8_t y = in.labels.v[j];
        if (y < 1 || y > c) throw std::invalid_argument(std::string(who) + ": label id out of range");
    }
    return {p, c, h, w, plane};
}

} // namespace

double dice(const LabelMap& pred, const LabelMap& gt, int cls) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("dice: label map sizes differ");
    std::size_t np = 0, ng = 0, both = 0;
    for (std::size_t j = 0; j < pred.v.size(); ++j) {
        const bool a = pred.v[j] == cls, b = gt.v[j] == cls;
        np += a;
        ng += b;
        both += a && b;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

double ece(const CalibrationInput& input, int n_bins) {
    if (n_bins < 1) throw std::invalid_argument("ece: need at least one bin");
    const ProbView v = check_input(input, "ece");

    std::vector<std::size_t> count(n_bins, 0), correct(n_bins, 0);
    std::vector<double> conf_sum(n_bins, 0.0);
    for (std::size_t j = 0; j < v.plane; ++j) {
        int am = 0;
        float best = v.p[j];
        for (int k = 1; k < v.c; ++k) {
            const float pk = v.p[k * v.plane + j];
            if (pk > best) { best = pk; am = k; }
        }
        int bin = static_cast<int>(std::ceil(static_cast<double>(best) * n_bins)) - 1;
        bin = std::clamp(bin, 0, n_bins - 1);
        ++count[bin];
        conf_sum[bin] += best;
        correct[bin] += (am + 1 == input.labels.v[j]);
    }
    double out = 0.0;
    for (int b = 0; b < n_bins; ++b) {
        if (!count[b]) continue;
        const double acc = static_cast<double>(correct[b]) / count[b];
        const double conf = conf_sum[b] / count[b];
        out += (static_cast<double>(count[b]) / static_cast<double>(v.plane)) * std::abs(acc - conf);
    }
    return out;
}

TaceResult tace(const CalibrationInput& input, int n_bins, double threshold) {
    if (n_bins < 1) throw std::invalid_argument("tace: need at least one bin");
    const ProbView v = check_input(input, "tace");

    double acc = 0.0;
    std::size_t cells = 0;
    std::vector<std::pair<float, std::size_t>> kept;
    for (int c = 0; c < v.c; ++c) {
        kept.clear();
        for (std::size_t j = 0; j < v.plane; ++j) {
            const float pc = v.p[c * v.plane + j];
            if (pc >= threshold) kept.emplace_back(pc, j);
        }
        if (kept.empty()) continue;
        std::sort(kept.begin(), kept.end());

        const std::size_t k = kept.size();
        const std::size_t base = k / n_bins, rem = k % n_bins;
        std::size_t pos = 0;
        for (int b = 0; b < n_bins; ++b) {
            const std::size_t sz = base + (static_cast<std::size_t>(b) < rem ? 1 : 0);
            if (!sz) break;
            double psum = 0.0;
            std::size_t hits = 0;
            for (std::size_t i = 0; i < sz; ++i, ++pos) {
                psum += kept[pos].first;
                hits += (input.labels.v[kept[pos].second] == c + 1);
            }
            acc += std::abs(static_cast<double>(hits) / sz - psum / sz);
            ++cells;
        }
    }
    if (!cells) return {0.0, true};
    return {acc / static_cast<double>(cells), false};
}

double paired_permutation_test(std::span<const double> a, std::span<const double> b,
                               int n_resamples, Rng& rng) {
    if (a.size() != b.size())
        throw std::invalid_argument("paired_permutation_test: length mismatch");
    if (a.empty()) throw std::invalid_argument("paired_permutation_test: empty input");
    if (n_resamples < 1) throw std::invalid_argument("paired_permutation_test: need resamples");

    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double t = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);

    std::size_t hits = 0;
    for (int r = 0; r < n_resamples; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += rng.bernoulli(0.5) ? d[i] : -d[i];
        if (std::abs(s / static_cast<double>(n)) >= std::abs(t)) ++hits;
    }
    return static_cast<double>(1 + hits) / static_cast<double>(n_resamples + 1);
}

Aggregate aggregate(std::span<const double> xs) {
    if (xs.empty()) throw std::invalid_argument("aggregate: empty input");
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (xs.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

ImageMetrics evaluate_image(const CalibrationInput& input) {
    const ProbView v = check_input(input, "evaluate_image");
    LabelMap pred = make_label_map(v.h, v.w);
    for (std::size_t j = 0; j < v.plane; ++j) {
        int am = 0;
        float best = v.p[j];
        for (int k = 1; k < v.c; ++k) {
            const float pk = v.p[k * v.plane + j];
            if (pk > best) { best = pk; am = k; }
        }
        pred.v[j] = static_cast<std::uint8_t>(am + 1);
    }

    ImageMetrics out;
    for (int c = 2; c <= v.c; ++c) out.dice_per_class.push_back(dice(pred, input.labels, c));
    out.dice_mean = std::accumulate(out.dice_per_class.begin(), out.dice_per_class.end(), 0.0) /
                    static_cast<double>(out.dice_per_class.size());
    out.ece = ece(input);
    const TaceResult tr = tace(input);
    out.tace = tr.value;
    out.tace_empty = tr.empty;
    return out;
}

void finalize_report(MetricsReport& report) {
    if (report.rows.empty()) throw std::invalid_argument("finalize_report: no rows");
    std::vector<double> d, e, t;
    for (const auto& r : report.rows) {
        d.push_back(r.dice_mean);
        e.push_back(r.ece);
        t.push_back(r.tace);
    }
    report.dice_agg = aggregate(d);
    report.ece_agg = aggregate(e);
    report.tace_agg = aggregate(t);
}

} // namespace calibseg
