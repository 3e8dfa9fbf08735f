#include "calibseg/distlambda.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace calibseg {

namespace {

constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max();

// Lower envelope of the parabolas y(x) = (x - i)^2 + f[i] over valid sites,
// sampled at integer x in [0, n). Intersections are compared as exact
// rationals (num/den with den > 0) via cross-multiplication, and the output
// values are recomputed in int64, so the result is integer-exact.
void envelope_1d(const std::int64_t* f, int n, std::int64_t* d) {
    static thread_local std::vector<int> site;
    static thread_local std::vector<std::int64_t> znum, zden;
    site.assign(static_cast<std::size_t>(n) + 1, 0);
    znum.assign(static_cast<std::size_t>(n) + 1, 0);
    zden.assign(static_cast<std::size_t>(n) + 1, 0);

    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        while (k >= 0) {
            const int p = site[static_cast<std::size_t>(k)];
            // intersection of parabolas rooted at p and q (q > p)
            const std::int64_t num = f[q] + static_cast<std::int64_t>(q) * q - f[p] -
                                     static_cast<std::int64_t>(p) * p;
            const std::int64_t den = 2ll * (q - p);
            // pop while the new intersection is at or left of the previous one
            const bool pop = k == 0 ? false
                                    : num * zden[static_cast<std::size_t>(k)] <=
                                          znum[static_cast<std::size_t>(k)] * den;
            if (!pop) {
                ++k;
                site[static_cast<std::size_t>(k)] = q;
                znum[static_cast<std::size_t>(k)] = num;
                zden[static_cast<std::size_t>(k)] = den;
                break;
            }
            --k;
        }
        if (k < 0) {
            k = 0;
            site[0] = q;
            znum[0] = std::numeric_limits<std::int64_t>::min();
            zden[0] = 1;
        }
    }
    if (k < 0) {
        std::fill_n(d, n, kInf);
        return;
    }
    int j = 0;
    for (int x = 0; x < n; ++x) {
        // advance while the next breakpoint is at or before x
        while (j < k && znum[static_cast<std::size_t>(j + 1)] <=
                            static_cast<std::int64_t>(x) * zden[static_cast<std::size_t>(j + 1)])
            ++j;
        const std::int64_t dx = x - site[static_cast<std::size_t>(j)];
        d[x] = dx * dx + f[site[static_cast<std::size_t>(j)]];
    }
}

} // namespace

std::vector<std::int64_t> edt_sq_to_set(const std::vector<std::uint8_t>& mask, int h, int w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("edt: image extents must be positive");
    if (mask.size() != static_cast<std::size_t>(h) * w)
        throw std::invalid_argument("edt: mask size does not match extents");

    // pass 1: per column, squared distance to the nearest set pixel in that column
    std::vector<std::int64_t> g(static_cast<std::size_t>(h) * w, kInf);
    for (int x = 0; x < w; ++x) {
        int last = -1;
        for (int y = 0; y < h; ++y) {
            if (mask[static_cast<std::size_t>(y) * w + x]) last = y;
            if (last >= 0) {
                const std::int64_t dy = y - last;
                g[static_cast<std::size_t>(y) * w + x] = dy * dy;
            }
        }
        last = -1;
        for (int y = h - 1; y >= 0; --y) {
            if (mask[static_cast<std::size_t>(y) * w + x]) last = y;
            if (last >= 0) {
                const std::int64_t dy = last - y;
                auto& cell = g[static_cast<std::size_t>(y) * w + x];
                cell = std::min(cell, dy * dy);
            }
        }
    }

    // pass 2: per row, lower envelope over columns
    std::vector<std::int64_t> d(static_cast<std::size_t>(h) * w, kInf);
    std::vector<std::int64_t> frow(static_cast<std::size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) frow[static_cast<std::size_t>(x)] = g[static_cast<std::size_t>(y) * w + x];
        envelope_1d(frow.data(), w, d.data() + static_cast<std::size_t>(y) * w);
    }
    return d;
}

DistanceMap edt_unsigned(const std::vector<std::uint8_t>& mask, int h, int w) {
    std::vector<std::uint8_t> inverse(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) inverse[i] = mask[i] ? 0 : 1;
    const auto d_to_set = edt_sq_to_set(mask, h, w);
    const auto d_to_clear = edt_sq_to_set(inverse, h, w);

    DistanceMap out{h, w, std::vector<double>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const std::int64_t sq = mask[i] ? d_to_clear[i] : d_to_set[i];
        out.r[i] = sq == kInf ? std::numeric_limits<double>::infinity()
                              : std::sqrt(static_cast<double>(sq));
    }
    return out;
}

DistanceMap boundary_distance(const LabelMap& labels, int num_classes) {
    if (num_classes < 2) throw std::invalid_argument("boundary_distance: need at least 2 classes");
    if (labels.h <= 0 || labels.w <= 0 ||
        labels.v.size() != static_cast<std::size_t>(labels.h) * labels.w)
        throw std::invalid_argument("boundary_distance: malformed label map");
    for (std::uint8_t c : labels.v)
        if (c < 1 || c > num_classes)
            throw std::invalid_argument("boundary_distance: label " + std::to_string(c) +
                                        " outside {1.." + std::to_string(num_classes) + "}");

    DistanceMap out{labels.h, labels.w,
                    std::vector<double>(labels.v.size(), std::numeric_limits<double>::infinity())};
    std::vector<std::uint8_t> mask(labels.v.size());
    for (int c = 2; c <= num_classes; ++c) {
        bool any = false, all = true;
        for (std::size_t i = 0; i < labels.v.size(); ++i) {
            mask[i] = labels.v[i] == c ? 1 : 0;
            any |= mask[i] != 0;
            all &= mask[i] != 0;
        }
        if (!any || all) continue; // constant binarization has no interface
        const auto dm = edt_unsigned(mask, labels.h, labels.w);
        for (std::size_t i = 0; i < out.r.size(); ++i) out.r[i] = std::min(out.r[i], dm.r[i] - 0.5);
    }
    return out;
}

LambdaMap lambda_map(const DistanceMap& r, const LambdaParams& params) {
    if (!(params.lambda_min >= 0.0) || !(params.lambda_max >= params.lambda_min) ||
        !(params.radius > 0.0))
        throw std::invalid_argument("lambda_map: need 0 <= lambda_min <= lambda_max and radius > 0");
    LambdaMap out{r.h, r.w, std::vector<double>(r.r.size())};
    for (std::size_t i = 0; i < r.r.size(); ++i) {
        const double hinge = std::max(params.radius - r.r[i], 0.0);
        out.v[i] = params.lambda_max * (hinge / params.radius) + params.lambda_min;
    }
    return out;
}

} // namespace calibseg
