#pragma once

#include <cstdint>
#include <vector>

namespace calibseg {

// Hard per-pixel class assignment. Class ids are 1-based; id 1 is background.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v; // row-major, values in {1..C}

    std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline LabelMap make_label_map(int h, int w, std::uint8_t fill = 1) {
    return LabelMap{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, fill)};
}

// Per-pixel class distribution, stored as C planes of H*W floats.
struct SoftLabelMap {
    int c = 0, h = 0, w = 0;
    std::vector<float> p; // [C,H,W]

    float at(int ch, int y, int x) const {
        return p[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    float& at(int ch, int y, int x) {
        return p[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
};

inline SoftLabelMap make_soft_label_map(int c, int h, int w) {
    return SoftLabelMap{c, h, w, std::vector<float>(static_cast<std::size_t>(c) * h * w, 0.0f)};
}

// Most likely class per pixel; ties break toward the lower class id.
inline LabelMap argmax_labels(const SoftLabelMap& s) {
    LabelMap out = make_label_map(s.h, s.w);
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            int best = 0;
            float bv = s.at(0, y, x);
            for (int ch = 1; ch < s.c; ++ch)
                if (s.at(ch, y, x) > bv) {
                    bv = s.at(ch, y, x);
                    best = ch;
                }
            out.at(y, x) = static_cast<std::uint8_t>(best + 1);
        }
    return out;
}

} // namespace calibseg
