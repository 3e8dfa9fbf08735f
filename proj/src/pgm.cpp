#include "calibseg/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

namespace calibseg {

void write_pgm(const Tensor& t, const std::filesystem::path& path) {
    if (!t.defined()) throw std::invalid_argument("write_pgm: undefined tensor");
    int h = 0, w = 0;
    if (t.rank() == 2) {
        h = t.dim(0);
        w = t.dim(1);
    } else if (t.rank() == 3 && t.dim(0) == 1) {
        h = t.dim(1);
        w = t.dim(2);
    } else {
        throw std::invalid_argument("write_pgm: want [H,W] or [1,H,W], got " +
                                    shape_str(t.shape()));
    }

    float lo = 0.0f, hi = 0.0f;
    bool seen = false;
    for (float v : t.data()) {
        if (!std::isfinite(v)) continue;
        if (!seen) {
            lo = hi = v;
            seen = true;
        } else {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    const float gain = seen && hi > lo ? 255.0f / (hi - lo) : 0.0f;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P5\n" << w << " " << h << "\n255\n";
    for (float v : t.data()) {
        float u = (v - lo) * gain;
        if (!(u > 0.0f)) u = 0.0f;
        if (u > 255.0f) u = 255.0f;
        f.put(static_cast<char>(static_cast<unsigned char>(u + 0.5f)));
    }
    if (!f) throw std::runtime_error("cannot write " + path.string());
}

namespace {

// next whitespace-delimited header token, skipping '#' comment lines
std::string pgm_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

int pgm_int(std::istream& is, const char* what) {
    const std::string tok = pgm_token(is);
    std::size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(tok, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (tok.empty() || pos != tok.size() || v <= 0)
        throw std::runtime_error(std::string("read_pgm_labels: bad ") + what);
    return v;
}

} // namespace

LabelMap read_pgm_labels(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    if (pgm_token(f) != "P5") throw std::runtime_error("read_pgm_labels: not a binary PGM");
    const int w = pgm_int(f, "width");
    const int h = pgm_int(f, "height");
    const int maxval = pgm_int(f, "maxval");
    if (maxval > 255) throw std::runtime_error("read_pgm_labels: 16-bit PGM not supported");

    std::vector<char> raw(static_cast<std::size_t>(h) * w);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error("read_pgm_labels: truncated pixel data");

    std::map<unsigned char, std::uint8_t> ids;
    for (char c : raw) ids.emplace(static_cast<unsigned char>(c), 0);
    if (ids.size() > 255) throw std::runtime_error("read_pgm_labels: more than 255 gray levels");
    std::uint8_t next = 1;
    for (auto& [gray, id] : ids) id = next++;

    LabelMap out = make_label_map(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i)
        out.v[i] = ids[static_cast<unsigned char>(raw[i])];
    return out;
}

} // namespace calibseg
