#include "calibseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

#include "calibseg/tensor_io.hpp"
#include "calibseg/transforms.hpp"

namespace calibseg {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string canonical(const SceneSpec& s) {
    std::string out = "h=" + std::to_string(s.height) + ";w=" + std::to_string(s.width) +
                      ";fg=" + std::to_string(s.num_fg_classes) +
                      ";shapes=" + std::to_string(s.min_shapes) + "-" + std::to_string(s.max_shapes) +
                      ";contrast=";
    for (std::size_t i = 0; i < s.contrasts.size(); ++i) {
        if (i) out += ",";
        out += fmt_double(s.contrasts[i]);
    }
    out += ";blur=" + fmt_double(s.blur_sigma_min) + "," + fmt_double(s.blur_sigma_max);
    out += ";noise=" + fmt_double(s.noise_sigma_min) + "," + fmt_double(s.noise_sigma_max);
    out += ";jitter=" + fmt_double(s.jitter_px);
    return out;
}

// smooth displacement field: coarse uniform grid, bilinearly upsampled
std::vector<float> jitter_field(Rng& rng, int h, int w, double amp) {
    const int gx = std::max(2, w / 16 + 1);
    const int gy = std::max(2, h / 16 + 1);
    std::vector<double> nodes(static_cast<std::size_t>(gx) * gy);
    for (auto& v : nodes) v = rng.uniform(-amp, amp);

    std::vector<float> field(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        const double v = h == 1 ? 0.0 : static_cast<double>(y) * (gy - 1) / (h - 1);
        const int y0 = std::min(static_cast<int>(v), gy - 2);
        const double fy = v - y0;
        for (int x = 0; x < w; ++x) {
            const double u = w == 1 ? 0.0 : static_cast<double>(x) * (gx - 1) / (w - 1);
            const int x0 = std::min(static_cast<int>(u), gx - 2);
            const double fx = u - x0;
            const double top = (1.0 - fx) * nodes[static_cast<std::size_t>(y0) * gx + x0] +
                               fx * nodes[static_cast<std::size_t>(y0) * gx + x0 + 1];
            const double bot = (1.0 - fx) * nodes[static_cast<std::size_t>(y0 + 1) * gx + x0] +
                               fx * nodes[static_cast<std::size_t>(y0 + 1) * gx + x0 + 1];
            field[static_cast<std::size_t>(y) * w + x] = static_cast<float>((1.0 - fy) * top + fy * bot);
        }
    }
    return field;
}

float sample_plane(const float* plane, int h, int w, double sx, double sy) {
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    const int x0 = std::min(static_cast<int>(sx), w - 1);
    const int y0 = std::min(static_cast<int>(sy), h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = sx - x0, fy = sy - y0;
    const double top = (1.0 - fx) * plane[static_cast<std::size_t>(y0) * w + x0] +
                       fx * plane[static_cast<std::size_t>(y0) * w + x1];
    const double bot = (1.0 - fx) * plane[static_cast<std::size_t>(y1) * w + x0] +
                       fx * plane[static_cast<std::size_t>(y1) * w + x1];
    return static_cast<float>((1.0 - fy) * top + fy * bot);
}

const char* split_name(int id) {
    switch (id) {
        case 0: return "train";
        case 1: return "val";
        default: return "test";
    }
}

int split_id(const std::string& name) {
    if (name == "train") return 0;
    if (name == "val") return 1;
    if (name == "test") return 2;
    throw std::invalid_argument("unknown split: " + name);
}

} // namespace

void validate(const SceneSpec& spec) {
    if (spec.height < 8 || spec.width < 8)
        throw std::invalid_argument("SceneSpec: image too small");
    if (spec.num_fg_classes < 1)
        throw std::invalid_argument("SceneSpec: need at least one foreground class");
    if (spec.min_shapes < 1 || spec.max_shapes < spec.min_shapes)
        throw std::invalid_argument("SceneSpec: bad shape count range");
    if (static_cast<int>(spec.contrasts.size()) != spec.num_fg_classes + 1)
        throw std::invalid_argument("SceneSpec: need one contrast per class incl. background");
    for (double c : spec.contrasts)
        if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("SceneSpec: contrast outside [0,1]");
    for (std::size_t i = 0; i < spec.contrasts.size(); ++i)
        for (std::size_t j = i + 1; j < spec.contrasts.size(); ++j)
            if (std::abs(spec.contrasts[i] - spec.contrasts[j]) < 0.1)
                throw std::invalid_argument("SceneSpec: contrasts closer than 0.1");
    if (spec.blur_sigma_min < 0.0 || spec.blur_sigma_max < spec.blur_sigma_min)
        throw std::invalid_argument("SceneSpec: bad blur range");
    if (spec.noise_sigma_min < 0.0 || spec.noise_sigma_max < spec.noise_sigma_min)
        throw std::invalid_argument("SceneSpec: bad noise range");
    if (spec.jitter_px < 0.0) throw std::invalid_argument("SceneSpec: negative jitter");
}

std::uint64_t spec_hash(const SceneSpec& spec) {
    const std::string s = canonical(spec);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char b : s) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

Sample generate_sample(Rng& rng, const SceneSpec& spec) {
    validate(spec);
    const int h = spec.height, w = spec.width;
    const int classes = spec.num_fg_classes + 1;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double side = std::min(h, w);

    const double blur_sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max);
    const double noise_sigma = rng.uniform(spec.noise_sigma_min, spec.noise_sigma_max);

    LabelMap crisp = make_label_map(h, w, 1);
    for (int fg = 0; fg < spec.num_fg_classes; ++fg) {
        const int label = 2 + fg;
        const int count = spec.min_shapes + rng.uniform_int(spec.max_shapes - spec.min_shapes + 1);
        for (int e = 0; e < count; ++e) {
            const double cx = rng.uniform(0.25, 0.75) * w;
            const double cy = rng.uniform(0.25, 0.75) * h;
            const double sa = std::max(2.0, rng.uniform(0.08, 0.22) * side);
            const double sb = std::max(2.0, rng.uniform(0.08, 0.22) * side);
            const double th = rng.uniform(0.0, std::numbers::pi);
            const double ct = std::cos(th), st = std::sin(th);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    const double u = (dx * ct + dy * st) / sa;
                    const double v = (-dx * st + dy * ct) / sb;
                    if (u * u + v * v <= 1.0) crisp.v[static_cast<std::size_t>(y) * w + x] =
                        static_cast<std::uint8_t>(label);
                }
        }
    }

    SoftLabelMap soft = make_soft_label_map(classes, h, w);
    for (std::size_t j = 0; j < plane; ++j) soft.p[(crisp.v[j] - 1) * plane + j] = 1.0f;
    if (blur_sigma > 0.0) {
        std::vector<float> buf(plane);
        for (int c = 0; c < classes; ++c) {
            std::copy_n(soft.p.begin() + c * plane, plane, buf.begin());
            gaussian_blur_2d(buf, h, w, blur_sigma);
            std::copy_n(buf.begin(), plane, soft.p.begin() + c * plane);
        }
        for (std::size_t j = 0; j < plane; ++j) {
            double s = 0.0;
            for (int c = 0; c < classes; ++c) s += soft.p[c * plane + j];
            for (int c = 0; c < classes; ++c)
                soft.p[c * plane + j] = static_cast<float>(soft.p[c * plane + j] / s);
        }
    }

    Sample out;
    out.spec_digest = spec_hash(spec);
    out.image = Tensor::zeros({1, h, w});
    auto img = out.image.data();
    for (std::size_t j = 0; j < plane; ++j) {
        double v = 0.0;
        for (int c = 0; c < classes; ++c)
            v += spec.contrasts[static_cast<std::size_t>(c)] * soft.p[c * plane + j];
        v += noise_sigma * rng.normal();
        img[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

    const std::vector<float> fx = jitter_field(rng, h, w, spec.jitter_px);
    const std::vector<float> fy = jitter_field(rng, h, w, spec.jitter_px);
    SoftLabelMap displaced = make_soft_label_map(classes, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t j = static_cast<std::size_t>(y) * w + x;
            for (int c = 0; c < classes; ++c)
                displaced.p[c * plane + j] =
                    sample_plane(soft.p.data() + c * plane, h, w, x + fx[j], y + fy[j]);
        }
    out.hard_label = argmax_labels(displaced);
    out.soft_label = std::move(soft);
    return out;
}

void make_dataset(const std::filesystem::path& dir, std::uint64_t seed, const DatasetCounts& n,
                  const SceneSpec& spec, bool force) {
    validate(spec);
    if (n.train < 1 || n.val < 1 || n.test < 1)
        throw std::invalid_argument("make_dataset: all splits need at least one sample");
    if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir)) {
        if (!force)
            throw std::runtime_error("make_dataset: " + dir.string() +
                                     " is not empty (pass force to overwrite)");
        std::filesystem::remove_all(dir);
    }

    const int counts[3] = {n.train, n.val, n.test};
    for (int s = 0; s < 3; ++s) {
        const auto split_dir = dir / split_name(s);
        std::filesystem::create_directories(split_dir);
        for (int i = 0; i < counts[s]; ++i) {
            Rng rng = Rng::keyed(seed, 0x5eed0000u + static_cast<std::uint64_t>(s), i);
            Sample sample = generate_sample(rng, spec);
            sample.seed = seed;
            const std::string stem = std::to_string(i);
            save_tensor(split_dir / (stem + "_image.tnsr"), sample.image);

            Tensor label = Tensor::zeros({spec.height, spec.width});
            for (std::size_t j = 0; j < sample.hard_label.v.size(); ++j)
                label.data()[j] = static_cast<float>(sample.hard_label.v[j]);
            save_tensor(split_dir / (stem + "_label.tnsr"), label);

            Tensor soft = Tensor::zeros({spec.num_fg_classes + 1, spec.height, spec.width});
            std::copy(sample.soft_label.p.begin(), sample.soft_label.p.end(), soft.data().begin());
            save_tensor(split_dir / (stem + "_soft.tnsr"), soft);
        }
    }

    std::ofstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("cannot write manifest in " + dir.string());
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(spec_hash(spec)));
    mf << "format=calibseg-dataset-v1\n"
       << "seed=" << seed << "\n"
       << "spec_hash=" << hex << "\n"
       << "n_train=" << n.train << "\n"
       << "n_val=" << n.val << "\n"
       << "n_test=" << n.test << "\n"
       << "height=" << spec.height << "\n"
       << "width=" << spec.width << "\n"
       << "num_classes=" << spec.num_fg_classes + 1 << "\n"
       << "blur_sigma=" << fmt_double(spec.blur_sigma_min) << "," << fmt_double(spec.blur_sigma_max)
       << "\n"
       << "noise_sigma=" << fmt_double(spec.noise_sigma_min) << ","
       << fmt_double(spec.noise_sigma_max) << "\n"
       << "jitter_px=" << fmt_double(spec.jitter_px) << "\n";
    mf << "contrasts=";
    for (std::size_t i = 0; i < spec.contrasts.size(); ++i)
        mf << (i ? "," : "") << fmt_double(spec.contrasts[i]);
    mf << "\nshapes=" << spec.min_shapes << "-" << spec.max_shapes << "\n";
    if (!mf) throw IoError("manifest write failed in " + dir.string());
}

DatasetInfo read_manifest(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("missing manifest in " + dir.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (kv["format"] != "calibseg-dataset-v1")
        throw IoError("unrecognized dataset format in " + dir.string());
    DatasetInfo info;
    try {
        info.seed = std::stoull(kv.at("seed"));
        info.spec_digest = std::stoull(kv.at("spec_hash"), nullptr, 16);
        info.counts = {std::stoi(kv.at("n_train")), std::stoi(kv.at("n_val")),
                       std::stoi(kv.at("n_test"))};
        info.height = std::stoi(kv.at("height"));
        info.width = std::stoi(kv.at("width"));
        info.num_classes = std::stoi(kv.at("num_classes"));
    } catch (const std::exception&) {
        throw IoError("malformed manifest in " + dir.string());
    }
    return info;
}

Sample load_sample(const std::filesystem::path& dir, const std::string& split, int index) {
    const DatasetInfo info = read_manifest(dir);
    const int counts[3] = {info.counts.train, info.counts.val, info.counts.test};
    const int sid = split_id(split);
    if (index < 0 || index >= counts[sid])
        throw std::invalid_argument("load_sample: index out of range for split " + split);

    const auto split_dir = dir / split;
    const std::string stem = std::to_string(index);
    Sample s;
    s.seed = info.seed;
    s.spec_digest = info.spec_digest;
    s.image = load_tensor(split_dir / (stem + "_image.tnsr"));
    if (s.image.rank() != 3 || s.image.dim(0) != 1 || s.image.dim(1) != info.height ||
        s.image.dim(2) != info.width)
        throw IoError("unexpected image shape in " + (split_dir / stem).string());

    Tensor label = load_tensor(split_dir / (stem + "_label.tnsr"));
    if (label.rank() != 2 || label.dim(0) != info.height || label.dim(1) != info.width)
        throw IoError("unexpected label shape in " + (split_dir / stem).string());
    s.hard_label = make_label_map(info.height, info.width);
    for (std::size_t j = 0; j < s.hard_label.v.size(); ++j) {
        const float v = label.data()[j];
        const int id = static_cast<int>(std::lround(v));
        if (std::abs(v - id) > 1e-4f || id < 1 || id > info.num_classes)
            throw IoError("corrupt label id in " + (split_dir / stem).string());
        s.hard_label.v[j] = static_cast<std::uint8_t>(id);
    }

    Tensor soft = load_tensor(split_dir / (stem + "_soft.tnsr"));
    if (soft.rank() != 3 || soft.dim(0) != info.num_classes || soft.dim(1) != info.height ||
        soft.dim(2) != info.width)
        throw IoError("unexpected soft label shape in " + (split_dir / stem).string());
    s.soft_label = make_soft_label_map(info.num_classes, info.height, info.width);
    std::copy(soft.data().begin(), soft.data().end(), s.soft_label.p.begin());
    return s;
}

} // namespace calibseg
