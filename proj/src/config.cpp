#include "calibseg/config.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <climits>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>

namespace calibseg {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
    throw std::invalid_argument("config key '" + key + "': cannot read '" + value + "' as " +
                                want);
}

void check_known(const Config& cfg, const std::string& prefix,
                 std::span<const char* const> allowed) {
    for (const auto& [key, value] : cfg.entries()) {
        if (key.rfind(prefix, 0) != 0) continue;
        const std::string suffix = key.substr(prefix.size());
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return suffix == a; }) == allowed.end())
            throw std::invalid_argument("unknown configuration key '" + key + "'");
    }
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::istringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) bad_value(key, value, "a comma-separated number list");
        std::size_t pos = 0;
        double v;
        try {
            v = std::stod(item, &pos);
        } catch (const std::exception&) {
            bad_value(key, value, "a comma-separated number list");
        }
        if (pos != item.size()) bad_value(key, value, "a comma-separated number list");
        out.push_back(v);
    }
    if (out.empty()) bad_value(key, value, "a comma-separated number list");
    return out;
}

} // namespace

void Config::set(const std::string& key, std::string value) {
    for (auto& [k, v] : kv_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    kv_.emplace_back(key, std::move(value));
}

const std::string* Config::find(const std::string& key) const {
    for (const auto& [k, v] : kv_)
        if (k == key) return &v;
    return nullptr;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

const std::string& Config::require(const std::string& key) const {
    const std::string* v = find(key);
    if (!v) throw std::invalid_argument("missing required configuration key '" + key + "'");
    return *v;
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v ? *v : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::size_t pos = 0;
    double out;
    try {
        out = std::stod(*v, &pos);
    } catch (const std::exception&) {
        bad_value(key, *v, "a number");
    }
    if (pos != v->size()) bad_value(key, *v, "a number");
    return out;
}

int Config::get_int(const std::string& key, int fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::size_t pos = 0;
    long long out;
    try {
        out = std::stoll(*v, &pos);
    } catch (const std::exception&) {
        bad_value(key, *v, "an integer");
    }
    if (pos != v->size() || out < INT_MIN || out > INT_MAX) bad_value(key, *v, "an integer");
    return static_cast<int>(out);
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    if (v->find('-') != std::string::npos) bad_value(key, *v, "an unsigned integer");
    std::size_t pos = 0;
    unsigned long long out;
    try {
        out = std::stoull(*v, &pos);
    } catch (const std::exception&) {
        bad_value(key, *v, "an unsigned integer");
    }
    if (pos != v->size()) bad_value(key, *v, "an unsigned integer");
    return out;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") return true;
    if (*v == "0" || *v == "false" || *v == "no" || *v == "off") return false;
    bad_value(key, *v, "a boolean");
}

Config parse_config(const std::string& text) {
    Config cfg;
    std::istringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unterminated section header");
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value");
        const std::string key = trim(s.substr(0, eq));
        if (key.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        cfg.set(section.empty() ? key : section + "." + key, trim(s.substr(eq + 1)));
    }
    return cfg;
}

Config load_config(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

std::string canonical_text(const Config& cfg) {
    auto kv = cfg.entries();
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::uint64_t config_hash(const Config& cfg) {
    const std::string s = canonical_text(cfg);
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

TrainConfig make_train_config(const Config& cfg) {
    static constexpr std::array<const char*, 15> kTrain = {
        "method",       "lambda",     "batch_size",        "iterations",
        "lr_start",     "lr_end",     "seed",              "val_interval",
        "ema_decay",    "dataset",    "bwcr_const_lambda", "supervise_both_branches",
        "svls_sigma",   "mls_margin", "mls_weight"};
    static constexpr std::array<const char*, 3> kUnet = {"width", "depth", "classes"};
    static constexpr std::array<const char*, 3> kLambda = {"min", "max", "radius"};
    static constexpr std::array<const char*, 24> kTransforms = {
        "p_gamma",         "p_affine",        "p_blur",          "p_sharpen",
        "p_noise",         "p_geometric",     "gamma_min",       "gamma_max",
        "scale_min",       "scale_max",       "shift_min",       "shift_max",
        "blur_sigma_min",  "blur_sigma_max",  "sharpen_min",     "sharpen_max",
        "noise_sigma_min", "noise_sigma_max", "rot_deg_min",     "rot_deg_max",
        "geo_scale_min",   "geo_scale_max",   "trans_frac_min",  "trans_frac_max"};
    check_known(cfg, "train.", kTrain);
    check_known(cfg, "unet.", kUnet);
    check_known(cfg, "lambda.", kLambda);
    check_known(cfg, "transforms.", kTransforms);

    TrainConfig tc;
    tc.method = method_from_string(cfg.get("train.method", "da"));
    tc.lambda = cfg.get_double("train.lambda", tc.lambda);
    tc.batch_size = cfg.get_int("train.batch_size", tc.batch_size);
    tc.iterations = cfg.get_int("train.iterations", tc.iterations);
    tc.lr_start = cfg.get_double("train.lr_start", tc.lr_start);
    tc.lr_end = cfg.get_double("train.lr_end", tc.lr_end);
    tc.seed = cfg.get_u64("train.seed", tc.seed);
    tc.val_interval = cfg.get_int("train.val_interval", tc.val_interval);
    tc.ema_decay = cfg.get_double("train.ema_decay", tc.ema_decay);
    tc.dataset_dir = cfg.require("train.dataset");
    tc.bwcr_const_lambda = cfg.get_bool("train.bwcr_const_lambda", tc.bwcr_const_lambda);
    tc.supervise_both_branches =
        cfg.get_bool("train.supervise_both_branches", tc.supervise_both_branches);
    tc.svls_sigma = cfg.get_double("train.svls_sigma", tc.svls_sigma);
    tc.mls_margin = cfg.get_double("train.mls_margin", tc.mls_margin);
    tc.mls_weight = cfg.get_double("train.mls_weight", tc.mls_weight);

    tc.lambda_params.lambda_min = cfg.get_double("lambda.min", tc.lambda_params.lambda_min);
    tc.lambda_params.lambda_max = cfg.get_double("lambda.max", tc.lambda_params.lambda_max);
    tc.lambda_params.radius = cfg.get_double("lambda.radius", tc.lambda_params.radius);

    tc.unet.num_classes = cfg.get_int("unet.classes", tc.unet.num_classes);
    tc.unet.base_width = cfg.get_int("unet.width", tc.unet.base_width);
    tc.unet.depth = cfg.get_int("unet.depth", tc.unet.depth);

    TransformRanges& r = tc.ranges;
    r.p_gamma = cfg.get_double("transforms.p_gamma", r.p_gamma);
    r.p_affine = cfg.get_double("transforms.p_affine", r.p_affine);
    r.p_blur = cfg.get_double("transforms.p_blur", r.p_blur);
    r.p_sharpen = cfg.get_double("transforms.p_sharpen", r.p_sharpen);
    r.p_noise = cfg.get_double("transforms.p_noise", r.p_noise);
    r.p_geometric = cfg.get_double("transforms.p_geometric", r.p_geometric);
    r.gamma_min = cfg.get_double("transforms.gamma_min", r.gamma_min);
    r.gamma_max = cfg.get_double("transforms.gamma_max", r.gamma_max);
    r.scale_min = cfg.get_double("transforms.scale_min", r.scale_min);
    r.scale_max = cfg.get_double("transforms.scale_max", r.scale_max);
    r.shift_min = cfg.get_double("transforms.shift_min", r.shift_min);
    r.shift_max = cfg.get_double("transforms.shift_max", r.shift_max);
    r.blur_sigma_min = cfg.get_double("transforms.blur_sigma_min", r.blur_sigma_min);
    r.blur_sigma_max = cfg.get_double("transforms.blur_sigma_max", r.blur_sigma_max);
    r.sharpen_min = cfg.get_double("transforms.sharpen_min", r.sharpen_min);
    r.sharpen_max = cfg.get_double("transforms.sharpen_max", r.sharpen_max);
    r.noise_sigma_min = cfg.get_double("transforms.noise_sigma_min", r.noise_sigma_min);
    r.noise_sigma_max = cfg.get_double("transforms.noise_sigma_max", r.noise_sigma_max);
    r.rot_deg_min = cfg.get_double("transforms.rot_deg_min", r.rot_deg_min);
    r.rot_deg_max = cfg.get_double("transforms.rot_deg_max", r.rot_deg_max);
    r.geo_scale_min = cfg.get_double("transforms.geo_scale_min", r.geo_scale_min);
    r.geo_scale_max = cfg.get_double("transforms.geo_scale_max", r.geo_scale_max);
    r.trans_frac_min = cfg.get_double("transforms.trans_frac_min", r.trans_frac_min);
    r.trans_frac_max = cfg.get_double("transforms.trans_frac_max", r.trans_frac_max);

    validate(tc);
    return tc;
}

namespace {

constexpr std::array<const char*, 15> kSynth = {
    "seed",           "height",          "width",           "fg_classes",
    "min_shapes",     "max_shapes",      "contrasts",       "blur_sigma_min",
    "blur_sigma_max", "noise_sigma_min", "noise_sigma_max", "jitter_px",
    "n_train",        "n_val",           "n_test"};

} // namespace

SceneSpec make_scene_spec(const Config& cfg) {
    check_known(cfg, "synth.", kSynth);
    SceneSpec spec;
    spec.height = cfg.get_int("synth.height", spec.height);
    spec.width = cfg.get_int("synth.width", spec.width);
    spec.num_fg_classes = cfg.get_int("synth.fg_classes", spec.num_fg_classes);
    spec.min_shapes = cfg.get_int("synth.min_shapes", spec.min_shapes);
    spec.max_shapes = cfg.get_int("synth.max_shapes", spec.max_shapes);
    if (cfg.has("synth.contrasts"))
        spec.contrasts = parse_double_list("synth.contrasts", cfg.require("synth.contrasts"));
    spec.blur_sigma_min = cfg.get_double("synth.blur_sigma_min", spec.blur_sigma_min);
    spec.blur_sigma_max = cfg.get_double("synth.blur_sigma_max", spec.blur_sigma_max);
    spec.noise_sigma_min = cfg.get_double("synth.noise_sigma_min", spec.noise_sigma_min);
    spec.noise_sigma_max = cfg.get_double("synth.noise_sigma_max", spec.noise_sigma_max);
    spec.jitter_px = cfg.get_double("synth.jitter_px", spec.jitter_px);
    validate(spec);
    return spec;
}

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

Config to_config(const TrainConfig& tc) {
    Config cfg;
    cfg.set("train.method", to_string(tc.method));
    cfg.set("train.lambda", num(tc.lambda));
    cfg.set("train.batch_size", std::to_string(tc.batch_size));
    cfg.set("train.iterations", std::to_string(tc.iterations));
    cfg.set("train.lr_start", num(tc.lr_start));
    cfg.set("train.lr_end", num(tc.lr_end));
    cfg.set("train.seed", std::to_string(tc.seed));
    cfg.set("train.val_interval", std::to_string(tc.val_interval));
    cfg.set("train.ema_decay", num(tc.ema_decay));
    cfg.set("train.dataset", tc.dataset_dir.string());
    cfg.set("train.bwcr_const_lambda", tc.bwcr_const_lambda ? "true" : "false");
    cfg.set("train.supervise_both_branches", tc.supervise_both_branches ? "true" : "false");
    cfg.set("train.svls_sigma", num(tc.svls_sigma));
    cfg.set("train.mls_margin", num(tc.mls_margin));
    cfg.set("train.mls_weight", num(tc.mls_weight));
    cfg.set("unet.width", std::to_string(tc.unet.base_width));
    cfg.set("unet.depth", std::to_string(tc.unet.depth));
    cfg.set("unet.classes", std::to_string(tc.unet.num_classes));
    cfg.set("lambda.min", num(tc.lambda_params.lambda_min));
    cfg.set("lambda.max", num(tc.lambda_params.lambda_max));
    cfg.set("lambda.radius", num(tc.lambda_params.radius));
    const TransformRanges& r = tc.ranges;
    cfg.set("transforms.p_gamma", num(r.p_gamma));
    cfg.set("transforms.p_affine", num(r.p_affine));
    cfg.set("transforms.p_blur", num(r.p_blur));
    cfg.set("transforms.p_sharpen", num(r.p_sharpen));
    cfg.set("transforms.p_noise", num(r.p_noise));
    cfg.set("transforms.p_geometric", num(r.p_geometric));
    cfg.set("transforms.gamma_min", num(r.gamma_min));
    cfg.set("transforms.gamma_max", num(r.gamma_max));
    cfg.set("transforms.scale_min", num(r.scale_min));
    cfg.set("transforms.scale_max", num(r.scale_max));
    cfg.set("transforms.shift_min", num(r.shift_min));
    cfg.set("transforms.shift_max", num(r.shift_max));
    cfg.set("transforms.blur_sigma_min", num(r.blur_sigma_min));
    cfg.set("transforms.blur_sigma_max", num(r.blur_sigma_max));
    cfg.set("transforms.sharpen_min", num(r.sharpen_min));
    cfg.set("transforms.sharpen_max", num(r.sharpen_max));
    cfg.set("transforms.noise_sigma_min", num(r.noise_sigma_min));
    cfg.set("transforms.noise_sigma_max", num(r.noise_sigma_max));
    cfg.set("transforms.rot_deg_min", num(r.rot_deg_min));
    cfg.set("transforms.rot_deg_max", num(r.rot_deg_max));
    cfg.set("transforms.geo_scale_min", num(r.geo_scale_min));
    cfg.set("transforms.geo_scale_max", num(r.geo_scale_max));
    cfg.set("transforms.trans_frac_min", num(r.trans_frac_min));
    cfg.set("transforms.trans_frac_max", num(r.trans_frac_max));
    return cfg;
}

Config to_config(const SceneSpec& spec, const DatasetCounts& n, std::uint64_t seed) {
    Config cfg;
    cfg.set("synth.seed", std::to_string(seed));
    cfg.set("synth.height", std::to_string(spec.height));
    cfg.set("synth.width", std::to_string(spec.width));
    cfg.set("synth.fg_classes", std::to_string(spec.num_fg_classes));
    cfg.set("synth.min_shapes", std::to_string(spec.min_shapes));
    cfg.set("synth.max_shapes", std::to_string(spec.max_shapes));
    std::string cs;
    for (std::size_t i = 0; i < spec.contrasts.size(); ++i) {
        if (i) cs += ",";
        cs += num(spec.contrasts[i]);
    }
    cfg.set("synth.contrasts", cs);
    cfg.set("synth.blur_sigma_min", num(spec.blur_sigma_min));
    cfg.set("synth.blur_sigma_max", num(spec.blur_sigma_max));
    cfg.set("synth.noise_sigma_min", num(spec.noise_sigma_min));
    cfg.set("synth.noise_sigma_max", num(spec.noise_sigma_max));
    cfg.set("synth.jitter_px", num(spec.jitter_px));
    cfg.set("synth.n_train", std::to_string(n.train));
    cfg.set("synth.n_val", std::to_string(n.val));
    cfg.set("synth.n_test", std::to_string(n.test));
    return cfg;
}

DatasetCounts make_dataset_counts(const Config& cfg) {
    check_known(cfg, "synth.", kSynth);
    DatasetCounts n;
    n.train = cfg.get_int("synth.n_train", 200);
    n.val = cfg.get_int("synth.n_val", 20);
    n.test = cfg.get_int("synth.n_test", 100);
    if (n.train < 0 || n.val < 0 || n.test < 0)
        throw std::invalid_argument("dataset counts must be nonnegative");
    return n;
}

} // namespace calibseg
