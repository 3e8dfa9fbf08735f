#include "calibseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "calibseg/rng.hpp"
#include "calibseg/tensor_io.hpp"

namespace calibseg {

namespace {

constexpr char kCkptMagic[8] = {'C', 'K', 'P', 'T', '0', '0', '0', '1'};

struct ConvSpec {
    std::string name;
    int cin, cout, k;
};

// the one place that fixes parameter order and layer shapes
std::vector<ConvSpec> conv_specs(const UNetConfig& cfg) {
    std::vector<ConvSpec> specs;
    const int w = cfg.base_width;
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        const int cin = l == 0 ? cfg.in_channels : w << (l - 1);
        const int cout = w << l;
        specs.push_back({"enc" + std::to_string(l) + ".conv1", cin, cout, 3});
        specs.push_back({"enc" + std::to_string(l) + ".conv2", cout, cout, 3});
    }
    {
        const int cin = w << (cfg.depth - 2);
        const int cout = w << (cfg.depth - 1);
        specs.push_back({"bott.conv1", cin, cout, 3});
        specs.push_back({"bott.conv2", cout, cout, 3});
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const int cout = w << l;
        specs.push_back({"dec" + std::to_string(l) + ".conv1", 3 * cout, cout, 3});
        specs.push_back({"dec" + std::to_string(l) + ".conv2", cout, cout, 3});
    }
    specs.push_back({"head", w, cfg.num_classes, 1});
    return specs;
}

} // namespace

void validate(const UNetConfig& cfg) {
    if (cfg.in_channels < 1) throw std::invalid_argument("UNetConfig: in_channels must be >= 1");
    if (cfg.num_classes < 2) throw std::invalid_argument("UNetConfig: need at least 2 classes");
    if (cfg.base_width < 1) throw std::invalid_argument("UNetConfig: base_width must be >= 1");
    if (cfg.depth < 2) throw std::invalid_argument("UNetConfig: depth must be >= 2");
}

std::size_t param_count(const UNetConfig& cfg) {
    validate(cfg);
    std::size_t n = 0;
    for (const auto& s : conv_specs(cfg))
        n += static_cast<std::size_t>(s.cout) * s.cin * s.k * s.k + s.cout;
    return n;
}

void WeightSet::add(std::string name, Tensor t) {
    for (const auto& n : names)
        if (n == name) throw std::invalid_argument("WeightSet: duplicate name " + name);
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
}

Tensor& WeightSet::at(const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return tensors[i];
    throw std::invalid_argument("WeightSet: no parameter named " + name);
}

const Tensor& WeightSet::at(const std::string& name) const {
    return const_cast<WeightSet*>(this)->at(name);
}

WeightSet init_weights(const UNetConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    WeightSet ws;
    std::uint64_t idx = 0;
    for (const auto& s : conv_specs(cfg)) {
        Tensor k = Tensor::zeros({s.cout, s.cin, s.k, s.k});
        const double bound = std::sqrt(6.0 / (static_cast<double>(s.cin) * s.k * s.k));
        Rng rng = Rng::keyed(seed, idx++);
        for (auto& v : k.data()) v = static_cast<float>(rng.uniform(-bound, bound));
        k.set_requires_grad(true);
        Tensor b = Tensor::zeros({s.cout});
        b.set_requires_grad(true);
        ws.add(s.name + ".k", k);
        ws.add(s.name + ".b", b);
    }
    return ws;
}

WeightSet clone_weights(const WeightSet& ws) {
    WeightSet out;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        Tensor t = ws.tensors[i].clone();
        out.add(ws.names[i], t);
    }
    return out;
}

Tensor unet_forward(Tape& tape, const WeightSet& ws, const Tensor& x, const UNetConfig& cfg) {
    validate(cfg);
    if (!x.defined() || x.rank() != 4)
        throw std::invalid_argument("unet_forward: input must be [N,1,H,W]");
    if (x.dim(1) != cfg.in_channels)
        throw std::invalid_argument("unet_forward: input channel mismatch");
    const int div = 1 << (cfg.depth - 1);
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
        throw std::invalid_argument("unet_forward: H and W must be divisible by " +
                                    std::to_string(div));

    auto block = [&](const Tensor& in, const std::string& name, int pad) {
        return conv2d(tape, in, ws.at(name + ".k"), ws.at(name + ".b"), pad);
    };
    auto conv_relu2 = [&](Tensor h, const std::string& prefix) {
        h = relu(tape, block(h, prefix + ".conv1", 1));
        h = relu(tape, block(h, prefix + ".conv2", 1));
        return h;
    };

    std::vector<Tensor> skips;
    Tensor h = x;
    for (int l = 0; l + 1 < cfg.depth; ++l) {
        h = conv_relu2(h, "enc" + std::to_string(l));
        skips.push_back(h);
        h = downsample2x(tape, h);
    }
    h = conv_relu2(h, "bott");
    for (int l = cfg.depth - 2; l >= 0; --l) {
        h = upsample2x(tape, h);
        h = concat_channels(tape, h, skips[l]);
        h = conv_relu2(h, "dec" + std::to_string(l));
    }
    return block(h, "head", 0);
}

void ema_update(EmaState& ema, const WeightSet& live) {
    if (!(ema.decay >= 0.0 && ema.decay < 1.0))
        throw std::invalid_argument("ema_update: decay must be in [0,1)");
    if (ema.updates == 0) {
        ema.shadow = clone_weights(live);
        for (auto& t : ema.shadow.tensors) t.set_requires_grad(false);
        ema.updates = 1;
        return;
    }
    if (ema.shadow.size() != live.size())
        throw std::invalid_argument("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < live.size(); ++i) {
        if (ema.shadow.names[i] != live.names[i] ||
            !ema.shadow.tensors[i].shape_equals(live.tensors[i].shape()))
            throw std::invalid_argument("ema_update: shadow/live mismatch at " + live.names[i]);
        auto s = ema.shadow.tensors[i].data();
        const auto v = live.tensors[i].data();
        for (std::size_t j = 0; j < s.size(); ++j)
            s[j] = static_cast<float>(ema.decay * s[j] + (1.0 - ema.decay) * v[j]);
    }
    ++ema.updates;
}

void save_checkpoint(const WeightSet& ws, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(kCkptMagic, sizeof(kCkptMagic));
    const std::uint32_t count = static_cast<std::uint32_t>(ws.size());
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const std::string& name = ws.names[i];
        if (name.size() > 0xffff) throw IoError("checkpoint name too long: " + name);
        const std::uint16_t len = static_cast<std::uint16_t>(name.size());
        f.write(reinterpret_cast<const char*>(&len), sizeof(len));
        f.write(name.data(), len);
        write_tensor(f, ws.tensors[i]);
    }
    if (!f) throw IoError("write failed for " + path.string());
}

WeightSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    std::uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!f) throw IoError("truncated checkpoint: " + path.string());
    WeightSet ws;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t len = 0;
        f.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!f) throw IoError("truncated checkpoint: " + path.string());
        std::string name(len, '\0');
        f.read(name.data(), len);
        if (!f) throw IoError("truncated checkpoint: " + path.string());
        ws.add(std::move(name), read_tensor(f));
    }
    return ws;
}

void load_checkpoint_into(WeightSet& ws, const std::filesystem::path& path) {
    WeightSet loaded = load_checkpoint(path);
    if (loaded.size() != ws.size()) throw IoError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < ws.size(); ++i) {
        if (loaded.names[i] != ws.names[i])
            throw IoError("checkpoint name mismatch: expected " + ws.names[i] + ", found " +
                          loaded.names[i]);
        if (!loaded.tensors[i].shape_equals(ws.tensors[i].shape()))
            throw IoError("checkpoint shape mismatch at " + ws.names[i] + ": expected " +
                          shape_str(ws.tensors[i].shape()) + ", found " +
                          shape_str(loaded.tensors[i].shape()));
    }
    for (std::size_t i = 0; i < ws.size(); ++i) {
        auto dst = ws.tensors[i].data();
        const auto src = loaded.tensors[i].data();
        std::memcpy(dst.data(), src.data(), src.size() * sizeof(float));
    }
}

UNetConfig infer_config(const WeightSet& ws) {
    UNetConfig cfg;
    const Tensor& head = ws.at("head.k");
    if (head.rank() != 4 || head.dim(2) != 1 || head.dim(3) != 1)
        throw std::invalid_argument("infer_config: head kernel is not 1x1");
    cfg.num_classes = head.dim(0);
    cfg.base_width = head.dim(1);
    const Tensor& e0 = ws.at("enc0.conv1.k");
    if (e0.rank() != 4) throw std::invalid_argument("infer_config: malformed encoder kernel");
    cfg.in_channels = e0.dim(1);
    int enc_levels = 0;
    for (const auto& n : ws.names)
        if (n.rfind("enc", 0) == 0 && n.find(".conv1.k") != std::string::npos) ++enc_levels;
    cfg.depth = enc_levels + 1;
    validate(cfg);

    const auto specs = conv_specs(cfg);
    if (ws.size() != specs.size() * 2)
        throw std::invalid_argument("infer_config: unexpected parameter count");
    std::size_t i = 0;
    for (const auto& s : specs) {
        if (ws.names[i] != s.name + ".k" ||
            !ws.tensors[i].shape_equals({s.cout, s.cin, s.k, s.k}))
            throw std::invalid_argument("infer_config: unexpected tensor " + ws.names[i]);
        ++i;
        if (ws.names[i] != s.name + ".b" || !ws.tensors[i].shape_equals({s.cout}))
            throw std::invalid_argument("infer_config: unexpected tensor " + ws.names[i]);
        ++i;
    }
    return cfg;
}

} // namespace calibseg
