#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calibseg/tensor.hpp"

namespace calibseg {

struct UNetConfig {
    int in_channels = 1;
    int num_classes = 2;
    int base_width = 16;
    int depth = 3; // resolution levels; depth-1 downsamples
};

void validate(const UNetConfig& cfg);

// Total scalar parameter count, computed without allocating anything.
std::size_t param_count(const UNetConfig& cfg);

// Named parameter tensors in a fixed construction order.
struct WeightSet {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    void add(std::string name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::size_t size() const { return tensors.size(); }
};

// He-style uniform init (bound sqrt(6/fan_in)) for kernels, zero biases.
// Deterministic per seed.
WeightSet init_weights(const UNetConfig& cfg, std::uint64_t seed);

// Deep copy; grads are not carried over.
WeightSet clone_weights(const WeightSet& ws);

// Encoder/decoder with skip concatenations and a final 1x1 conv; returns
// logits [N,C,H,W]. H and W must be divisible by 2^(depth-1).
Tensor unet_forward(Tape& tape, const WeightSet& ws, const Tensor& x, const UNetConfig& cfg);

struct EmaState {
    WeightSet shadow; // empty until the first update, which copies
    double decay = 0.999;
    std::uint64_t updates = 0;
};

void ema_update(EmaState& ema, const WeightSet& live);

// Checkpoint container: magic CKPT0001, u32 tensor count, then per tensor a
// u16 name length, the name bytes, and a TNSR blob.
void save_checkpoint(const WeightSet& ws, const std::filesystem::path& path);
WeightSet load_checkpoint(const std::filesystem::path& path);

// Loads into an existing weight set, insisting on identical names and shapes.
void load_checkpoint_into(WeightSet& ws, const std::filesystem::path& path);

// Reads the architecture back from parameter names and shapes; throws unless
// the set is exactly one of ours.
UNetConfig infer_config(const WeightSet& ws);

} // namespace calibseg
