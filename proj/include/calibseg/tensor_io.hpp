#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "calibseg/tensor.hpp"

namespace calibseg {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// TNSR v1 stream format: 8-byte magic "TNSR0001", u32 LE rank, rank u32 LE
// extents, then numel f32 LE values. Gradients are never serialized.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

} // namespace calibseg
