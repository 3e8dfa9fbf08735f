#pragma once

#include <filesystem>

#include "calibseg/labelmap.hpp"
#include "calibseg/tensor.hpp"

namespace calibseg {

// 8-bit binary PGM preview. Accepts [H,W] or [1,H,W]; values are min-max
// scaled to 0..255, non-finite pixels clip, a constant image comes out black.
void write_pgm(const Tensor& t, const std::filesystem::path& path);

// Reads a binary (P5) PGM as a hard label map: the distinct gray levels,
// sorted ascending, become class ids 1..K, so 0/255 masks and 0/1/2 maps both
// load naturally.
LabelMap read_pgm_labels(const std::filesystem::path& path);

} // namespace calibseg
