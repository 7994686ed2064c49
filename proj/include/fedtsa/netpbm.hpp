#pragma once

#include <filesystem>
#include <vector>

#include "fedtsa/tensor.hpp"

namespace fedtsa {

// Plain and raw NetPBM: P1/P4 bitmaps, P2/P5 graymaps, P3/P6 pixmaps.
// Returns a [channels, height, width] tensor with samples scaled to [0, 1]
// (1 channel for bitmaps/graymaps, 3 for pixmaps).
Tensor read_netpbm(const std::filesystem::path& path);

// Writes a [1,h,w] or [3,h,w] tensor in [0,1] as binary P5/P6 with maxval 255.
void write_netpbm(const std::filesystem::path& path, const Tensor& image);

bool is_netpbm_path(const std::filesystem::path& path);

} // namespace fedtsa
