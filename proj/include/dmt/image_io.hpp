#pragma once

#include <filesystem>

#include "dmt/tensor.hpp"

namespace dmt {

/// Raster I/O for the dataset layer. Images are C x H x W tensors with
/// values in [0, 1]; files are binary netpbm with maxval 255.
///   masks  -> PGM (P5), 0 = background, 255 = foreground
///   images -> PPM (P6) for 3 channels, PGM (P5) for 1 channel

void write_pgm(const std::filesystem::path& path, const Tensor& gray_hw);
void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask_hw);
void write_ppm(const std::filesystem::path& path, const Tensor& img_chw);

Tensor read_pgm(const std::filesystem::path& path);   // -> H x W in [0,1]
Tensor read_ppm(const std::filesystem::path& path);   // -> 3 x H x W in [0,1]

}  // namespace dmt
