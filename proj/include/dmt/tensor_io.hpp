#pragma once

#include <filesystem>

#include "dmt/tensor.hpp"

namespace dmt {

/// DMT1 binary tensor format: magic "DMT1", u32 rank, rank x u32 dims,
/// then 4 * product(dims) bytes of little-endian float32 payload.
/// write followed by read round-trips bit-exactly.

void tensor_write(const std::filesystem::path& path, const Tensor& t);
Tensor tensor_read(const std::filesystem::path& path);

}  // namespace dmt
