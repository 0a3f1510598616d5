#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dmt/tensor.hpp"

namespace dmt {

/// Multi-level feature stack; levels[l] is C_l x H_l x W_l, finest first.
using FeaturePyramid = std::vector<Tensor>;

/// Level layout of the pyramid. Level l has channels[l] channels at a
/// spatial resolution of image_size / strides[l]. Each level belongs to one
/// of three anchor groups (low / mid / high).
struct PyramidSpec {
    int levels = 3;
    std::vector<int> channels = {16, 32, 64};
    std::vector<int> strides = {4, 8, 16};

    void validate() const;

    /// Group index in {0, 1, 2} for a level; identity for 3 levels,
    /// otherwise assignment by thirds.
    int group_of(int level) const;

    /// Channel count shared by all levels of a group; throws ConfigError
    /// if the group's levels disagree or the group is empty.
    int group_channels(int group) const;
};

/// Input raster: 1 or 3 channels, values clamped to [0, 1].
struct Image {
    Tensor data;  // C x H x W

    static Image from_tensor(Tensor chw);
    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

enum class ExtractMode { kFilterbank, kFixture };

/// Deterministic stand-in for a pretrained backbone: a fixed seeded bank of
/// 3x3 convolutions (no bias) with ReLU between levels and average-pool
/// downsampling. Stateless after construction; support and query images
/// pass through identical parameters.
class FeatureExtractor {
public:
    FeatureExtractor(PyramidSpec spec, std::uint64_t seed);

    FeaturePyramid extract(const Image& img, ExtractMode mode) const;

    const PyramidSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }

private:
    FeaturePyramid extract_filterbank(const Image& img) const;
    FeaturePyramid extract_fixture(const Image& img) const;

    PyramidSpec spec_;
    std::uint64_t seed_;
    std::vector<Tensor> kernels_;  // per level: outC x inC x 3 x 3
};

/// Reads per-level DMT1 files named <stem>.l<idx>.dmt (0-based idx) and
/// checks them against the pyramid layout.
FeaturePyramid load_fixture_pyramid(const std::filesystem::path& stem, const PyramidSpec& spec);

/// Writes a pyramid in the same naming scheme.
void save_fixture_pyramid(const std::filesystem::path& stem, const FeaturePyramid& pyr);

}  // namespace dmt
