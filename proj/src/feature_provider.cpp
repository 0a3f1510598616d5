#include "dmt/feature_provider.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dmt/rng.hpp"
#include "dmt/tensor_io.hpp"

namespace dmt {

void PyramidSpec::validate() const {
    if (levels < 1) throw ConfigError("pyramid needs at least one level");
    if (static_cast<int>(channels.size()) != levels || static_cast<int>(strides.size()) != levels) {
        throw ConfigError("channels/strides length must equal levels");
    }
    int prev = 1;
    for (int l = 0; l < levels; ++l) {
        if (channels[static_cast<std::size_t>(l)] < 1) throw ConfigError("channel counts must be positive");
        int s = strides[static_cast<std::size_t>(l)];
        if (s < 1 || s % prev != 0) {
            throw ConfigError("strides must be ascending and each divisible by the previous");
        }
        prev = s;
    }
}

int PyramidSpec::group_of(int level) const {
    if (level < 0 || level >= levels) throw ConfigError("level out of range");
    if (levels == 3) return level;
    return std::min(2, level * 3 / levels);
}

int PyramidSpec::group_channels(int group) const {
    int c = -1;
    for (int l = 0; l < levels; ++l) {
        if (group_of(l) != group) continue;
        int cl = channels[static_cast<std::size_t>(l)];
        if (c == -1) {
            c = cl;
        } else if (c != cl) {
            throw ConfigError("levels sharing an anchor group must share a channel count");
        }
    }
    if (c == -1) throw ConfigError("anchor group has no levels");
    return c;
}

Image Image::from_tensor(Tensor chw) {
    if (chw.rank() != 3) throw ShapeMismatch("image must be C x H x W");
    if (chw.dim(0) != 1 && chw.dim(0) != 3) throw ShapeMismatch("image must have 1 or 3 channels");
    for (float& v : chw.data()) v = std::clamp(v, 0.0f, 1.0f);
    return Image{std::move(chw)};
}

namespace {

// 3x3 stride-1 zero-padded convolution, no bias.
Tensor conv3x3(const Tensor& in, const Tensor& kernel) {
    const int in_c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const int out_c = kernel.dim(0);
    Tensor out = Tensor::zeros({out_c, h, w});
    for (int oc = 0; oc < out_c; ++oc) {
        for (int ic = 0; ic < in_c; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    float kv = kernel(oc, ic, ky, kx);
                    if (kv == 0.0f) continue;
                    int dy = ky - 1, dx = kx - 1;
                    int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x) {
                            out(oc, y, x) += kv * in(ic, y + dy, x + dx);
                        }
                    }
                }
            }
        }
    }
    return out;
}

void relu_inplace(Tensor& t) {
    for (float& v : t.data()) v = std::max(0.0f, v);
}

Tensor avg_pool(const Tensor& in, int factor) {
    if (factor == 1) return in;
    const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
    if (h % factor != 0 || w % factor != 0) {
        throw DimensionMismatch("pool factor does not divide feature size");
    }
    const int oh = h / factor, ow = w / factor;
    Tensor out = Tensor::zeros({c, oh, ow});
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                float s = 0.0f;
                for (int dy = 0; dy < factor; ++dy) {
                    for (int dx = 0; dx < factor; ++dx) {
                        s += in(ch, y * factor + dy, x * factor + dx);
                    }
                }
                out(ch, y, x) = s * inv;
            }
        }
    }
    return out;
}

void fill_random(Tensor& k, int from_oc, Rng& rng) {
    const int in_c = k.dim(1);
    const float scale = 1.0f / std::sqrt(static_cast<float>(in_c * 9));
    for (int oc = from_oc; oc < k.dim(0); ++oc) {
        for (int ic = 0; ic < in_c; ++ic) {
            for (int y = 0; y < 3; ++y) {
                for (int x = 0; x < 3; ++x) {
                    k(oc, ic, y, x) = static_cast<float>(rng.normal()) * scale;
                }
            }
        }
    }
}

Tensor seeded_kernel(int out_c, int in_c, Rng& rng) {
    Tensor k = Tensor::zeros({out_c, in_c, 3, 3});
    fill_random(k, 0, rng);
    return k;
}

}  // namespace

FeatureExtractor::FeatureExtractor(PyramidSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed) {
    spec_.validate();
    Rng rng(mix_seed(seed_, 0x6b61u));
    // First stage consumes up to 3 image channels; kernels built for 3 and
    // sliced down for single-channel input at extract time.
    int in_c = 3;
    for (int l = 0; l < spec_.levels; ++l) {
        int out_c = spec_.channels[static_cast<std::size_t>(l)];
        kernels_.push_back(seeded_kernel(out_c, in_c, rng));
        in_c = out_c;
    }
}

FeaturePyramid FeatureExtractor::extract(const Image& img, ExtractMode mode) const {
    int big = spec_.strides.back();
    if (img.height() % big != 0 || img.width() % big != 0) {
        throw DimensionMismatch("image dims must be divisible by the largest stride " +
                                std::to_string(big));
    }
    return mode == ExtractMode::kFilterbank ? extract_filterbank(img) : extract_fixture(img);
}

FeaturePyramid FeatureExtractor::extract_filterbank(const Image& img) const {
    FeaturePyramid pyr;
    Tensor cur = img.data;
    int prev_stride = 1;
    for (int l = 0; l < spec_.levels; ++l) {
        const Tensor& full_k = kernels_[static_cast<std::size_t>(l)];
        Tensor k = full_k;
        if (l == 0 && cur.dim(0) == 1) {
            // Grayscale input: use the first input slice of the stage-0 bank.
            k = Tensor::zeros({full_k.dim(0), 1, 3, 3});
            for (int oc = 0; oc < full_k.dim(0); ++oc) {
                for (int y = 0; y < 3; ++y) {
                    for (int x = 0; x < 3; ++x) {
                        k(oc, 0, y, x) = full_k(oc, 0, y, x);
                    }
                }
            }
        }
        Tensor conv = conv3x3(cur, k);
        relu_inplace(conv);
        int factor = spec_.strides[static_cast<std::size_t>(l)] / prev_stride;
        Tensor pooled = avg_pool(conv, factor);
        prev_stride = spec_.strides[static_cast<std::size_t>(l)];
        cur = pooled;
        pyr.push_back(std::move(pooled));
    }
    return pyr;
}

FeaturePyramid FeatureExtractor::extract_fixture(const Image& img) const {
    // Smooth seeded random fields; a function of (image bytes, spec, seed)
    // only, so identical images always map to identical pyramids.
    std::uint64_t img_hash = fnv1a(img.data.data().data(), img.data.size() * sizeof(float));
    FeaturePyramid pyr;
    for (int l = 0; l < spec_.levels; ++l) {
        int c = spec_.channels[static_cast<std::size_t>(l)];
        int h = img.height() / spec_.strides[static_cast<std::size_t>(l)];
        int w = img.width() / spec_.strides[static_cast<std::size_t>(l)];
        Rng rng(mix_seed(seed_, img_hash, static_cast<std::uint64_t>(l)));
        Tensor t = Tensor::zeros({c, h, w});
        for (int ch = 0; ch < c; ++ch) {
            // Three low-frequency harmonics per channel keep the field smooth.
            double fy[3], fx[3], ph[3], amp[3];
            for (int i = 0; i < 3; ++i) {
                fy[i] = rng.uniform(0.3, 1.8);
                fx[i] = rng.uniform(0.3, 1.8);
                ph[i] = rng.uniform(0.0, 6.28318530717958647692);
                amp[i] = rng.uniform(0.3, 1.0);
            }
            double bias = rng.uniform(-0.3, 0.3);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    double u = (y + 0.5) / h, v = (x + 0.5) / w;
                    double s = bias;
                    for (int i = 0; i < 3; ++i) {
                        s += amp[i] * std::sin(6.28318530717958647692 * (fy[i] * u + fx[i] * v) + ph[i]);
                    }
                    t(ch, y, x) = static_cast<float>(s);
                }
            }
        }
        pyr.push_back(std::move(t));
    }
    return pyr;
}

namespace {

std::filesystem::path level_path(const std::filesystem::path& stem, int level) {
    return std::filesystem::path(stem.string() + ".l" + std::to_string(level) + ".dmt");
}

}  // namespace

FeaturePyramid load_fixture_pyramid(const std::filesystem::path& stem, const PyramidSpec& spec) {
    spec.validate();
    FeaturePyramid pyr;
    for (int l = 0; l < spec.levels; ++l) {
        auto path = level_path(stem, l);
        if (!std::filesystem::exists(path)) {
            throw IoError("fixture level file not found: " + path.string());
        }
        Tensor t = tensor_read(path);
        if (t.rank() != 3 || t.dim(0) != spec.channels[static_cast<std::size_t>(l)]) {
            throw ShapeMismatch("fixture level " + std::to_string(l) + " does not match spec channels");
        }
        if (!pyr.empty()) {
            int s_prev = spec.strides[static_cast<std::size_t>(l - 1)];
            int s_cur = spec.strides[static_cast<std::size_t>(l)];
            if (t.dim(1) * s_cur != pyr.back().dim(1) * s_prev ||
                t.dim(2) * s_cur != pyr.back().dim(2) * s_prev) {
                throw ShapeMismatch("fixture level " + std::to_string(l) +
                                    " spatial size inconsistent with strides");
            }
        }
        pyr.push_back(std::move(t));
    }
    return pyr;
}

void save_fixture_pyramid(const std::filesystem::path& stem, const FeaturePyramid& pyr) {
    for (std::size_t l = 0; l < pyr.size(); ++l) {
        tensor_write(level_path(stem, static_cast<int>(l)), pyr[l]);
    }
}

}  // namespace dmt
