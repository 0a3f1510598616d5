#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmt/tensor.hpp"

namespace dmt {

inline constexpr int kSepChannels = 4;      // separable 4D conv output channels
inline constexpr int kFusionChannels = 16;  // fusion trunk width
inline constexpr int kDecoderChannels = 8;  // decoder hidden width

struct Conv2dParams {
    Tensor w;  // out x in x 3 x 3
    Tensor b;  // out
};

/// One separable stand-in for a 4D convolution: per output channel a 3x3
/// kernel over the query axes followed by a 3x3 kernel over the support
/// axes, plus a bias, then ReLU.
struct Sep4dParams {
    Tensor kq;    // kSepChannels x 3 x 3
    Tensor ks;    // kSepChannels x 3 x 3
    Tensor bias;  // kSepChannels
};

struct FusionParams {
    std::vector<Sep4dParams> sep4d;  // one per pyramid level
    Conv2dParams conv1;              // 8L -> 16
    Conv2dParams conv2;              // 16 -> 16
    Conv2dParams conv3;              // 16 -> 8
    Conv2dParams conv4;              // 8 -> 1

    /// Gaussian init with std 1/sqrt(fan-in), zero biases.
    static FusionParams seeded(int levels, std::uint64_t seed);

    /// Content hash over every parameter tensor; backward uses it to detect
    /// a cache built against different parameters.
    std::uint64_t fingerprint() const;
};

/// Foreground and background query probability masks at image resolution.
struct HeadOutput {
    Tensor m_f;  // H x W in (0, 1)
    Tensor m_b;
};

/// 3x3 stride-1 zero-padded convolution (pre-activation).
Tensor conv2d(const Tensor& input, const Conv2dParams& p);
void conv2d_backward(const Tensor& d_out, const Tensor& input, const Conv2dParams& p,
                     Conv2dParams& grads, Tensor* d_input);

/// Separable 4D convolution of one correlation tensor; returns one
/// H x W x H x W tensor per output channel, ReLU applied.
std::vector<Tensor> sep4d_conv(const Tensor& corr, const Tensor& kq, const Tensor& ks,
                               const Tensor& bias);

/// Mean and max over the support axes per channel, concatenated:
/// channels [0, n) are means, [n, 2n) are maxes, on query coordinates.
Tensor squeeze_support(const std::vector<Tensor>& channels);

/// Transpose of bilinear_resize: scatters output-pixel gradients back to
/// the four source corners that produced them.
Tensor bilinear_resize_backward(const Tensor& d_out, int in_h, int in_w);

struct FusionCache {
    struct Level {
        Tensor corr;                          // the input correlation tensor
        std::vector<Tensor> t1;               // per channel, after the query-axis conv
        std::vector<Tensor> z;                // per channel, pre-ReLU
        std::vector<std::vector<int>> argmax; // per channel, support argmax per query pixel
    };
    struct Head {
        std::vector<Level> levels;
        Tensor x0;  // concatenated per-level squeezes at the finest level
        Tensor z1, a1, z2, a2, z3, a3, z4, sig;
    };
    Head fg;
    Head bg;
    std::uint64_t params_fp = 0;
    int out_h = 0;
    int out_w = 0;
};

/// Shared-parameter two-pass forward: the same network maps corr_f to M_f
/// and corr_b to M_b. Per level: sep4d -> squeeze -> resize to the finest
/// level; concatenated levels go through two fusion convs, the decoder and
/// a sigmoid, then a resize to (out_h, out_w).
HeadOutput fusion_forward(const std::vector<Tensor>& corr_f, const std::vector<Tensor>& corr_b,
                          const FusionParams& params, int out_h, int out_w,
                          FusionCache* cache = nullptr);

struct FusionGrads {
    std::vector<Sep4dParams> sep4d;
    Conv2dParams conv1, conv2, conv3, conv4;
    std::vector<Tensor> d_corr_f;  // per level, for the anchor path
    std::vector<Tensor> d_corr_b;

    static FusionGrads zeros_like(const FusionParams& params);
};

/// Exact reverse-mode gradients of fusion_forward for every parameter
/// tensor plus the correlation inputs. Throws StaleCache when the cache
/// was built against different parameters.
FusionGrads fusion_backward(const FusionParams& params, const FusionCache& cache,
                            const Tensor& d_m_f, const Tensor& d_m_b);

/// Named views over the parameter tensors, stable order; used by the
/// optimizer, checkpoints, and the finetuning group selection.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};
std::vector<ParamRef> fusion_param_refs(FusionParams& params);
std::vector<ParamRef> fusion_grad_refs(FusionGrads& grads);

}  // namespace dmt
