#pragma once

#include <vector>

#include "dmt/feature_provider.hpp"
#include "dmt/tensor.hpp"

namespace dmt {

/// Support features split by the (soft, resized) mask: fg = F * M,
/// bg = F * (1 - M); fg + bg == F.
struct MaskedFeatures {
    Tensor fg;
    Tensor bg;
};

MaskedFeatures mask_features(const Tensor& features, const Tensor& mask);

/// Intermediates of one correlation tensor, kept for the backward pass.
struct CorrCache {
    Tensor gs;  // transformed support, C x H x W
    Tensor gq;  // transformed query, C x H x W
    Tensor ns;  // per-pixel norms of gs, H x W
    Tensor nq;  // per-pixel norms of gq, H x W
};

/// 4D correlation: entry (yq, xq, ys, xs) is the ReLU-clipped cosine of the
/// transformed support vector at (ys, xs) and the transformed query vector
/// at (yq, xq). Zero-norm pixels (fully masked out) contribute 0.
Tensor correlation4d(const Tensor& support_features, const Tensor& query_features,
                     const Tensor& w_support, const Tensor& w_query, CorrCache* cache = nullptr);

struct Correlation4dGrads {
    Tensor d_w_support;  // C x C
    Tensor d_w_query;    // C x C
};

/// Reverse of correlation4d with respect to the two transforms; the feature
/// inputs must be the same tensors the forward saw.
Correlation4dGrads correlation4d_backward(const Tensor& d_corr, const CorrCache& cache,
                                          const Tensor& support_features,
                                          const Tensor& query_features);

struct DhcResult {
    std::vector<Tensor> corr_f;  // per level, H x W x H x W
    std::vector<Tensor> corr_b;
};

struct DhcCache {
    struct Level {
        MaskedFeatures masked;
        CorrCache fg;
        CorrCache bg;
    };
    std::vector<Level> levels;
};

/// Builds both correlation pyramids for one support shot: the foreground
/// tensor against F * M and the background one against F * (1 - M), both
/// versus the full query features.
DhcResult dhc_forward(const FeaturePyramid& support, const Tensor& support_mask,
                      const FeaturePyramid& query, const std::vector<Tensor>& w_support,
                      const std::vector<Tensor>& w_query, DhcCache* cache = nullptr);

/// Accumulates dL/dW_s and dL/dW_q (one pair per level) from upstream
/// correlation gradients of both heads.
void dhc_backward(const std::vector<Tensor>& d_corr_f, const std::vector<Tensor>& d_corr_b,
                  const DhcCache& cache, const FeaturePyramid& query,
                  std::vector<Tensor>& d_w_support, std::vector<Tensor>& d_w_query);

}  // namespace dmt
