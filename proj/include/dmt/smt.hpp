#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dmt/feature_provider.hpp"
#include "dmt/tensor.hpp"

namespace dmt {

/// gamma: local division ratio (1/gamma per side, so (1/gamma)^2 patches).
/// beta: blend weight of the query pseudo-inverse against the support one.
struct SmtConfig {
    float gamma = 0.25f;
    float beta = 0.5f;
    float ridge = 1e-6f;

    void validate() const;
    int patches_per_side() const;
};

/// One foreground/background local prototype pair; invalid pairs (empty
/// tile on either side) are never read.
struct LocalPair {
    Tensor c_f;
    Tensor c_b;
    bool valid = false;
};

struct LevelPrototypes {
    Tensor c_f;  // global foreground prototype, C_l
    Tensor c_b;  // global background prototype, C_l
    std::vector<LocalPair> locals;
};

struct PrototypeSet {
    std::vector<LevelPrototypes> levels;
};

/// Trainable anchor vectors: one fg/bg pair per group (low/mid/high) and
/// role (support/query), shared across all levels mapped to the group.
struct AnchorSet {
    struct Pair {
        Tensor a_f;
        Tensor a_b;
    };
    std::array<Pair, 3> support;
    std::array<Pair, 3> query;

    static AnchorSet seeded(const PyramidSpec& spec, std::uint64_t seed);
};

/// Per-pixel fg/bg probability maps; fg + bg == 1 everywhere.
struct CoarseMaskLevel {
    Tensor fg;
    Tensor bg;
};
using CoarseMask = std::vector<CoarseMaskLevel>;

/// Everything the transform solve produced at one level, kept around for
/// diagnostics and the anchor gradient path.
struct SmtLevel {
    Tensor w_s;            // C_l x C_l
    Tensor w_q;            // C_l x C_l
    Tensor c_s;            // C_l x 2, unit columns
    Tensor c_q;            // C_l x 2, unit columns
    Tensor a_s;            // C_l x 2, unit columns
    Tensor a_q;            // C_l x 2, unit columns
    Tensor cs_pinv;        // 2 x C_l
    Tensor cq_pinv;        // 2 x C_l (unblended, for solve diagnostics)
    Tensor cq_pinv_blend;  // 2 x C_l (after the beta blend)
};

struct SmtResult {
    std::vector<SmtLevel> levels;
    CoarseMask coarse;
    PrototypeSet support_protos;  // shot-averaged
    PrototypeSet query_protos;    // globals only
};

/// Masked average pooling: sum_x F(x) M(x) / sum_x M(x).
/// Throws EmptyMask when the mask mass is below 1e-6.
Tensor masked_avg_pool(const Tensor& features, const Tensor& mask);

/// Splits C x H x W features and the matching mask into a (1/gamma)^2 grid
/// of non-overlapping tiles, row-major.
struct LocalTile {
    Tensor features;
    Tensor mask;
};
std::vector<LocalTile> split_local(const Tensor& features, const Tensor& mask, float gamma);

/// Confidence matching: per valid pair, cosine maps against the fg and bg
/// prototypes go through a two-way softmax; the probability maps are then
/// averaged over pairs. Falls back to the global pair when no local pair is
/// valid; throws NoValidPrototypes when the fallback is missing too.
CoarseMaskLevel self_match(const Tensor& query_features, const std::vector<LocalPair>& locals,
                           const LocalPair* global_fallback = nullptr);

/// Soft masked average pooling with the coarse fg/bg probabilities as weights.
std::pair<Tensor, Tensor> query_prototypes(const Tensor& query_features,
                                           const CoarseMaskLevel& coarse);

/// Stacks the two prototypes as unit-norm columns of a C x 2 matrix.
Tensor build_prototype_matrix(const Tensor& c_f, const Tensor& c_b);

/// beta * Cq+ + (1 - beta) * Cs+.
Tensor blend_pinv(const Tensor& cq_plus, const Tensor& cs_plus, float beta);

/// W = A * C+.
Tensor solve_transform(const Tensor& anchor_matrix, const Tensor& c_plus);

/// Per-pixel matrix-vector product W F(x, y).
Tensor apply_transform(const Tensor& w, const Tensor& features);

/// Global + local prototypes of one feature map under a mask already
/// resized to the feature resolution.
LevelPrototypes compute_level_prototypes(const Tensor& features, const Tensor& mask, float gamma);

/// Normalized anchor matrix [a_f/|a_f|, a_b/|a_b|] for a group and role.
enum class Role { kSupport, kQuery };
Tensor anchor_matrix(const AnchorSet& anchors, Role role, int group);

struct SupportShot {
    const FeaturePyramid* pyramid = nullptr;
    const Tensor* mask = nullptr;  // H x W at image resolution
};

/// Full per-episode transform construction: shot-averaged support
/// prototypes, coarse query masks by self-matching, query prototypes, the
/// blended pseudo-inverse, and both W solves per level.
SmtResult smt_forward(const std::vector<SupportShot>& support, const FeaturePyramid& query,
                      const AnchorSet& anchors, const PyramidSpec& spec, const SmtConfig& cfg);

/// Gradient buffers mirroring AnchorSet.
struct AnchorGrads {
    std::array<AnchorSet::Pair, 3> support;
    std::array<AnchorSet::Pair, 3> query;

    static AnchorGrads zeros_like(const AnchorSet& anchors);
};

/// Routes dL/dW_s and dL/dW_q (one pair per level) back to the raw anchor
/// vectors through W = A C+ and the column normalization, accumulating
/// over levels into grads.
void accumulate_anchor_grads(const AnchorSet& anchors, const PyramidSpec& spec,
                             const SmtResult& smt, const std::vector<Tensor>& d_w_s,
                             const std::vector<Tensor>& d_w_q, AnchorGrads& grads);

/// Named views over the anchor tensors; names mirror across params/grads.
struct AnchorRef {
    std::string name;
    Tensor* tensor;
};
std::vector<AnchorRef> anchor_param_refs(AnchorSet& anchors);
std::vector<AnchorRef> anchor_grad_refs(AnchorGrads& grads);

}  // namespace dmt
