#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmt/feature_provider.hpp"
#include "dmt/fusion_net.hpp"
#include "dmt/objectives.hpp"
#include "dmt/smt.hpp"

namespace dmt {

struct ModelConfig {
    PyramidSpec pyramid;
    SmtConfig smt;
    LossWeights weights;
    std::uint64_t seed = 0;
};

/// The trainable state of the pipeline: anchor layers plus fusion net. The
/// feature extractor is frozen by construction. Value semantics; TSF works
/// on a copy.
struct Model {
    ModelConfig cfg;
    FeatureExtractor extractor;
    AnchorSet anchors;
    FusionParams fusion;

    static Model seeded(const ModelConfig& cfg);

    /// All trainable tensors (anchors + fusion), stable names/order.
    std::vector<ParamRef> trainable_refs();

    /// The TSF parameter groups: low / mid / high (anchor layers of that
    /// group, both roles), encoder (sep4d + the two fusion convs), decoder
    /// (the two decoder convs).
    std::vector<ParamRef> group_refs(const std::string& group);

    /// Content hash of one named parameter tensor; used to verify TSF
    /// isolation.
    std::uint64_t tensor_hash(const std::string& name);
};

/// Matching gradient views with the same names as Model::trainable_refs.
struct ModelGrads {
    AnchorGrads anchors;
    FusionGrads fusion;

    static ModelGrads zeros_like(const Model& model);
    std::vector<ParamRef> refs();
};

bool group_name_valid(const std::string& group);

}  // namespace dmt
