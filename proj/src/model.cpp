#include "dmt/model.hpp"

#include <algorithm>

#include "dmt/rng.hpp"

namespace dmt {

Model Model::seeded(const ModelConfig& cfg) {
    cfg.pyramid.validate();
    cfg.smt.validate();
    cfg.weights.validate();
    return Model{cfg, FeatureExtractor(cfg.pyramid, mix_seed(cfg.seed, 0x6578u)),
                 AnchorSet::seeded(cfg.pyramid, mix_seed(cfg.seed, 0x616eu)),
                 FusionParams::seeded(cfg.pyramid.levels, mix_seed(cfg.seed, 0x6675u))};
}

std::vector<ParamRef> Model::trainable_refs() {
    std::vector<ParamRef> refs;
    for (const AnchorRef& r : anchor_param_refs(anchors)) refs.push_back({r.name, r.tensor});
    for (const ParamRef& r : fusion_param_refs(fusion)) refs.push_back(r);
    return refs;
}

std::vector<ParamRef> Model::group_refs(const std::string& group) {
    if (!group_name_valid(group)) throw ConfigError("unknown finetune group: " + group);
    std::vector<ParamRef> out;
    if (group == "low" || group == "mid" || group == "high") {
        int g = group == "low" ? 0 : group == "mid" ? 1 : 2;
        std::string prefix = "anchor." + std::to_string(g) + ".";
        for (const AnchorRef& r : anchor_param_refs(anchors)) {
            if (r.name.rfind(prefix, 0) == 0) out.push_back({r.name, r.tensor});
        }
        return out;
    }
    for (const ParamRef& r : fusion_param_refs(fusion)) {
        bool encoder = r.name.rfind("fusion.sep4d.", 0) == 0 ||
                       r.name.rfind("fusion.conv1.", 0) == 0 ||
                       r.name.rfind("fusion.conv2.", 0) == 0;
        if ((group == "encoder") == encoder) out.push_back(r);
    }
    return out;
}

std::uint64_t Model::tensor_hash(const std::string& name) {
    for (const ParamRef& r : trainable_refs()) {
        if (r.name == name) {
            return fnv1a(r.tensor->data().data(), r.tensor->size() * sizeof(float));
        }
    }
    throw ConfigError("unknown parameter tensor: " + name);
}

ModelGrads ModelGrads::zeros_like(const Model& model) {
    ModelGrads g;
    g.anchors = AnchorGrads::zeros_like(model.anchors);
    g.fusion = FusionGrads::zeros_like(model.fusion);
    return g;
}

std::vector<ParamRef> ModelGrads::refs() {
    std::vector<ParamRef> out;
    for (const AnchorRef& r : anchor_grad_refs(anchors)) out.push_back({r.name, r.tensor});
    for (const ParamRef& r : fusion_grad_refs(fusion)) out.push_back(r);
    return out;
}

bool group_name_valid(const std::string& group) {
    return group == "low" || group == "mid" || group == "high" || group == "encoder" ||
           group == "decoder";
}

}  // namespace dmt
