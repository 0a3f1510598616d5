#include "dmt/checkpoint.hpp"

#include <fstream>
#include <map>

#include <json.hpp>

#include "dmt/tensor_io.hpp"

namespace dmt {

namespace {

using nlohmann::json;

std::string tensor_file(const std::string& name) { return name + ".dmt"; }

json spec_to_json(const PyramidSpec& s) {
    return json{{"levels", s.levels}, {"channels", s.channels}, {"strides", s.strides}};
}

PyramidSpec spec_from_json(const json& j) {
    PyramidSpec s;
    s.levels = j.at("levels").get<int>();
    s.channels = j.at("channels").get<std::vector<int>>();
    s.strides = j.at("strides").get<std::vector<int>>();
    return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, Model& model, const AdamState& optim,
                     long episodes_done, const std::string& source_data_dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir: " + dir.string());

    json manifest;
    manifest["format"] = "dmt-checkpoint-v1";
    manifest["seed"] = model.cfg.seed;
    manifest["episodes_done"] = episodes_done;
    manifest["source_data_dir"] = source_data_dir;
    manifest["pyramid"] = spec_to_json(model.cfg.pyramid);
    manifest["smt"] = {{"gamma", model.cfg.smt.gamma},
                       {"beta", model.cfg.smt.beta},
                       {"ridge", model.cfg.smt.ridge}};
    manifest["weights"] = {{"alpha1", model.cfg.weights.alpha1},
                           {"alpha2", model.cfg.weights.alpha2}};

    json tensors = json::array();
    for (const ParamRef& r : model.trainable_refs()) {
        tensor_write(dir / tensor_file(r.name), *r.tensor);
        tensors.push_back({{"name", r.name},
                           {"file", tensor_file(r.name)},
                           {"shape", r.tensor->shape()}});
    }
    manifest["tensors"] = tensors;

    json adam;
    adam["step"] = optim.step_count();
    json slots = json::array();
    for (const auto& [name, slot] : optim.slots()) {
        tensor_write(dir / tensor_file("adam.m." + name), slot.m);
        tensor_write(dir / tensor_file("adam.v." + name), slot.v);
        slots.push_back(name);
    }
    adam["slots"] = slots;
    manifest["adam"] = adam;

    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("checkpoint manifest not found in " + dir.string());
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw MalformedHeader("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "dmt-checkpoint-v1") {
        throw MalformedHeader("unsupported checkpoint format in " + dir.string());
    }

    ModelConfig cfg;
    cfg.seed = manifest.at("seed").get<std::uint64_t>();
    cfg.pyramid = spec_from_json(manifest.at("pyramid"));
    cfg.smt.gamma = manifest.at("smt").at("gamma").get<float>();
    cfg.smt.beta = manifest.at("smt").at("beta").get<float>();
    cfg.smt.ridge = manifest.at("smt").at("ridge").get<float>();
    cfg.weights.alpha1 = manifest.at("weights").at("alpha1").get<float>();
    cfg.weights.alpha2 = manifest.at("weights").at("alpha2").get<float>();

    Checkpoint ckpt{Model::seeded(cfg), AdamState{}, manifest.at("episodes_done").get<long>(),
                    manifest.value("source_data_dir", "")};

    for (const ParamRef& r : ckpt.model.trainable_refs()) {
        Tensor t = tensor_read(dir / tensor_file(r.name));
        if (!t.same_shape(*r.tensor)) {
            throw ShapeMismatch("checkpoint tensor shape mismatch for " + r.name);
        }
        *r.tensor = std::move(t);
    }

    if (manifest.contains("adam")) {
        std::map<std::string, AdamState::Slot> slots;
        for (const auto& name_json : manifest.at("adam").at("slots")) {
            std::string name = name_json.get<std::string>();
            slots[name] = {tensor_read(dir / tensor_file("adam.m." + name)),
                           tensor_read(dir / tensor_file("adam.v." + name))};
        }
        ckpt.optim.restore(manifest.at("adam").at("step").get<long>(), std::move(slots));
    }
    return ckpt;
}

}  // namespace dmt
