#include "dmt/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <numeric>

#include <json.hpp>

#include "dmt/image_io.hpp"
#include "dmt/objectives.hpp"

namespace dmt {

using nlohmann::json;

const char* family_name(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::kEllipse: return "ellipse";
        case ShapeFamily::kPolygon: return "polygon";
        case ShapeFamily::kRing: return "ring";
    }
    return "ellipse";
}

ShapeFamily family_from_name(const std::string& name) {
    if (name == "ellipse") return ShapeFamily::kEllipse;
    if (name == "polygon") return ShapeFamily::kPolygon;
    if (name == "ring") return ShapeFamily::kRing;
    throw ConfigError("unknown shape family: " + name);
}

void SyntheticDomain::validate() const {
    if (n_classes < 1) throw ConfigError("domain needs at least one class");
    if (!(min_area > 0.0f && max_area < 1.0f && min_area < max_area)) {
        throw ConfigError("bad mask area range");
    }
    for (float g : style.gain) {
        if (g <= 0.0f) throw ConfigError("style gains must be positive");
    }
}

void Dataset::rebuild_index(int n_classes) {
    by_class.assign(static_cast<std::size_t>(n_classes), {});
    for (std::size_t i = 0; i < items.size(); ++i) {
        int c = items[i].class_id;
        if (c < 0 || c >= n_classes) throw ConfigError("class id out of range in dataset");
        by_class[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
    }
}

namespace {

struct ShapeParams {
    ShapeFamily family;
    double cx, cy;       // center, pixels
    double r1, r2;       // ellipse semi-axes / polygon circumradius / ring outer+inner
    double theta;
    int vertices = 0;
};

// Analytic inside test at a pixel center.
bool inside_shape(const ShapeParams& s, double px, double py) {
    double dx = px - s.cx, dy = py - s.cy;
    switch (s.family) {
        case ShapeFamily::kEllipse: {
            double ct = std::cos(s.theta), st = std::sin(s.theta);
            double u = ct * dx + st * dy;
            double v = -st * dx + ct * dy;
            double a = u / s.r1, b = v / s.r2;
            return a * a + b * b <= 1.0;
        }
        case ShapeFamily::kPolygon: {
            // Regular convex polygon: all edge cross products share a sign.
            for (int k = 0; k < s.vertices; ++k) {
                double a0 = s.theta + 2.0 * 3.14159265358979323846 * k / s.vertices;
                double a1 = s.theta + 2.0 * 3.14159265358979323846 * (k + 1) / s.vertices;
                double x0 = s.cx + s.r1 * std::cos(a0), y0 = s.cy + s.r1 * std::sin(a0);
                double x1 = s.cx + s.r1 * std::cos(a1), y1 = s.cy + s.r1 * std::sin(a1);
                double cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                if (cross < 0.0) return false;
            }
            return true;
        }
        case ShapeFamily::kRing: {
            double d2 = dx * dx + dy * dy;
            return d2 <= s.r1 * s.r1 && d2 >= s.r2 * s.r2;
        }
    }
    return false;
}

ShapeParams draw_shape(ShapeFamily family, int class_id, int n_classes, int size, Rng& rng) {
    ShapeParams s;
    s.family = family;
    const double fs = static_cast<double>(size);
    s.cx = rng.uniform(0.42, 0.58) * fs;
    s.cy = rng.uniform(0.42, 0.58) * fs;
    s.theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double t = n_classes > 1 ? static_cast<double>(class_id) / (n_classes - 1) : 0.0;
    switch (family) {
        case ShapeFamily::kEllipse: {
            // Class buckets vary the aspect ratio; the minor axis stays wide
            // enough to survive the coarsest-level mask resize.
            double aspect = 0.62 + 0.30 * t + rng.uniform(0.0, 0.05);
            double b = rng.uniform(0.22, 0.30) * fs;
            s.r1 = std::min(b / aspect, 0.36 * fs);
            s.r2 = b;
            break;
        }
        case ShapeFamily::kPolygon: {
            s.vertices = 5 + class_id % 4;
            s.r1 = rng.uniform(0.27, 0.34) * fs;
            s.r2 = 0.0;
            break;
        }
        case ShapeFamily::kRing: {
            s.r1 = rng.uniform(0.28, 0.34) * fs;
            double rho = std::clamp(0.18 + 0.14 * t + rng.uniform(-0.02, 0.02), 0.15, 0.36);
            s.r2 = rho * s.r1;
            break;
        }
    }
    return s;
}

Tensor rasterize(const ShapeParams& s, int size, double* area_fraction) {
    Tensor mask = Tensor::zeros({size, size});
    long count = 0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (inside_shape(s, x + 0.5, y + 0.5)) {
                mask(y, x) = 1.0f;
                ++count;
            }
        }
    }
    *area_fraction = static_cast<double>(count) / (static_cast<double>(size) * size);
    return mask;
}

struct Harmonic {
    double fy, fx, phase, amp;
};

std::vector<Harmonic> draw_harmonics(int n, Rng& rng) {
    std::vector<Harmonic> hs;
    for (int i = 0; i < n; ++i) {
        hs.push_back({rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5),
                      rng.uniform(0.0, 6.28318530717958647692), rng.uniform(0.4, 1.0)});
    }
    return hs;
}

double field_value(const std::vector<Harmonic>& hs, double u, double v) {
    double s = 0.0;
    for (const Harmonic& h : hs) {
        s += h.amp * std::sin(6.28318530717958647692 * (h.fy * u + h.fx * v) + h.phase);
    }
    return s / static_cast<double>(hs.size());
}

std::uint64_t style_hash(const StyleParams& st) {
    std::uint64_t h = fnv1a(st.gain.data(), sizeof(st.gain));
    h = fnv1a(st.bias.data(), sizeof(st.bias), h);
    return fnv1a(&st.texture_amp, sizeof(st.texture_amp), h);
}

float quantize8(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

}  // namespace

Dataset gen_domain(const SyntheticDomain& spec, int n_images, int image_size, std::uint64_t seed) {
    spec.validate();
    if (n_images < 1 || image_size < 16) throw ConfigError("bad dataset size");

    Dataset ds;
    ds.domain_id = spec.id;
    for (int i = 0; i < n_images; ++i) {
        int class_id = i % spec.n_classes;
        // Geometry depends only on (family, class, index, seed): two domains
        // sharing a family and seed produce identical masks.
        Rng geo(mix_seed(seed, static_cast<std::uint64_t>(spec.family),
                         static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(i)));

        Tensor mask;
        double area = 0.0;
        for (int attempt = 0; attempt < 40; ++attempt) {
            ShapeParams shape = draw_shape(spec.family, class_id, spec.n_classes, image_size, geo);
            mask = rasterize(shape, image_size, &area);
            if (area >= spec.min_area && area <= spec.max_area) break;
        }

        // Appearance is class-level with per-image jitter: same-class shots
        // share foreground (and roughly background) statistics, which is
        // what makes cross-image matching well-posed.
        Rng cls(mix_seed(seed, static_cast<std::uint64_t>(spec.family) + 0x100u,
                         static_cast<std::uint64_t>(class_id)));
        std::array<double, 3> bg{}, fg{};
        for (int c = 0; c < 3; ++c) {
            fg[static_cast<std::size_t>(c)] =
                std::clamp(cls.uniform(0.64, 0.92) + geo.uniform(-0.04, 0.04), 0.60, 0.95);
        }
        for (int c = 0; c < 3; ++c) {
            bg[static_cast<std::size_t>(c)] =
                std::clamp(cls.uniform(0.16, 0.42) + geo.uniform(-0.08, 0.08), 0.10, 0.48);
        }
        std::vector<Harmonic> geo_tex = draw_harmonics(3, geo);

        Rng sty(mix_seed(seed, 0x7374u, static_cast<std::uint64_t>(i), style_hash(spec.style)));
        std::array<std::vector<Harmonic>, 3> style_tex;
        for (auto& tex : style_tex) tex = draw_harmonics(2, sty);

        Tensor img = Tensor::zeros({3, image_size, image_size});
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                double u = (y + 0.5) / image_size, v = (x + 0.5) / image_size;
                double m = mask(y, x);
                double tex = field_value(geo_tex, u, v) * 0.03;
                for (int c = 0; c < 3; ++c) {
                    auto cs = static_cast<std::size_t>(c);
                    double base = bg[cs] + m * (fg[cs] - bg[cs]) + tex;
                    double styled = spec.style.gain[cs] * base + spec.style.bias[cs] +
                                    spec.style.texture_amp * field_value(style_tex[cs], u, v);
                    img(c, y, x) = quantize8(styled);
                }
            }
        }
        ds.items.push_back({Image::from_tensor(std::move(img)), std::move(mask), class_id});
    }
    ds.rebuild_index(spec.n_classes);
    return ds;
}

namespace {

std::string index_name(const char* prefix, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05d.%s", prefix, i, ext);
    return buf;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset dir: " + dir.string());
    json manifest;
    manifest["format"] = "dmt-dataset-v1";
    manifest["domain_id"] = ds.domain_id;
    manifest["n_classes"] = static_cast<int>(ds.by_class.size());
    json classes = json::array();
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        const Sample& s = ds.items[i];
        write_ppm(dir / index_name("img", static_cast<int>(i), "ppm"), s.image.data);
        write_mask_pgm(dir / index_name("msk", static_cast<int>(i), "pgm"), s.mask);
        classes.push_back(s.class_id);
    }
    manifest["classes"] = classes;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write dataset manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("dataset manifest not found in " + dir.string());
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw MalformedHeader("bad dataset manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "dmt-dataset-v1") {
        throw MalformedHeader("unsupported dataset format in " + dir.string());
    }
    Dataset ds;
    ds.domain_id = manifest.value("domain_id", "");
    int n_classes = manifest.at("n_classes").get<int>();
    const auto& classes = manifest.at("classes");
    for (std::size_t i = 0; i < classes.size(); ++i) {
        Tensor img = read_ppm(dir / index_name("img", static_cast<int>(i), "ppm"));
        Tensor msk = read_pgm(dir / index_name("msk", static_cast<int>(i), "pgm"));
        ds.items.push_back(
            {Image::from_tensor(std::move(img)), std::move(msk), classes[i].get<int>()});
    }
    ds.rebuild_index(n_classes);
    return ds;
}

EpisodeIdx sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    const int need = spec.shots + spec.queries;
    std::vector<int> eligible;
    for (std::size_t c = 0; c < ds.by_class.size(); ++c) {
        if (static_cast<int>(ds.by_class[c].size()) >= need) eligible.push_back(static_cast<int>(c));
    }
    if (eligible.empty()) {
        throw InsufficientData("no class has K + Q = " + std::to_string(need) + " items");
    }
    int cls = eligible[rng.below(eligible.size())];
    std::vector<int> pool = ds.by_class[static_cast<std::size_t>(cls)];
    for (int j = 0; j < need; ++j) {
        int k = j + static_cast<int>(rng.below(pool.size() - static_cast<std::size_t>(j)));
        std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(k)]);
    }
    EpisodeIdx ep;
    ep.class_id = cls;
    ep.support.assign(pool.begin(), pool.begin() + spec.shots);
    ep.query.assign(pool.begin() + spec.shots, pool.begin() + need);
    return ep;
}

float iou(const Tensor& pred_binary, const Tensor& gt) {
    if (!pred_binary.same_shape(gt)) throw ShapeMismatch("iou mask shapes differ");
    long inter = 0, uni = 0;
    auto p = pred_binary.data();
    auto g = gt.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        bool a = p[i] > 0.5f, b = g[i] > 0.5f;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    if (uni == 0) return 1.0f;  // both empty: perfect agreement
    return static_cast<float>(static_cast<double>(inter) / static_cast<double>(uni));
}

namespace {

Tensor identity_matrix(int n) {
    Tensor t = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

void add_fusion_grads(FusionGrads& dst, FusionGrads& src) {
    auto d = fusion_grad_refs(dst);
    auto s = fusion_grad_refs(src);
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < d[i].tensor->size(); ++j) {
            d[i].tensor->data()[j] += s[i].tensor->data()[j];
        }
    }
}

}  // namespace

EpisodeForward episode_forward(const Model& model, const std::vector<const Sample*>& support,
                               const Image& query_image, bool keep_cache,
                               const PipelineOptions& opts) {
    if (support.empty()) throw InsufficientData("episode needs at least one support shot");
    EpisodeForward fwd;
    fwd.bypassed = opts.bypass_smt;
    for (const Sample* s : support) {
        fwd.support_pyrs.push_back(model.extractor.extract(s->image, ExtractMode::kFilterbank));
    }
    fwd.query_pyr = model.extractor.extract(query_image, ExtractMode::kFilterbank);

    std::vector<SupportShot> shots;
    for (std::size_t k = 0; k < support.size(); ++k) {
        shots.push_back({&fwd.support_pyrs[k], &support[k]->mask});
    }
    fwd.smt = smt_forward(shots, fwd.query_pyr, model.anchors, model.cfg.pyramid, model.cfg.smt);
    if (opts.bypass_smt) {
        for (SmtLevel& lvl : fwd.smt.levels) {
            lvl.w_s = identity_matrix(lvl.w_s.dim(0));
            lvl.w_q = identity_matrix(lvl.w_q.dim(0));
        }
    }

    std::vector<Tensor> w_s, w_q;
    for (const SmtLevel& lvl : fwd.smt.levels) {
        w_s.push_back(lvl.w_s);
        w_q.push_back(lvl.w_q);
    }

    const float inv_k = 1.0f / static_cast<float>(support.size());
    for (std::size_t k = 0; k < support.size(); ++k) {
        DhcCache cache;
        DhcResult res = dhc_forward(fwd.support_pyrs[k], support[k]->mask, fwd.query_pyr, w_s, w_q,
                                    keep_cache ? &cache : nullptr);
        if (k == 0) {
            fwd.corr_f = std::move(res.corr_f);
            fwd.corr_b = std::move(res.corr_b);
        } else {
            for (std::size_t l = 0; l < fwd.corr_f.size(); ++l) {
                for (std::size_t i = 0; i < fwd.corr_f[l].size(); ++i) {
                    fwd.corr_f[l].data()[i] += res.corr_f[l].data()[i];
                    fwd.corr_b[l].data()[i] += res.corr_b[l].data()[i];
                }
            }
        }
        if (keep_cache) fwd.dhc_caches.push_back(std::move(cache));
    }
    if (support.size() > 1) {
        for (std::size_t l = 0; l < fwd.corr_f.size(); ++l) {
            for (float& v : fwd.corr_f[l].data()) v *= inv_k;
            for (float& v : fwd.corr_b[l].data()) v *= inv_k;
        }
    }

    fwd.heads = fusion_forward(fwd.corr_f, fwd.corr_b, model.fusion, query_image.height(),
                               query_image.width(), keep_cache ? &fwd.fusion_cache : nullptr);
    return fwd;
}

void episode_backward(const Model& model, const EpisodeForward& fwd, const Tensor& d_m_f,
                      const Tensor& d_m_b, ModelGrads& grads) {
    if (fwd.dhc_caches.empty()) throw StaleCache("episode_forward ran without keep_cache");
    FusionGrads fg = fusion_backward(model.fusion, fwd.fusion_cache, d_m_f, d_m_b);
    add_fusion_grads(grads.fusion, fg);

    const std::size_t shots = fwd.dhc_caches.size();
    const float inv_k = 1.0f / static_cast<float>(shots);
    if (shots > 1) {
        for (std::size_t l = 0; l < fg.d_corr_f.size(); ++l) {
            for (float& v : fg.d_corr_f[l].data()) v *= inv_k;
            for (float& v : fg.d_corr_b[l].data()) v *= inv_k;
        }
    }

    std::vector<Tensor> d_w_s, d_w_q;
    for (const SmtLevel& lvl : fwd.smt.levels) {
        d_w_s.push_back(Tensor::zeros(lvl.w_s.shape()));
        d_w_q.push_back(Tensor::zeros(lvl.w_q.shape()));
    }
    for (const DhcCache& cache : fwd.dhc_caches) {
        dhc_backward(fg.d_corr_f, fg.d_corr_b, cache, fwd.query_pyr, d_w_s, d_w_q);
    }
    // Under SMT bypass the transforms are constants; anchors get no gradient.
    if (!fwd.bypassed) {
        accumulate_anchor_grads(model.anchors, model.cfg.pyramid, fwd.smt, d_w_s, d_w_q,
                                grads.anchors);
    }
}

Tensor predict_binary(const HeadOutput& heads, const PipelineOptions& opts) {
    Tensor prob = heads.m_f;
    if (opts.combine_fb) {
        for (std::size_t i = 0; i < prob.size(); ++i) {
            prob.data()[i] = 0.5f * (heads.m_f.data()[i] + 1.0f - heads.m_b.data()[i]);
        }
    }
    Tensor bin = Tensor::zeros(prob.shape());
    for (std::size_t i = 0; i < prob.size(); ++i) {
        bin.data()[i] = prob.data()[i] >= 0.5f ? 1.0f : 0.0f;
    }
    return bin;
}

void TsfConfig::validate() const {
    if (steps < 0) throw ConfigError("tsf steps must be >= 0");
    if (lr < 0.0f) throw ConfigError("tsf lr must be >= 0");
    if (!group_name_valid(group)) throw ConfigError("unknown tsf group: " + group);
}

TsfOutcome tsf_finetune(Model& model, const std::vector<const Sample*>& shots,
                        const TsfConfig& cfg, const PipelineOptions& opts) {
    cfg.validate();
    if (shots.empty()) throw InsufficientData("tsf needs at least one shot");
    const std::size_t k_shots = shots.size();

    // K = 1: the shot predicts itself. K > 1: leave-one-out.
    auto pass = [&](bool want_grads, ModelGrads* grads) {
        std::vector<Tensor> preds, gts;
        for (std::size_t k = 0; k < k_shots; ++k) {
            std::vector<const Sample*> sup;
            if (k_shots == 1) {
                sup.push_back(shots[0]);
            } else {
                for (std::size_t j = 0; j < k_shots; ++j) {
                    if (j != k) sup.push_back(shots[j]);
                }
            }
            EpisodeForward fwd = episode_forward(model, sup, shots[k]->image, want_grads, opts);
            if (want_grads) {
                Tensor d_m_f = bce_grad(fwd.heads.m_f, shots[k]->mask);
                for (float& v : d_m_f.data()) v /= static_cast<float>(k_shots);
                Tensor d_m_b = Tensor::zeros(d_m_f.shape());
                episode_backward(model, fwd, d_m_f, d_m_b, *grads);
            }
            preds.push_back(std::move(fwd.heads.m_f));
            gts.push_back(shots[k]->mask);
        }
        return loss_tsf(preds, gts);
    };

    TsfOutcome out;
    if (cfg.steps == 0) {
        out.loss_before = out.loss_after = pass(false, nullptr);
        out.loss_trace = {out.loss_before};
        return out;
    }

    std::vector<ParamRef> tuned = model.group_refs(cfg.group);
    AdamState optim;
    AdamConfig ocfg;
    ocfg.lr = cfg.lr;
    for (int step = 0; step < cfg.steps; ++step) {
        ModelGrads grads = ModelGrads::zeros_like(model);
        double loss = pass(true, &grads);
        if (step == 0) out.loss_before = loss;
        out.loss_trace.push_back(loss);
        if (!std::isfinite(loss)) throw NonFiniteLoss("tsf loss non-finite");

        std::map<std::string, Tensor*> by_name;
        for (const ParamRef& r : grads.refs()) by_name[r.name] = r.tensor;
        std::vector<ParamRef> tuned_grads;
        for (const ParamRef& r : tuned) tuned_grads.push_back({r.name, by_name.at(r.name)});
        optim.step(tuned, tuned_grads, ocfg);
    }
    out.loss_after = pass(false, nullptr);
    out.loss_trace.push_back(out.loss_after);
    return out;
}

namespace {

bool degenerate_episode(const Error& e) {
    return dynamic_cast<const EmptyMask*>(&e) != nullptr ||
           dynamic_cast<const NoValidPrototypes*>(&e) != nullptr ||
           dynamic_cast<const SingularPrototypeMatrix*>(&e) != nullptr ||
           dynamic_cast<const ZeroPrototype*>(&e) != nullptr;
}

}  // namespace

TrainOutcome meta_train(Model& model, const Dataset& source, const TrainConfig& cfg,
                        AdamState& optim, long start_episode) {
    cfg.episode.validate();
    if (cfg.lr < 0.0f) throw ConfigError("learning rate must be >= 0");
    TrainOutcome out;
    std::vector<ParamRef> params = model.trainable_refs();
    AdamConfig ocfg;
    ocfg.lr = cfg.lr;

    for (int e = 0; e < cfg.episodes; ++e) {
        long idx = start_episode + e;
        Rng rng(mix_seed(cfg.seed, 0x747261u, static_cast<std::uint64_t>(idx)));
        EpisodeIdx ep = sample_episode(source, cfg.episode, rng);
        std::vector<const Sample*> support;
        for (int i : ep.support) support.push_back(&source.items[static_cast<std::size_t>(i)]);

        try {
            ModelGrads grads = ModelGrads::zeros_like(model);
            double l1 = 0.0, l2 = 0.0;
            const double inv_q = 1.0 / static_cast<double>(ep.query.size());
            for (int qi : ep.query) {
                const Sample& q = source.items[static_cast<std::size_t>(qi)];
                EpisodeForward fwd = episode_forward(model, support, q.image, true);
                l1 += loss_coarse(fwd.smt.coarse, q.mask) * inv_q;
                l2 += loss_dual(fwd.heads.m_f, fwd.heads.m_b, q.mask, model.cfg.weights) * inv_q;
                DualGrads dg = loss_dual_grads(fwd.heads.m_f, fwd.heads.m_b, q.mask,
                                               model.cfg.weights);
                for (float& v : dg.d_m_f.data()) v = static_cast<float>(v * inv_q);
                for (float& v : dg.d_m_b.data()) v = static_cast<float>(v * inv_q);
                episode_backward(model, fwd, dg.d_m_f, dg.d_m_b, grads);
            }
            double total = loss_total(l1, l2, model.cfg.weights);
            if (!std::isfinite(total)) {
                throw NonFiniteLoss("episode " + std::to_string(idx) + " produced loss " +
                                    std::to_string(total) + " (l1=" + std::to_string(l1) +
                                    ", l2=" + std::to_string(l2) + ", class=" +
                                    std::to_string(ep.class_id) + ")");
            }
            optim.step(params, grads.refs(), ocfg);
            out.log.push_back({idx, ep.class_id, l1, l2, total});
        } catch (const Error& err) {
            if (!degenerate_episode(err)) throw;
            ++out.skipped;
        }
    }
    out.episodes_done = start_episode + cfg.episodes;
    return out;
}

namespace {

struct EpisodeEval {
    EpisodeRow row;
    double base_iou = 0.0;
    bool ok = false;
};

EpisodeEval run_test_episode(const Model& base_model, const Dataset& target,
                             const MetaTestConfig& cfg, int run, long episode_idx) {
    EpisodeEval out;
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(run) + 1,
                     static_cast<std::uint64_t>(episode_idx)));
    EpisodeIdx ep = sample_episode(target, cfg.episode, rng);
    std::vector<const Sample*> support;
    for (int i : ep.support) support.push_back(&target.items[static_cast<std::size_t>(i)]);

    try {
        // No-TSF arm on the frozen base model.
        double base_acc = 0.0;
        for (int qi : ep.query) {
            const Sample& q = target.items[static_cast<std::size_t>(qi)];
            EpisodeForward fwd = episode_forward(base_model, support, q.image, false, cfg.pipeline);
            base_acc += iou(predict_binary(fwd.heads, cfg.pipeline), q.mask);
        }
        out.base_iou = base_acc / static_cast<double>(ep.query.size());

        Model tuned = base_model;
        TsfOutcome tsf;
        if (cfg.tsf_enabled && cfg.tsf.steps > 0) {
            tsf = tsf_finetune(tuned, support, cfg.tsf, cfg.pipeline);
        } else {
            TsfConfig zero = cfg.tsf;
            zero.steps = 0;
            tsf = tsf_finetune(tuned, support, zero, cfg.pipeline);
        }

        double iou_acc = 0.0, l1 = 0.0, l2 = 0.0;
        const double inv_q = 1.0 / static_cast<double>(ep.query.size());
        for (std::size_t qn = 0; qn < ep.query.size(); ++qn) {
            const Sample& q = target.items[static_cast<std::size_t>(ep.query[qn])];
            EpisodeForward fwd = episode_forward(tuned, support, q.image, false, cfg.pipeline);
            Tensor pred = predict_binary(fwd.heads, cfg.pipeline);
            iou_acc += iou(pred, q.mask) * inv_q;
            l1 += loss_coarse(fwd.smt.coarse, q.mask) * inv_q;
            l2 += loss_dual(fwd.heads.m_f, fwd.heads.m_b, q.mask, tuned.cfg.weights) * inv_q;
            if (!cfg.dump_dir.empty()) {
                char name[64];
                std::snprintf(name, sizeof(name), "run%d_ep%05ld_q%zu.pgm", run, episode_idx, qn);
                write_mask_pgm(std::filesystem::path(cfg.dump_dir) / name, pred);
            }
        }
        out.row = {run, episode_idx, ep.class_id, static_cast<float>(iou_acc), l1, l2,
                   tsf.loss_before, tsf.loss_after};
        out.ok = true;
    } catch (const Error& err) {
        if (!degenerate_episode(err)) throw;
        out.ok = false;
    }
    return out;
}

double population_std(const std::vector<double>& xs, double mean) {
    if (xs.empty()) return 0.0;
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

}  // namespace

MetaTestReport meta_test(const Model& model, const Dataset& target, const MetaTestConfig& cfg) {
    cfg.episode.validate();
    cfg.tsf.validate();
    if (cfg.runs < 1 || cfg.episodes < 1) throw ConfigError("runs and episodes must be >= 1");

    MetaTestReport report;
    for (int run = 0; run < cfg.runs; ++run) {
        std::vector<EpisodeEval> evals(static_cast<std::size_t>(cfg.episodes));
        if (cfg.jobs > 1) {
            std::vector<std::future<EpisodeEval>> futures;
            for (int e = 0; e < cfg.episodes; ++e) {
                futures.push_back(std::async(std::launch::async, run_test_episode, std::cref(model),
                                             std::cref(target), std::cref(cfg), run,
                                             static_cast<long>(e)));
                if (static_cast<int>(futures.size()) == cfg.jobs || e == cfg.episodes - 1) {
                    int base = e + 1 - static_cast<int>(futures.size());
                    for (std::size_t f = 0; f < futures.size(); ++f) {
                        evals[static_cast<std::size_t>(base) + f] = futures[f].get();
                    }
                    futures.clear();
                }
            }
        } else {
            for (int e = 0; e < cfg.episodes; ++e) {
                evals[static_cast<std::size_t>(e)] = run_test_episode(model, target, cfg, run, e);
            }
        }

        double acc = 0.0, base_acc = 0.0;
        int ok = 0;
        for (EpisodeEval& ev : evals) {
            if (!ev.ok) {
                ++report.skipped;
                continue;
            }
            report.rows.push_back(ev.row);
            acc += ev.row.iou_value;
            base_acc += ev.base_iou;
            ++ok;
        }
        if (ok == 0) throw InsufficientData("every episode in run " + std::to_string(run) +
                                            " was degenerate");
        report.run_miou.push_back(acc / ok);
        report.run_miou_base.push_back(base_acc / ok);
    }

    auto mean = [](const std::vector<double>& xs) {
        return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    };
    report.miou_mean = mean(report.run_miou);
    report.miou_std = population_std(report.run_miou, report.miou_mean);
    report.miou_base_mean = mean(report.run_miou_base);
    report.miou_base_std = population_std(report.run_miou_base, report.miou_base_mean);
    return report;
}

std::vector<double> feature_distance_per_level(const std::vector<FeaturePyramid>& a,
                                               const std::vector<FeaturePyramid>& b,
                                               const std::vector<std::vector<Tensor>>* w_a,
                                               const std::vector<std::vector<Tensor>>* w_b,
                                               bool transformed) {
    if (a.empty() || b.empty()) throw ShapeMismatch("feature_distance needs non-empty sets");
    const std::size_t levels = a.front().size();
    if (b.front().size() != levels) throw ShapeMismatch("pyramid level counts differ");
    if (transformed && (w_a == nullptr || w_b == nullptr || w_a->size() != a.size() ||
                        w_b->size() != b.size())) {
        throw ShapeMismatch("transformed distance needs one transform list per image");
    }

    auto mean_vec = [&](const std::vector<FeaturePyramid>& set,
                        const std::vector<std::vector<Tensor>>* ws, std::size_t level) {
        const int c = set.front()[level].dim(0);
        std::vector<double> mu(static_cast<std::size_t>(c), 0.0);
        long count = 0;
        for (std::size_t i = 0; i < set.size(); ++i) {
            const Tensor* f = &set[i][level];
            Tensor tf;
            if (transformed) {
                tf = apply_transform((*ws)[i][level], *f);
                f = &tf;
            }
            const int h = f->dim(1), w = f->dim(2);
            for (int ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (int y = 0; y < h; ++y) {
                    for (int x = 0; x < w; ++x) s += (*f)(ch, y, x);
                }
                mu[static_cast<std::size_t>(ch)] += s;
            }
            count += static_cast<long>(h) * w;
        }
        for (double& v : mu) v /= static_cast<double>(count);
        return mu;
    };

    std::vector<double> out;
    for (std::size_t l = 0; l < levels; ++l) {
        std::vector<double> mu_a = mean_vec(a, w_a, l);
        std::vector<double> mu_b = mean_vec(b, w_b, l);
        if (mu_a.size() != mu_b.size()) throw ShapeMismatch("channel counts differ at a level");
        double acc = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            acc += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
        }
        out.push_back(std::sqrt(acc));
    }
    return out;
}

double feature_distance(const std::vector<FeaturePyramid>& a, const std::vector<FeaturePyramid>& b,
                        const std::vector<std::vector<Tensor>>* w_a,
                        const std::vector<std::vector<Tensor>>* w_b, bool transformed) {
    std::vector<double> per_level = feature_distance_per_level(a, b, w_a, w_b, transformed);
    return std::accumulate(per_level.begin(), per_level.end(), 0.0) /
           static_cast<double>(per_level.size());
}

std::vector<Tensor> self_transforms(const Model& model, const Sample& sample) {
    FeaturePyramid pyr = model.extractor.extract(sample.image, ExtractMode::kFilterbank);
    std::vector<Tensor> ws;
    for (int l = 0; l < model.cfg.pyramid.levels; ++l) {
        const Tensor& f = pyr[static_cast<std::size_t>(l)];
        Tensor mask_l = bilinear_resize_2d(sample.mask, f.dim(1), f.dim(2));
        Tensor inv = Tensor::zeros(mask_l.shape());
        for (std::size_t i = 0; i < inv.size(); ++i) inv.data()[i] = 1.0f - mask_l.data()[i];
        Tensor c_f = masked_avg_pool(f, mask_l);
        Tensor c_b = masked_avg_pool(f, inv);
        Tensor c = build_prototype_matrix(c_f, c_b);
        Tensor a = anchor_matrix(model.anchors, Role::kSupport, model.cfg.pyramid.group_of(l));
        ws.push_back(solve_transform(a, pinv2(c, model.cfg.smt.ridge)));
    }
    return ws;
}

DistancePair domain_distance(const Model& model, const Dataset& a, const Dataset& b,
                             int max_images) {
    auto collect = [&](const Dataset& ds, std::vector<FeaturePyramid>& pyrs,
                       std::vector<std::vector<Tensor>>& ws) {
        int n = std::min<int>(max_images, static_cast<int>(ds.items.size()));
        for (int i = 0; i < n; ++i) {
            const Sample& s = ds.items[static_cast<std::size_t>(i)];
            try {
                std::vector<Tensor> w = self_transforms(model, s);
                pyrs.push_back(model.extractor.extract(s.image, ExtractMode::kFilterbank));
                ws.push_back(std::move(w));
            } catch (const Error& err) {
                if (!degenerate_episode(err)) throw;
            }
        }
    };
    std::vector<FeaturePyramid> pyrs_a, pyrs_b;
    std::vector<std::vector<Tensor>> w_a, w_b;
    collect(a, pyrs_a, w_a);
    collect(b, pyrs_b, w_b);
    if (pyrs_a.empty() || pyrs_b.empty()) {
        throw InsufficientData("no usable images for the distance diagnostic");
    }
    DistancePair out;
    out.pre = feature_distance(pyrs_a, pyrs_b, nullptr, nullptr, false);
    out.post = feature_distance(pyrs_a, pyrs_b, &w_a, &w_b, true);
    return out;
}

std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_train_log_csv(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows,
                         bool append) {
    bool header = !append || !std::filesystem::exists(path);
    std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
    if (!os) throw IoError("cannot write training log: " + path.string());
    if (header) os << "episode,class,l1,l2,total\n";
    for (const TrainLogRow& r : rows) {
        os << r.episode << "," << r.class_id << "," << format_g9(r.l1) << "," << format_g9(r.l2)
           << "," << format_g9(r.total) << "\n";
    }
}

void write_report_csv(const std::filesystem::path& path, const std::vector<EpisodeRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write report: " + path.string());
    os << "run,episode,class,iou,l1,l2,tsf_loss_before,tsf_loss_after\n";
    for (const EpisodeRow& r : rows) {
        os << r.run << "," << r.episode << "," << r.class_id << ","
           << format_g9(static_cast<double>(r.iou_value)) << "," << format_g9(r.l1) << ","
           << format_g9(r.l2) << "," << format_g9(r.tsf_before) << "," << format_g9(r.tsf_after)
           << "\n";
    }
}

void write_summary_json(const std::filesystem::path& path, const MetaTestReport& report,
                        const MetaTestConfig& cfg, const std::optional<DistancePair>& distance) {
    json j;
    j["runs"] = cfg.runs;
    j["episodes_per_run"] = cfg.episodes;
    j["seed"] = cfg.seed;
    j["shots"] = cfg.episode.shots;
    j["queries"] = cfg.episode.queries;
    j["tsf_enabled"] = cfg.tsf_enabled && cfg.tsf.steps > 0;
    j["tsf"] = {{"steps", cfg.tsf.steps}, {"lr", cfg.tsf.lr}, {"group", cfg.tsf.group}};
    j["bypass_smt"] = cfg.pipeline.bypass_smt;
    j["combine_fb"] = cfg.pipeline.combine_fb;
    j["run_miou"] = report.run_miou;
    j["run_miou_no_tsf"] = report.run_miou_base;
    j["miou_mean"] = report.miou_mean;
    j["miou_std"] = report.miou_std;
    j["miou_no_tsf_mean"] = report.miou_base_mean;
    j["miou_no_tsf_std"] = report.miou_base_std;
    j["skipped_episodes"] = report.skipped;
    if (distance.has_value()) {
        j["feature_distance_pre"] = distance->pre;
        j["feature_distance_post"] = distance->post;
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write summary: " + path.string());
    os << j.dump(2) << "\n";
}

}  // namespace dmt
