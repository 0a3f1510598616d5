#include "dmt/smt.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dmt/rng.hpp"

namespace dmt {

void SmtConfig::validate() const {
    if (!(gamma > 0.0f && gamma <= 1.0f)) throw ConfigError("gamma must be in (0, 1]");
    double inv = 1.0 / static_cast<double>(gamma);
    if (std::abs(inv - std::round(inv)) > 1e-6) {
        throw DimensionMismatch("1/gamma must be an integer, got gamma=" + std::to_string(gamma));
    }
    if (beta < 0.0f || beta > 1.0f) throw ConfigError("beta must be in [0, 1]");
    if (ridge < 0.0f) throw ConfigError("ridge must be non-negative");
}

int SmtConfig::patches_per_side() const {
    return static_cast<int>(std::lround(1.0 / static_cast<double>(gamma)));
}

AnchorSet AnchorSet::seeded(const PyramidSpec& spec, std::uint64_t seed) {
    spec.validate();
    AnchorSet set;
    Rng rng(mix_seed(seed, 0x616eu));
    auto draw = [&rng](int c) {
        Tensor t = Tensor::zeros({c});
        for (float& v : t.data()) v = static_cast<float>(rng.normal());
        return t;
    };
    for (int g = 0; g < 3; ++g) {
        int c = 0;
        try {
            c = spec.group_channels(g);
        } catch (const ConfigError&) {
            // Fewer than three populated groups (L < 3): leave placeholders.
            c = 1;
        }
        // Both roles start from the same draw so foreground query pixels and
        // masked support pixels map onto the same target direction; training
        // differentiates the roles from there.
        Tensor a_f = draw(c);
        Tensor a_b = draw(c);
        set.support[static_cast<std::size_t>(g)] = {a_f, a_b};
        set.query[static_cast<std::size_t>(g)] = {std::move(a_f), std::move(a_b)};
    }
    return set;
}

Tensor masked_avg_pool(const Tensor& features, const Tensor& mask) {
    if (features.rank() != 3 || mask.rank() != 2) {
        throw ShapeMismatch("masked_avg_pool expects C x H x W features and an H x W mask");
    }
    const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
    if (mask.dim(0) != h || mask.dim(1) != w) {
        throw ShapeMismatch("mask resolution does not match features");
    }
    double mass = 0.0;
    for (float v : mask.data()) mass += v;
    if (mass < 1e-6) throw EmptyMask("mask mass " + std::to_string(mass) + " below 1e-6");

    Tensor out = Tensor::zeros({c});
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                acc += static_cast<double>(features(ch, y, x)) * mask(y, x);
            }
        }
        out(ch) = static_cast<float>(acc / mass);
    }
    return out;
}

std::vector<LocalTile> split_local(const Tensor& features, const Tensor& mask, float gamma) {
    if (features.rank() != 3 || mask.rank() != 2) {
        throw ShapeMismatch("split_local expects C x H x W features and an H x W mask");
    }
    double inv = 1.0 / static_cast<double>(gamma);
    if (std::abs(inv - std::round(inv)) > 1e-6) {
        throw DimensionMismatch("1/gamma must be an integer");
    }
    const int n = static_cast<int>(std::lround(inv));
    const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
    if (mask.dim(0) != h || mask.dim(1) != w) throw ShapeMismatch("mask does not match features");
    if (h % n != 0 || w % n != 0) {
        throw DimensionMismatch("feature size " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by 1/gamma = " + std::to_string(n));
    }
    const int th = h / n, tw = w / n;
    std::vector<LocalTile> tiles;
    tiles.reserve(static_cast<std::size_t>(n) * n);
    for (int ty = 0; ty < n; ++ty) {
        for (int tx = 0; tx < n; ++tx) {
            Tensor tf = Tensor::zeros({c, th, tw});
            Tensor tm = Tensor::zeros({th, tw});
            for (int y = 0; y < th; ++y) {
                for (int x = 0; x < tw; ++x) {
                    tm(y, x) = mask(ty * th + y, tx * tw + x);
                    for (int ch = 0; ch < c; ++ch) {
                        tf(ch, y, x) = features(ch, ty * th + y, tx * tw + x);
                    }
                }
            }
            tiles.push_back({std::move(tf), std::move(tm)});
        }
    }
    return tiles;
}

namespace {

// Per-pixel cosine similarity against one prototype vector.
Tensor cosine_map(const Tensor& features, const Tensor& proto) {
    const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
    if (proto.rank() != 1 || proto.dim(0) != c) throw ShapeMismatch("prototype length mismatch");

    double pn = 0.0;
    for (float v : proto.data()) pn += static_cast<double>(v) * v;
    pn = std::sqrt(pn);

    std::vector<double> dot(static_cast<std::size_t>(h) * w, 0.0);
    std::vector<double> nrm(static_cast<std::size_t>(h) * w, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        double pv = proto(ch);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double fv = features(ch, y, x);
                std::size_t i = static_cast<std::size_t>(y) * w + x;
                dot[i] += pv * fv;
                nrm[i] += fv * fv;
            }
        }
    }
    Tensor out = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * w + x;
            double fn = std::sqrt(nrm[i]);
            if (pn < 1e-8 || fn < 1e-8) {
                out(y, x) = 0.0f;
            } else {
                out(y, x) = static_cast<float>(std::clamp(dot[i] / (pn * fn), -1.0, 1.0));
            }
        }
    }
    return out;
}

}  // namespace

CoarseMaskLevel self_match(const Tensor& query_features, const std::vector<LocalPair>& locals,
                           const LocalPair* global_fallback) {
    const int h = query_features.dim(1), w = query_features.dim(2);

    std::vector<const LocalPair*> active;
    for (const LocalPair& p : locals) {
        if (p.valid) active.push_back(&p);
    }
    if (active.empty()) {
        if (global_fallback != nullptr && global_fallback->valid) {
            active.push_back(global_fallback);
        } else {
            throw NoValidPrototypes("no valid local pairs and no global fallback");
        }
    }

    Tensor fg_sum = Tensor::zeros({h, w});
    Tensor bg_sum = Tensor::zeros({h, w});
    for (const LocalPair* p : active) {
        Tensor sim_f = cosine_map(query_features, p->c_f);
        Tensor sim_b = cosine_map(query_features, p->c_b);
        auto [pf, pb] = softmax_pair(sim_f, sim_b);
        for (std::size_t i = 0; i < fg_sum.size(); ++i) {
            fg_sum.data()[i] += pf.data()[i];
            bg_sum.data()[i] += pb.data()[i];
        }
    }
    const float inv = 1.0f / static_cast<float>(active.size());
    for (std::size_t i = 0; i < fg_sum.size(); ++i) {
        fg_sum.data()[i] *= inv;
        bg_sum.data()[i] *= inv;
    }
    return {std::move(fg_sum), std::move(bg_sum)};
}

std::pair<Tensor, Tensor> query_prototypes(const Tensor& query_features,
                                           const CoarseMaskLevel& coarse) {
    Tensor c_f = masked_avg_pool(query_features, coarse.fg);
    Tensor c_b = masked_avg_pool(query_features, coarse.bg);
    return {std::move(c_f), std::move(c_b)};
}

Tensor build_prototype_matrix(const Tensor& c_f, const Tensor& c_b) {
    if (c_f.rank() != 1 || c_b.rank() != 1 || c_f.dim(0) != c_b.dim(0)) {
        throw ShapeMismatch("prototype vectors must be rank-1 of equal length");
    }
    const int c = c_f.dim(0);
    double nf = 0.0, nb = 0.0;
    for (int i = 0; i < c; ++i) {
        nf += static_cast<double>(c_f(i)) * c_f(i);
        nb += static_cast<double>(c_b(i)) * c_b(i);
    }
    nf = std::sqrt(nf);
    nb = std::sqrt(nb);
    if (nf < 1e-8 || nb < 1e-8) throw ZeroPrototype("prototype norm below 1e-8");

    Tensor m = Tensor::zeros({c, 2});
    for (int i = 0; i < c; ++i) {
        m(i, 0) = static_cast<float>(c_f(i) / nf);
        m(i, 1) = static_cast<float>(c_b(i) / nb);
    }
    return m;
}

Tensor blend_pinv(const Tensor& cq_plus, const Tensor& cs_plus, float beta) {
    if (!cq_plus.same_shape(cs_plus)) throw ShapeMismatch("blend_pinv shapes differ");
    Tensor out = Tensor::zeros(cq_plus.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = beta * cq_plus.data()[i] + (1.0f - beta) * cs_plus.data()[i];
    }
    return out;
}

Tensor solve_transform(const Tensor& anchor_mat, const Tensor& c_plus) {
    return matmul(anchor_mat, c_plus);
}

Tensor apply_transform(const Tensor& w, const Tensor& features) {
    if (w.rank() != 2 || features.rank() != 3) throw ShapeMismatch("apply_transform rank mismatch");
    const int c = features.dim(0), h = features.dim(1), wd = features.dim(2);
    if (w.dim(0) != c || w.dim(1) != c) throw ShapeMismatch("transform must be C x C");
    Tensor out = Tensor::zeros({c, h, wd});
    for (int oc = 0; oc < c; ++oc) {
        for (int ic = 0; ic < c; ++ic) {
            float wv = w(oc, ic);
            if (wv == 0.0f) continue;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < wd; ++x) {
                    out(oc, y, x) += wv * features(ic, y, x);
                }
            }
        }
    }
    return out;
}

LevelPrototypes compute_level_prototypes(const Tensor& features, const Tensor& mask, float gamma) {
    LevelPrototypes out;
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor inv_mask = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) inv_mask(y, x) = 1.0f - mask(y, x);
    }
    out.c_f = masked_avg_pool(features, mask);
    out.c_b = masked_avg_pool(features, inv_mask);

    for (const LocalTile& tile : split_local(features, mask, gamma)) {
        LocalPair pair;
        double fg_mass = 0.0, bg_mass = 0.0;
        for (float v : tile.mask.data()) {
            fg_mass += v;
            bg_mass += 1.0f - v;
        }
        if (fg_mass >= 1e-6 && bg_mass >= 1e-6) {
            Tensor tile_inv = Tensor::zeros(tile.mask.shape());
            for (std::size_t i = 0; i < tile_inv.size(); ++i) {
                tile_inv.data()[i] = 1.0f - tile.mask.data()[i];
            }
            pair.c_f = masked_avg_pool(tile.features, tile.mask);
            pair.c_b = masked_avg_pool(tile.features, tile_inv);
            pair.valid = true;
        }
        out.locals.push_back(std::move(pair));
    }
    return out;
}

Tensor anchor_matrix(const AnchorSet& anchors, Role role, int group) {
    const AnchorSet::Pair& pair = role == Role::kSupport ? anchors.support[static_cast<std::size_t>(group)]
                                                         : anchors.query[static_cast<std::size_t>(group)];
    return build_prototype_matrix(pair.a_f, pair.a_b);
}

namespace {

Tensor average_vectors(const std::vector<const Tensor*>& vs) {
    Tensor out = Tensor::zeros(vs.front()->shape());
    for (const Tensor* v : vs) {
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += v->data()[i];
    }
    const float inv = 1.0f / static_cast<float>(vs.size());
    for (float& v : out.data()) v *= inv;
    return out;
}

// Shot-averaged prototypes for one level: globals averaged over all shots,
// local tile p averaged over the shots where it is valid (fg and bg sides
// independently; the pair is valid when each side is valid in some shot).
LevelPrototypes aggregate_shots(const std::vector<LevelPrototypes>& per_shot) {
    if (per_shot.size() == 1) return per_shot.front();
    LevelPrototypes out;
    {
        std::vector<const Tensor*> fs, bs;
        for (const auto& p : per_shot) {
            fs.push_back(&p.c_f);
            bs.push_back(&p.c_b);
        }
        out.c_f = average_vectors(fs);
        out.c_b = average_vectors(bs);
    }
    std::size_t tiles = per_shot.front().locals.size();
    for (std::size_t t = 0; t < tiles; ++t) {
        std::vector<const Tensor*> fs, bs;
        for (const auto& p : per_shot) {
            if (p.locals[t].valid) {
                fs.push_back(&p.locals[t].c_f);
                bs.push_back(&p.locals[t].c_b);
            }
        }
        LocalPair pair;
        if (!fs.empty()) {
            pair.c_f = average_vectors(fs);
            pair.c_b = average_vectors(bs);
            pair.valid = true;
        }
        out.locals.push_back(std::move(pair));
    }
    return out;
}

}  // namespace

SmtResult smt_forward(const std::vector<SupportShot>& support, const FeaturePyramid& query,
                      const AnchorSet& anchors, const PyramidSpec& spec, const SmtConfig& cfg) {
    cfg.validate();
    spec.validate();
    if (support.empty()) throw InsufficientData("at least one support shot required");
    if (static_cast<int>(query.size()) != spec.levels) {
        throw ShapeMismatch("query pyramid level count does not match spec");
    }
    for (const SupportShot& s : support) {
        if (s.pyramid == nullptr || s.mask == nullptr ||
            static_cast<int>(s.pyramid->size()) != spec.levels) {
            throw ShapeMismatch("support shot pyramid does not match spec");
        }
    }

    SmtResult result;
    for (int l = 0; l < spec.levels; ++l) {
        const Tensor& f_q = query[static_cast<std::size_t>(l)];
        const int h = f_q.dim(1), w = f_q.dim(2);

        std::vector<LevelPrototypes> per_shot;
        for (const SupportShot& s : support) {
            const Tensor& f_s = (*s.pyramid)[static_cast<std::size_t>(l)];
            if (f_s.dim(1) != h || f_s.dim(2) != w || f_s.dim(0) != f_q.dim(0)) {
                throw ShapeMismatch("support/query level shapes differ");
            }
            Tensor mask_l = bilinear_resize_2d(*s.mask, h, w);
            per_shot.push_back(compute_level_prototypes(f_s, mask_l, cfg.gamma));
        }
        LevelPrototypes protos = aggregate_shots(per_shot);

        LocalPair global_pair{protos.c_f, protos.c_b, true};
        CoarseMaskLevel coarse = self_match(f_q, protos.locals, &global_pair);

        auto [cq_f, cq_b] = query_prototypes(f_q, coarse);

        SmtLevel lvl;
        lvl.c_s = build_prototype_matrix(protos.c_f, protos.c_b);
        lvl.c_q = build_prototype_matrix(cq_f, cq_b);
        lvl.cs_pinv = pinv2(lvl.c_s, cfg.ridge);
        lvl.cq_pinv = pinv2(lvl.c_q, cfg.ridge);
        lvl.cq_pinv_blend = blend_pinv(lvl.cq_pinv, lvl.cs_pinv, cfg.beta);

        int g = spec.group_of(l);
        lvl.a_s = anchor_matrix(anchors, Role::kSupport, g);
        lvl.a_q = anchor_matrix(anchors, Role::kQuery, g);
        lvl.w_s = solve_transform(lvl.a_s, lvl.cs_pinv);
        lvl.w_q = solve_transform(lvl.a_q, lvl.cq_pinv_blend);

        result.levels.push_back(std::move(lvl));
        result.coarse.push_back(std::move(coarse));
        result.support_protos.levels.push_back(std::move(protos));

        LevelPrototypes qp;
        qp.c_f = std::move(cq_f);
        qp.c_b = std::move(cq_b);
        result.query_protos.levels.push_back(std::move(qp));
    }
    return result;
}

AnchorGrads AnchorGrads::zeros_like(const AnchorSet& anchors) {
    AnchorGrads g;
    for (std::size_t i = 0; i < 3; ++i) {
        g.support[i] = {Tensor::zeros(anchors.support[i].a_f.shape()),
                        Tensor::zeros(anchors.support[i].a_b.shape())};
        g.query[i] = {Tensor::zeros(anchors.query[i].a_f.shape()),
                      Tensor::zeros(anchors.query[i].a_b.shape())};
    }
    return g;
}

namespace {

// d(a/|a|) backward: g_raw = (g - (g . ahat) ahat) / |a|.
void normalize_backward(const Tensor& raw, const Tensor& d_unit, Tensor& d_raw) {
    const int n = raw.dim(0);
    double nrm = 0.0;
    for (int i = 0; i < n; ++i) nrm += static_cast<double>(raw(i)) * raw(i);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-8) throw ZeroPrototype("anchor norm below 1e-8 in backward");
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += static_cast<double>(d_unit(i)) * raw(i) / nrm;
    for (int i = 0; i < n; ++i) {
        double unit = raw(i) / nrm;
        d_raw(i) += static_cast<float>((d_unit(i) - dot * unit) / nrm);
    }
}

}  // namespace

void accumulate_anchor_grads(const AnchorSet& anchors, const PyramidSpec& spec,
                             const SmtResult& smt, const std::vector<Tensor>& d_w_s,
                             const std::vector<Tensor>& d_w_q, AnchorGrads& grads) {
    if (d_w_s.size() != smt.levels.size() || d_w_q.size() != smt.levels.size()) {
        throw ShapeMismatch("per-level transform gradient count mismatch");
    }
    for (int l = 0; l < static_cast<int>(smt.levels.size()); ++l) {
        const SmtLevel& lvl = smt.levels[static_cast<std::size_t>(l)];
        int g = spec.group_of(l);

        // W = A C+  =>  dL/dA = dL/dW (C+)^T, one C_l x 2 block per role.
        Tensor d_a_s = matmul(d_w_s[static_cast<std::size_t>(l)], transpose2(lvl.cs_pinv));
        Tensor d_a_q = matmul(d_w_q[static_cast<std::size_t>(l)], transpose2(lvl.cq_pinv_blend));

        const int c = d_a_s.dim(0);
        Tensor col_f = Tensor::zeros({c}), col_b = Tensor::zeros({c});
        for (int i = 0; i < c; ++i) {
            col_f(i) = d_a_s(i, 0);
            col_b(i) = d_a_s(i, 1);
        }
        auto gs = static_cast<std::size_t>(g);
        normalize_backward(anchors.support[gs].a_f, col_f, grads.support[gs].a_f);
        normalize_backward(anchors.support[gs].a_b, col_b, grads.support[gs].a_b);

        for (int i = 0; i < c; ++i) {
            col_f(i) = d_a_q(i, 0);
            col_b(i) = d_a_q(i, 1);
        }
        normalize_backward(anchors.query[gs].a_f, col_f, grads.query[gs].a_f);
        normalize_backward(anchors.query[gs].a_b, col_b, grads.query[gs].a_b);
    }
}

namespace {

template <typename Set>
std::vector<AnchorRef> anchor_refs_impl(Set& set) {
    std::vector<AnchorRef> refs;
    for (int g = 0; g < 3; ++g) {
        auto gs = static_cast<std::size_t>(g);
        std::string base = "anchor." + std::to_string(g) + ".";
        refs.push_back({base + "support.fg", &set.support[gs].a_f});
        refs.push_back({base + "support.bg", &set.support[gs].a_b});
        refs.push_back({base + "query.fg", &set.query[gs].a_f});
        refs.push_back({base + "query.bg", &set.query[gs].a_b});
    }
    return refs;
}

}  // namespace

std::vector<AnchorRef> anchor_param_refs(AnchorSet& anchors) { return anchor_refs_impl(anchors); }

std::vector<AnchorRef> anchor_grad_refs(AnchorGrads& grads) { return anchor_refs_impl(grads); }

}  // namespace dmt
