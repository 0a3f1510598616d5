#include "dmt/dhc.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "dmt/smt.hpp"

namespace dmt {

MaskedFeatures mask_features(const Tensor& features, const Tensor& mask) {
    if (features.rank() != 3 || mask.rank() != 2) {
        throw ShapeMismatch("mask_features expects C x H x W features and an H x W mask");
    }
    const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
    if (mask.dim(0) != h || mask.dim(1) != w) throw ShapeMismatch("mask resolution mismatch");
    MaskedFeatures out{Tensor::zeros({c, h, w}), Tensor::zeros({c, h, w})};
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float m = mask(y, x);
                float f = features(ch, y, x);
                out.fg(ch, y, x) = f * m;
                out.bg(ch, y, x) = f * (1.0f - m);
            }
        }
    }
    return out;
}

namespace {

Tensor pixel_norms(const Tensor& g) {
    const int c = g.dim(0), h = g.dim(1), w = g.dim(2);
    Tensor n = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                double v = g(ch, y, x);
                acc += v * v;
            }
            n(y, x) = static_cast<float>(std::sqrt(acc));
        }
    }
    return n;
}

constexpr double kNormFloor = 1e-8;

}  // namespace

Tensor correlation4d(const Tensor& support_features, const Tensor& query_features,
                     const Tensor& w_support, const Tensor& w_query, CorrCache* cache) {
    if (!support_features.same_shape(query_features)) {
        throw ShapeMismatch("correlation4d expects matching support/query shapes");
    }
    Tensor gs = apply_transform(w_support, support_features);
    Tensor gq = apply_transform(w_query, query_features);
    const int c = gs.dim(0), h = gs.dim(1), w = gs.dim(2);
    Tensor ns = pixel_norms(gs);
    Tensor nq = pixel_norms(gq);

    // Pixel-major copies keep the channel dots contiguous.
    const int np = h * w;
    std::vector<float> ps(static_cast<std::size_t>(np) * c), pq(static_cast<std::size_t>(np) * c);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                int p = y * w + x;
                ps[static_cast<std::size_t>(p) * c + ch] = gs(ch, y, x);
                pq[static_cast<std::size_t>(p) * c + ch] = gq(ch, y, x);
            }
        }
    }

    Tensor corr = Tensor::zeros({h, w, h, w});
    float* out = corr.data().data();
    for (int q = 0; q < np; ++q) {
        float qn = nq(q / w, q % w);
        const float* qv = &pq[static_cast<std::size_t>(q) * c];
        float* row = out + static_cast<std::size_t>(q) * np;
        if (qn < kNormFloor) continue;
        for (int s = 0; s < np; ++s) {
            float sn = ns(s / w, s % w);
            if (sn < kNormFloor) continue;
            const float* sv = &ps[static_cast<std::size_t>(s) * c];
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch) dot += static_cast<double>(qv[ch]) * sv[ch];
            double cs = dot / (static_cast<double>(qn) * sn);
            if (cs > 0.0) row[s] = static_cast<float>(std::min(cs, 1.0));
        }
    }

    if (cache != nullptr) {
        cache->gs = std::move(gs);
        cache->gq = std::move(gq);
        cache->ns = std::move(ns);
        cache->nq = std::move(nq);
    }
    return corr;
}

Correlation4dGrads correlation4d_backward(const Tensor& d_corr, const CorrCache& cache,
                                          const Tensor& support_features,
                                          const Tensor& query_features) {
    const int c = cache.gs.dim(0), h = cache.gs.dim(1), w = cache.gs.dim(2);
    const int np = h * w;
    if (d_corr.rank() != 4 || d_corr.dim(0) != h || d_corr.dim(1) != w || d_corr.dim(2) != h ||
        d_corr.dim(3) != w) {
        throw ShapeMismatch("correlation gradient shape mismatch");
    }

    std::vector<double> d_gs(static_cast<std::size_t>(np) * c, 0.0);
    std::vector<double> d_gq(static_cast<std::size_t>(np) * c, 0.0);
    std::vector<float> ps(static_cast<std::size_t>(np) * c), pq(static_cast<std::size_t>(np) * c);
    for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < np; ++p) {
            ps[static_cast<std::size_t>(p) * c + ch] = cache.gs(ch, p / w, p % w);
            pq[static_cast<std::size_t>(p) * c + ch] = cache.gq(ch, p / w, p % w);
        }
    }

    const float* dc = d_corr.data().data();
    for (int q = 0; q < np; ++q) {
        double qn = cache.nq(q / w, q % w);
        if (qn < kNormFloor) continue;
        const float* qv = &pq[static_cast<std::size_t>(q) * c];
        for (int s = 0; s < np; ++s) {
            double g = dc[static_cast<std::size_t>(q) * np + s];
            if (g == 0.0) continue;
            double sn = cache.ns(s / w, s % w);
            if (sn < kNormFloor) continue;
            const float* sv = &ps[static_cast<std::size_t>(s) * c];
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch) dot += static_cast<double>(qv[ch]) * sv[ch];
            double cs = dot / (qn * sn);
            if (cs <= 0.0) continue;  // ReLU gate
            double inv = 1.0 / (qn * sn);
            double* dq = &d_gq[static_cast<std::size_t>(q) * c];
            double* dsv = &d_gs[static_cast<std::size_t>(s) * c];
            for (int ch = 0; ch < c; ++ch) {
                dq[ch] += g * (sv[ch] * inv - cs * qv[ch] / (qn * qn));
                dsv[ch] += g * (qv[ch] * inv - cs * sv[ch] / (sn * sn));
            }
        }
    }

    // gs = W_s f_s per pixel, so dW_s = sum_p d_gs(p) f_s(p)^T.
    Correlation4dGrads grads{Tensor::zeros({c, c}), Tensor::zeros({c, c})};
    for (int p = 0; p < np; ++p) {
        for (int i = 0; i < c; ++i) {
            double gsv = d_gs[static_cast<std::size_t>(p) * c + i];
            double gqv = d_gq[static_cast<std::size_t>(p) * c + i];
            if (gsv == 0.0 && gqv == 0.0) continue;
            for (int j = 0; j < c; ++j) {
                grads.d_w_support(i, j) +=
                    static_cast<float>(gsv * support_features(j, p / w, p % w));
                grads.d_w_query(i, j) += static_cast<float>(gqv * query_features(j, p / w, p % w));
            }
        }
    }
    return grads;
}

DhcResult dhc_forward(const FeaturePyramid& support, const Tensor& support_mask,
                      const FeaturePyramid& query, const std::vector<Tensor>& w_support,
                      const std::vector<Tensor>& w_query, DhcCache* cache) {
    if (support.size() != query.size() || support.size() != w_support.size() ||
        support.size() != w_query.size()) {
        throw ShapeMismatch("dhc_forward level counts differ");
    }
    DhcResult out;
    if (cache != nullptr) cache->levels.clear();
    for (std::size_t l = 0; l < support.size(); ++l) {
        const Tensor& f_s = support[l];
        Tensor mask_l = bilinear_resize_2d(support_mask, f_s.dim(1), f_s.dim(2));
        MaskedFeatures masked = mask_features(f_s, mask_l);

        CorrCache fg_cache, bg_cache;
        Tensor corr_f = correlation4d(masked.fg, query[l], w_support[l], w_query[l],
                                      cache != nullptr ? &fg_cache : nullptr);
        Tensor corr_b = correlation4d(masked.bg, query[l], w_support[l], w_query[l],
                                      cache != nullptr ? &bg_cache : nullptr);
        if (cache != nullptr) {
            cache->levels.push_back({std::move(masked), std::move(fg_cache), std::move(bg_cache)});
        }
        out.corr_f.push_back(std::move(corr_f));
        out.corr_b.push_back(std::move(corr_b));
    }
    return out;
}

void dhc_backward(const std::vector<Tensor>& d_corr_f, const std::vector<Tensor>& d_corr_b,
                  const DhcCache& cache, const FeaturePyramid& query,
                  std::vector<Tensor>& d_w_support, std::vector<Tensor>& d_w_query) {
    if (d_corr_f.size() != cache.levels.size() || d_corr_b.size() != cache.levels.size()) {
        throw ShapeMismatch("dhc_backward level counts differ");
    }
    for (std::size_t l = 0; l < cache.levels.size(); ++l) {
        const DhcCache::Level& lvl = cache.levels[l];
        Correlation4dGrads gf = correlation4d_backward(d_corr_f[l], lvl.fg, lvl.masked.fg, query[l]);
        Correlation4dGrads gb = correlation4d_backward(d_corr_b[l], lvl.bg, lvl.masked.bg, query[l]);
        for (std::size_t i = 0; i < gf.d_w_support.size(); ++i) {
            d_w_support[l].data()[i] += gf.d_w_support.data()[i] + gb.d_w_support.data()[i];
            d_w_query[l].data()[i] += gf.d_w_query.data()[i] + gb.d_w_query.data()[i];
        }
    }
}

}  // namespace dmt
