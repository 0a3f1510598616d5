#include "dmt/fusion_net.hpp"

#include <algorithm>
#include <cmath>

#include "dmt/rng.hpp"

namespace dmt {

namespace {

Tensor gaussian(std::vector<int> shape, float std_dev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data()) v = static_cast<float>(rng.normal()) * std_dev;
    return t;
}

Conv2dParams seeded_conv(int out_c, int in_c, Rng& rng) {
    float std_dev = 1.0f / std::sqrt(static_cast<float>(in_c * 9));
    return {gaussian({out_c, in_c, 3, 3}, std_dev, rng), Tensor::zeros({out_c})};
}

}  // namespace

FusionParams FusionParams::seeded(int levels, std::uint64_t seed) {
    if (levels < 1) throw ConfigError("fusion net needs at least one level");
    FusionParams p;
    Rng rng(mix_seed(seed, 0x6675u));
    const float sep_std = 1.0f / 3.0f;  // 3x3 kernels, fan-in 9
    for (int l = 0; l < levels; ++l) {
        Sep4dParams s;
        s.kq = gaussian({kSepChannels, 3, 3}, sep_std, rng);
        s.ks = gaussian({kSepChannels, 3, 3}, sep_std, rng);
        s.bias = Tensor::zeros({kSepChannels});
        p.sep4d.push_back(std::move(s));
    }
    p.conv1 = seeded_conv(kFusionChannels, 2 * kSepChannels * levels, rng);
    p.conv2 = seeded_conv(kFusionChannels, kFusionChannels, rng);
    p.conv3 = seeded_conv(kDecoderChannels, kFusionChannels, rng);
    p.conv4 = seeded_conv(1, kDecoderChannels, rng);
    return p;
}

std::uint64_t FusionParams::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const Tensor& t) {
        h = fnv1a(t.shape().data(), t.shape().size() * sizeof(int), h);
        h = fnv1a(t.data().data(), t.size() * sizeof(float), h);
    };
    for (const Sep4dParams& s : sep4d) {
        feed(s.kq);
        feed(s.ks);
        feed(s.bias);
    }
    for (const Conv2dParams* c : {&conv1, &conv2, &conv3, &conv4}) {
        feed(c->w);
        feed(c->b);
    }
    return h;
}

Tensor conv2d(const Tensor& input, const Conv2dParams& p) {
    const int in_c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int out_c = p.w.dim(0);
    if (p.w.dim(1) != in_c) throw ShapeMismatch("conv2d channel mismatch");
    Tensor out = Tensor::zeros({out_c, h, w});
    for (int oc = 0; oc < out_c; ++oc) {
        float b = p.b(oc);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) out(oc, y, x) = b;
        }
        for (int ic = 0; ic < in_c; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    float kv = p.w(oc, ic, ky, kx);
                    if (kv == 0.0f) continue;
                    int dy = ky - 1, dx = kx - 1;
                    int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x) {
                            out(oc, y, x) += kv * input(ic, y + dy, x + dx);
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& d_out, const Tensor& input, const Conv2dParams& p,
                     Conv2dParams& grads, Tensor* d_input) {
    const int in_c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int out_c = p.w.dim(0);
    for (int oc = 0; oc < out_c; ++oc) {
        double acc = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) acc += d_out(oc, y, x);
        }
        grads.b(oc) += static_cast<float>(acc);
        for (int ic = 0; ic < in_c; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    int dy = ky - 1, dx = kx - 1;
                    int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    double kacc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x) {
                            kacc += static_cast<double>(d_out(oc, y, x)) * input(ic, y + dy, x + dx);
                        }
                    }
                    grads.w(oc, ic, ky, kx) += static_cast<float>(kacc);
                    if (d_input != nullptr) {
                        float kv = p.w(oc, ic, ky, kx);
                        if (kv == 0.0f) continue;
                        for (int y = y0; y < y1; ++y) {
                            for (int x = x0; x < x1; ++x) {
                                (*d_input)(ic, y + dy, x + dx) += kv * d_out(oc, y, x);
                            }
                        }
                    }
                }
            }
        }
    }
}

namespace {

// 2D conv over the query axes (0, 1) of an H x W x H x W tensor.
Tensor conv_query_axes(const Tensor& t, const Tensor& k, int ch) {
    const int h = t.dim(0), w = t.dim(1);
    Tensor out = Tensor::zeros(t.shape());
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            float kv = k(ch, ky, kx);
            if (kv == 0.0f) continue;
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int yq = y0; yq < y1; ++yq) {
                for (int xq = x0; xq < x1; ++xq) {
                    for (int ys = 0; ys < t.dim(2); ++ys) {
                        for (int xs = 0; xs < t.dim(3); ++xs) {
                            out(yq, xq, ys, xs) += kv * t(yq + dy, xq + dx, ys, xs);
                        }
                    }
                }
            }
        }
    }
    return out;
}

// 2D conv over the support axes (2, 3).
Tensor conv_support_axes(const Tensor& t, const Tensor& k, int ch) {
    const int h = t.dim(2), w = t.dim(3);
    Tensor out = Tensor::zeros(t.shape());
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            float kv = k(ch, ky, kx);
            if (kv == 0.0f) continue;
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int yq = 0; yq < t.dim(0); ++yq) {
                for (int xq = 0; xq < t.dim(1); ++xq) {
                    for (int ys = y0; ys < y1; ++ys) {
                        for (int xs = x0; xs < x1; ++xs) {
                            out(yq, xq, ys, xs) += kv * t(yq, xq, ys + dy, xs + dx);
                        }
                    }
                }
            }
        }
    }
    return out;
}

// Transposes of the two convs: scatter with the same kernel.
Tensor conv_query_axes_t(const Tensor& d_out, const Tensor& k, int ch) {
    const int h = d_out.dim(0), w = d_out.dim(1);
    Tensor d_in = Tensor::zeros(d_out.shape());
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            float kv = k(ch, ky, kx);
            if (kv == 0.0f) continue;
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int yq = y0; yq < y1; ++yq) {
                for (int xq = x0; xq < x1; ++xq) {
                    for (int ys = 0; ys < d_out.dim(2); ++ys) {
                        for (int xs = 0; xs < d_out.dim(3); ++xs) {
                            d_in(yq + dy, xq + dx, ys, xs) += kv * d_out(yq, xq, ys, xs);
                        }
                    }
                }
            }
        }
    }
    return d_in;
}

Tensor conv_support_axes_t(const Tensor& d_out, const Tensor& k, int ch) {
    const int h = d_out.dim(2), w = d_out.dim(3);
    Tensor d_in = Tensor::zeros(d_out.shape());
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            float kv = k(ch, ky, kx);
            if (kv == 0.0f) continue;
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int yq = 0; yq < d_out.dim(0); ++yq) {
                for (int xq = 0; xq < d_out.dim(1); ++xq) {
                    for (int ys = y0; ys < y1; ++ys) {
                        for (int xs = x0; xs < x1; ++xs) {
                            d_in(yq, xq, ys + dy, xs + dx) += kv * d_out(yq, xq, ys, xs);
                        }
                    }
                }
            }
        }
    }
    return d_in;
}

void kernel_grad_support_axes(const Tensor& d_out, const Tensor& input, Tensor& d_k, int ch) {
    const int h = d_out.dim(2), w = d_out.dim(3);
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            double acc = 0.0;
            for (int yq = 0; yq < d_out.dim(0); ++yq) {
                for (int xq = 0; xq < d_out.dim(1); ++xq) {
                    for (int ys = y0; ys < y1; ++ys) {
                        for (int xs = x0; xs < x1; ++xs) {
                            acc += static_cast<double>(d_out(yq, xq, ys, xs)) *
                                   input(yq, xq, ys + dy, xs + dx);
                        }
                    }
                }
            }
            d_k(ch, ky, kx) += static_cast<float>(acc);
        }
    }
}

void kernel_grad_query_axes(const Tensor& d_out, const Tensor& input, Tensor& d_k, int ch) {
    const int h = d_out.dim(0), w = d_out.dim(1);
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            double acc = 0.0;
            for (int yq = y0; yq < y1; ++yq) {
                for (int xq = x0; xq < x1; ++xq) {
                    for (int ys = 0; ys < d_out.dim(2); ++ys) {
                        for (int xs = 0; xs < d_out.dim(3); ++xs) {
                            acc += static_cast<double>(d_out(yq, xq, ys, xs)) *
                                   input(yq + dy, xq + dx, ys, xs);
                        }
                    }
                }
            }
            d_k(ch, ky, kx) += static_cast<float>(acc);
        }
    }
}

}  // namespace

std::vector<Tensor> sep4d_conv(const Tensor& corr, const Tensor& kq, const Tensor& ks,
                               const Tensor& bias) {
    if (corr.rank() != 4) throw ShapeMismatch("sep4d_conv expects an H x W x H x W tensor");
    std::vector<Tensor> out;
    for (int ch = 0; ch < kq.dim(0); ++ch) {
        Tensor t1 = conv_query_axes(corr, kq, ch);
        Tensor z = conv_support_axes(t1, ks, ch);
        float b = bias(ch);
        for (float& v : z.data()) v = std::max(0.0f, v + b);
        out.push_back(std::move(z));
    }
    return out;
}

Tensor squeeze_support(const std::vector<Tensor>& channels) {
    if (channels.empty()) throw ShapeMismatch("squeeze_support needs at least one channel");
    const int n = static_cast<int>(channels.size());
    const int h = channels.front().dim(0), w = channels.front().dim(1);
    const int sh = channels.front().dim(2), sw = channels.front().dim(3);
    Tensor out = Tensor::zeros({2 * n, h, w});
    const double inv = 1.0 / (static_cast<double>(sh) * sw);
    for (int ch = 0; ch < n; ++ch) {
        const Tensor& t = channels[static_cast<std::size_t>(ch)];
        for (int yq = 0; yq < h; ++yq) {
            for (int xq = 0; xq < w; ++xq) {
                double sum = 0.0;
                float mx = t(yq, xq, 0, 0);
                for (int ys = 0; ys < sh; ++ys) {
                    for (int xs = 0; xs < sw; ++xs) {
                        float v = t(yq, xq, ys, xs);
                        sum += v;
                        mx = std::max(mx, v);
                    }
                }
                out(ch, yq, xq) = static_cast<float>(sum * inv);
                out(n + ch, yq, xq) = mx;
            }
        }
    }
    return out;
}

Tensor bilinear_resize_backward(const Tensor& d_out, int in_h, int in_w) {
    if (d_out.rank() != 3) throw ShapeMismatch("bilinear_resize_backward expects C x H x W");
    const int c = d_out.dim(0), oh = d_out.dim(1), ow = d_out.dim(2);
    if (oh == in_h && ow == in_w) return d_out;
    Tensor d_in = Tensor::zeros({c, in_h, in_w});
    std::vector<BilinearSample> ys(static_cast<std::size_t>(oh)), xs(static_cast<std::size_t>(ow));
    for (int y = 0; y < oh; ++y) ys[static_cast<std::size_t>(y)] = bilinear_sample_axis(y, in_h, oh);
    for (int x = 0; x < ow; ++x) xs[static_cast<std::size_t>(x)] = bilinear_sample_axis(x, in_w, ow);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            const BilinearSample& sy = ys[static_cast<std::size_t>(y)];
            for (int x = 0; x < ow; ++x) {
                const BilinearSample& sx = xs[static_cast<std::size_t>(x)];
                float g = d_out(ch, y, x);
                d_in(ch, sy.lo, sx.lo) += g * (1.0f - sy.frac) * (1.0f - sx.frac);
                d_in(ch, sy.lo, sx.hi) += g * (1.0f - sy.frac) * sx.frac;
                d_in(ch, sy.hi, sx.lo) += g * sy.frac * (1.0f - sx.frac);
                d_in(ch, sy.hi, sx.hi) += g * sy.frac * sx.frac;
            }
        }
    }
    return d_in;
}

namespace {

void relu_forward(Tensor& t) {
    for (float& v : t.data()) v = std::max(0.0f, v);
}

Tensor relu_gate(const Tensor& d_out, const Tensor& pre) {
    Tensor d = Tensor::zeros(d_out.shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d.data()[i] = pre.data()[i] > 0.0f ? d_out.data()[i] : 0.0f;
    }
    return d;
}

// One pass of the shared trunk over a correlation pyramid.
Tensor head_forward(const std::vector<Tensor>& corrs, const FusionParams& params, int out_h,
                    int out_w, FusionCache::Head* hc) {
    const int levels = static_cast<int>(corrs.size());
    const int h0 = corrs.front().dim(0), w0 = corrs.front().dim(1);

    Tensor x0 = Tensor::zeros({2 * kSepChannels * levels, h0, w0});
    for (int l = 0; l < levels; ++l) {
        const Tensor& corr = corrs[static_cast<std::size_t>(l)];
        const Sep4dParams& sp = params.sep4d[static_cast<std::size_t>(l)];
        FusionCache::Level lvl;
        std::vector<Tensor> act;
        for (int ch = 0; ch < kSepChannels; ++ch) {
            Tensor t1 = conv_query_axes(corr, sp.kq, ch);
            Tensor z = conv_support_axes(t1, sp.ks, ch);
            float b = sp.bias(ch);
            for (float& v : z.data()) v += b;
            Tensor a = Tensor::zeros(z.shape());
            for (std::size_t i = 0; i < z.size(); ++i) a.data()[i] = std::max(0.0f, z.data()[i]);
            if (hc != nullptr) {
                lvl.t1.push_back(std::move(t1));
                lvl.z.push_back(z);
            }
            act.push_back(std::move(a));
        }
        // Argmax of the post-ReLU activations, recorded for the max branch.
        if (hc != nullptr) {
            lvl.corr = corr;
            for (int ch = 0; ch < kSepChannels; ++ch) {
                const Tensor& a = act[static_cast<std::size_t>(ch)];
                const int sh = a.dim(2), sw = a.dim(3);
                std::vector<int> am(static_cast<std::size_t>(a.dim(0)) * a.dim(1), 0);
                for (int yq = 0; yq < a.dim(0); ++yq) {
                    for (int xq = 0; xq < a.dim(1); ++xq) {
                        int best = 0;
                        float bv = a(yq, xq, 0, 0);
                        for (int ys = 0; ys < sh; ++ys) {
                            for (int xs = 0; xs < sw; ++xs) {
                                float v = a(yq, xq, ys, xs);
                                if (v > bv) {
                                    bv = v;
                                    best = ys * sw + xs;
                                }
                            }
                        }
                        am[static_cast<std::size_t>(yq) * a.dim(1) + xq] = best;
                    }
                }
                lvl.argmax.push_back(std::move(am));
            }
        }
        Tensor squeezed = squeeze_support(act);
        Tensor resized = bilinear_resize(squeezed, h0, w0);
        for (int ch = 0; ch < 2 * kSepChannels; ++ch) {
            for (int y = 0; y < h0; ++y) {
                for (int x = 0; x < w0; ++x) {
                    x0(l * 2 * kSepChannels + ch, y, x) = resized(ch, y, x);
                }
            }
        }
        if (hc != nullptr) hc->levels.push_back(std::move(lvl));
    }

    Tensor z1 = conv2d(x0, params.conv1);
    Tensor a1 = z1;
    relu_forward(a1);
    Tensor z2 = conv2d(a1, params.conv2);
    Tensor a2 = z2;
    relu_forward(a2);
    Tensor z3 = conv2d(a2, params.conv3);
    Tensor a3 = z3;
    relu_forward(a3);
    Tensor z4 = conv2d(a3, params.conv4);

    Tensor sig = Tensor::zeros(z4.shape());
    for (std::size_t i = 0; i < z4.size(); ++i) {
        sig.data()[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(z4.data()[i]))));
    }
    Tensor out3 = bilinear_resize(sig, out_h, out_w);

    if (hc != nullptr) {
        hc->x0 = std::move(x0);
        hc->z1 = std::move(z1);
        hc->a1 = std::move(a1);
        hc->z2 = std::move(z2);
        hc->a2 = std::move(a2);
        hc->z3 = std::move(z3);
        hc->a3 = std::move(a3);
        hc->z4 = std::move(z4);
        hc->sig = sig;
    }
    return Tensor::from_data({out_h, out_w},
                             std::vector<float>(out3.data().begin(), out3.data().end()));
}

void head_backward(const FusionParams& params, const FusionCache::Head& hc, const Tensor& d_mask,
                   FusionGrads& grads, std::vector<Tensor>& d_corrs) {
    const int h0 = hc.sig.dim(1), w0 = hc.sig.dim(2);

    Tensor d_mask3 = Tensor::from_data(
        {1, d_mask.dim(0), d_mask.dim(1)},
        std::vector<float>(d_mask.data().begin(), d_mask.data().end()));
    Tensor d_sig = bilinear_resize_backward(d_mask3, h0, w0);

    Tensor d_z4 = Tensor::zeros(hc.z4.shape());
    for (std::size_t i = 0; i < d_z4.size(); ++i) {
        float s = hc.sig.data()[i];
        d_z4.data()[i] = d_sig.data()[i] * s * (1.0f - s);
    }

    Tensor d_a3 = Tensor::zeros(hc.a3.shape());
    conv2d_backward(d_z4, hc.a3, params.conv4, grads.conv4, &d_a3);
    Tensor d_z3 = relu_gate(d_a3, hc.z3);

    Tensor d_a2 = Tensor::zeros(hc.a2.shape());
    conv2d_backward(d_z3, hc.a2, params.conv3, grads.conv3, &d_a2);
    Tensor d_z2 = relu_gate(d_a2, hc.z2);

    Tensor d_a1 = Tensor::zeros(hc.a1.shape());
    conv2d_backward(d_z2, hc.a1, params.conv2, grads.conv2, &d_a1);
    Tensor d_z1 = relu_gate(d_a1, hc.z1);

    Tensor d_x0 = Tensor::zeros(hc.x0.shape());
    conv2d_backward(d_z1, hc.x0, params.conv1, grads.conv1, &d_x0);

    const int levels = static_cast<int>(hc.levels.size());
    for (int l = 0; l < levels; ++l) {
        const FusionCache::Level& lvl = hc.levels[static_cast<std::size_t>(l)];
        const Sep4dParams& sp = params.sep4d[static_cast<std::size_t>(l)];
        Sep4dParams& sg = grads.sep4d[static_cast<std::size_t>(l)];
        const int lh = lvl.corr.dim(0), lw = lvl.corr.dim(1);
        const int sh = lvl.corr.dim(2), sw = lvl.corr.dim(3);

        Tensor d_resized = Tensor::zeros({2 * kSepChannels, h0, w0});
        for (int ch = 0; ch < 2 * kSepChannels; ++ch) {
            for (int y = 0; y < h0; ++y) {
                for (int x = 0; x < w0; ++x) {
                    d_resized(ch, y, x) = d_x0(l * 2 * kSepChannels + ch, y, x);
                }
            }
        }
        Tensor d_squeezed = bilinear_resize_backward(d_resized, lh, lw);

        for (int ch = 0; ch < kSepChannels; ++ch) {
            // Undo the squeeze: mean spreads uniformly, max routes to argmax.
            Tensor d_act = Tensor::zeros({lh, lw, sh, sw});
            const float inv = 1.0f / static_cast<float>(sh * sw);
            for (int yq = 0; yq < lh; ++yq) {
                for (int xq = 0; xq < lw; ++xq) {
                    float dm = d_squeezed(ch, yq, xq) * inv;
                    for (int ys = 0; ys < sh; ++ys) {
                        for (int xs = 0; xs < sw; ++xs) d_act(yq, xq, ys, xs) = dm;
                    }
                    int am = lvl.argmax[static_cast<std::size_t>(ch)]
                                       [static_cast<std::size_t>(yq) * lw + xq];
                    d_act(yq, xq, am / sw, am % sw) += d_squeezed(kSepChannels + ch, yq, xq);
                }
            }
            Tensor d_z = relu_gate(d_act, lvl.z[static_cast<std::size_t>(ch)]);

            double bacc = 0.0;
            for (float v : d_z.data()) bacc += v;
            sg.bias(ch) += static_cast<float>(bacc);

            kernel_grad_support_axes(d_z, lvl.t1[static_cast<std::size_t>(ch)], sg.ks, ch);
            Tensor d_t1 = conv_support_axes_t(d_z, sp.ks, ch);
            kernel_grad_query_axes(d_t1, lvl.corr, sg.kq, ch);
            Tensor d_corr = conv_query_axes_t(d_t1, sp.kq, ch);
            for (std::size_t i = 0; i < d_corr.size(); ++i) {
                d_corrs[static_cast<std::size_t>(l)].data()[i] += d_corr.data()[i];
            }
        }
    }
}

}  // namespace

HeadOutput fusion_forward(const std::vector<Tensor>& corr_f, const std::vector<Tensor>& corr_b,
                          const FusionParams& params, int out_h, int out_w, FusionCache* cache) {
    if (corr_f.size() != corr_b.size() || corr_f.empty()) {
        throw ShapeMismatch("fusion_forward expects matching non-empty pyramids");
    }
    if (corr_f.size() != params.sep4d.size()) {
        throw ShapeMismatch("fusion_forward level count does not match parameters");
    }
    for (std::size_t l = 0; l < corr_f.size(); ++l) {
        if (!corr_f[l].same_shape(corr_b[l]) || corr_f[l].rank() != 4) {
            throw ShapeMismatch("correlation pyramids disagree at level " + std::to_string(l));
        }
    }
    if (cache != nullptr) {
        cache->fg = {};
        cache->bg = {};
        cache->params_fp = params.fingerprint();
        cache->out_h = out_h;
        cache->out_w = out_w;
    }
    HeadOutput out;
    out.m_f = head_forward(corr_f, params, out_h, out_w, cache != nullptr ? &cache->fg : nullptr);
    out.m_b = head_forward(corr_b, params, out_h, out_w, cache != nullptr ? &cache->bg : nullptr);
    return out;
}

FusionGrads FusionGrads::zeros_like(const FusionParams& params) {
    FusionGrads g;
    for (const Sep4dParams& s : params.sep4d) {
        g.sep4d.push_back({Tensor::zeros(s.kq.shape()), Tensor::zeros(s.ks.shape()),
                           Tensor::zeros(s.bias.shape())});
    }
    auto zc = [](const Conv2dParams& c) {
        return Conv2dParams{Tensor::zeros(c.w.shape()), Tensor::zeros(c.b.shape())};
    };
    g.conv1 = zc(params.conv1);
    g.conv2 = zc(params.conv2);
    g.conv3 = zc(params.conv3);
    g.conv4 = zc(params.conv4);
    return g;
}

FusionGrads fusion_backward(const FusionParams& params, const FusionCache& cache,
                            const Tensor& d_m_f, const Tensor& d_m_b) {
    if (cache.params_fp != params.fingerprint()) {
        throw StaleCache("fusion cache does not match the current parameters");
    }
    if (d_m_f.dim(0) != cache.out_h || d_m_f.dim(1) != cache.out_w || !d_m_f.same_shape(d_m_b)) {
        throw ShapeMismatch("mask gradient resolution mismatch");
    }
    FusionGrads grads = FusionGrads::zeros_like(params);
    for (const FusionCache::Level& lvl : cache.fg.levels) {
        grads.d_corr_f.push_back(Tensor::zeros(lvl.corr.shape()));
    }
    for (const FusionCache::Level& lvl : cache.bg.levels) {
        grads.d_corr_b.push_back(Tensor::zeros(lvl.corr.shape()));
    }
    head_backward(params, cache.fg, d_m_f, grads, grads.d_corr_f);
    head_backward(params, cache.bg, d_m_b, grads, grads.d_corr_b);
    return grads;
}

std::vector<ParamRef> fusion_param_refs(FusionParams& params) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < params.sep4d.size(); ++l) {
        std::string base = "fusion.sep4d." + std::to_string(l) + ".";
        refs.push_back({base + "kq", &params.sep4d[l].kq});
        refs.push_back({base + "ks", &params.sep4d[l].ks});
        refs.push_back({base + "bias", &params.sep4d[l].bias});
    }
    refs.push_back({"fusion.conv1.w", &params.conv1.w});
    refs.push_back({"fusion.conv1.b", &params.conv1.b});
    refs.push_back({"fusion.conv2.w", &params.conv2.w});
    refs.push_back({"fusion.conv2.b", &params.conv2.b});
    refs.push_back({"fusion.conv3.w", &params.conv3.w});
    refs.push_back({"fusion.conv3.b", &params.conv3.b});
    refs.push_back({"fusion.conv4.w", &params.conv4.w});
    refs.push_back({"fusion.conv4.b", &params.conv4.b});
    return refs;
}

std::vector<ParamRef> fusion_grad_refs(FusionGrads& grads) {
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < grads.sep4d.size(); ++l) {
        std::string base = "fusion.sep4d." + std::to_string(l) + ".";
        refs.push_back({base + "kq", &grads.sep4d[l].kq});
        refs.push_back({base + "ks", &grads.sep4d[l].ks});
        refs.push_back({base + "bias", &grads.sep4d[l].bias});
    }
    refs.push_back({"fusion.conv1.w", &grads.conv1.w});
    refs.push_back({"fusion.conv1.b", &grads.conv1.b});
    refs.push_back({"fusion.conv2.w", &grads.conv2.w});
    refs.push_back({"fusion.conv2.b", &grads.conv2.b});
    refs.push_back({"fusion.conv3.w", &grads.conv3.w});
    refs.push_back({"fusion.conv3.b", &grads.conv3.b});
    refs.push_back({"fusion.conv4.w", &grads.conv4.w});
    refs.push_back({"fusion.conv4.b", &grads.conv4.b});
    return refs;
}

}  // namespace dmt
