#include "dmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dmt {

namespace {

std::size_t checked_count(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4) {
        throw ShapeMismatch("tensor rank must be 1-4, got " + std::to_string(shape.size()));
    }
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeMismatch("tensor dims must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace

void Tensor::init_strides() {
    std::size_t s = 1;
    const int r = rank();
    for (int axis = r - 1; axis >= 1; --axis) {
        s *= static_cast<std::size_t>(shape_[static_cast<std::size_t>(axis)]);
        stride_[axis - 1] = s;
    }
}

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    std::size_t n = checked_count(shape);
    t.shape_ = std::move(shape);
    t.data_.assign(n, 0.0f);
    t.init_strides();
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data) {
    std::size_t n = checked_count(shape);
    if (n != data.size()) {
        throw ShapeMismatch("data length " + std::to_string(data.size()) +
                            " does not match shape product " + std::to_string(n));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.init_strides();
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

float Tensor::min_value() const {
    return *std::min_element(data_.begin(), data_.end());
}

float Tensor::max_value() const {
    return *std::max_element(data_.begin(), data_.end());
}

// Half-pixel-center source coordinate, clamped to [0, in-1].
BilinearSample bilinear_sample_axis(int d, int in, int out) {
    double scale = static_cast<double>(in) / static_cast<double>(out);
    double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    double last = static_cast<double>(in - 1);
    if (s > last) s = last;
    int lo = static_cast<int>(s);
    if (lo > in - 1) lo = in - 1;
    int hi = std::min(lo + 1, in - 1);
    return {lo, hi, static_cast<float>(s - static_cast<double>(lo))};
}

Tensor bilinear_resize(const Tensor& src, int out_h, int out_w) {
    if (src.rank() != 3) throw ShapeMismatch("bilinear_resize expects a C x H x W tensor");
    if (out_h < 1 || out_w < 1) throw ShapeMismatch("bilinear_resize output dims must be >= 1");
    const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    if (out_h == h && out_w == w) return src;

    std::vector<BilinearSample> ys(static_cast<std::size_t>(out_h));
    std::vector<BilinearSample> xs(static_cast<std::size_t>(out_w));
    for (int y = 0; y < out_h; ++y) ys[static_cast<std::size_t>(y)] = bilinear_sample_axis(y, h, out_h);
    for (int x = 0; x < out_w; ++x) xs[static_cast<std::size_t>(x)] = bilinear_sample_axis(x, w, out_w);

    Tensor dst = Tensor::zeros({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < out_h; ++y) {
            const BilinearSample& sy = ys[static_cast<std::size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const BilinearSample& sx = xs[static_cast<std::size_t>(x)];
                float top = src(ch, sy.lo, sx.lo) * (1.0f - sx.frac) + src(ch, sy.lo, sx.hi) * sx.frac;
                float bot = src(ch, sy.hi, sx.lo) * (1.0f - sx.frac) + src(ch, sy.hi, sx.hi) * sx.frac;
                dst(ch, y, x) = top * (1.0f - sy.frac) + bot * sy.frac;
            }
        }
    }
    return dst;
}

Tensor bilinear_resize_2d(const Tensor& src, int out_h, int out_w) {
    if (src.rank() != 2) throw ShapeMismatch("bilinear_resize_2d expects an H x W tensor");
    Tensor as3 = Tensor::from_data({1, src.dim(0), src.dim(1)},
                                   std::vector<float>(src.data().begin(), src.data().end()));
    Tensor out3 = bilinear_resize(as3, out_h, out_w);
    return Tensor::from_data({out_h, out_w},
                             std::vector<float>(out3.data().begin(), out3.data().end()));
}

float cosine_sim(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size()) throw ShapeMismatch("cosine_sim vector lengths differ");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    double norm_u = std::sqrt(nu), norm_v = std::sqrt(nv);
    if (norm_u < 1e-8 || norm_v < 1e-8) return 0.0f;
    double cs = dot / (norm_u * norm_v);
    return static_cast<float>(std::clamp(cs, -1.0, 1.0));
}

std::pair<Tensor, Tensor> softmax_pair(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("softmax_pair shapes differ");
    Tensor pa = Tensor::zeros(a.shape());
    Tensor pb = Tensor::zeros(a.shape());
    auto da = a.data();
    auto db = b.data();
    auto oa = pa.data();
    auto ob = pb.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        double m = std::max(da[i], db[i]);
        double ea = std::exp(static_cast<double>(da[i]) - m);
        double eb = std::exp(static_cast<double>(db[i]) - m);
        double z = ea + eb;
        oa[i] = static_cast<float>(ea / z);
        ob[i] = static_cast<float>(eb / z);
    }
    return {std::move(pa), std::move(pb)};
}

Tensor pinv2(const Tensor& c, float ridge) {
    if (c.rank() != 2 || c.dim(1) != 2) throw ShapeMismatch("pinv2 expects a C x 2 matrix");
    if (c.dim(0) < 2) throw ShapeMismatch("pinv2 needs at least 2 rows");
    const int n = c.dim(0);

    // 2x2 Gram matrix in double.
    double g00 = 0.0, g01 = 0.0, g11 = 0.0;
    for (int i = 0; i < n; ++i) {
        double a = c(i, 0), b = c(i, 1);
        g00 += a * a;
        g01 += a * b;
        g11 += b * b;
    }
    g00 += ridge;
    g11 += ridge;
    double det = g00 * g11 - g01 * g01;
    if (det < 1e-12) {
        throw SingularPrototypeMatrix("det(C^T C + ridge I) = " + std::to_string(det));
    }
    double i00 = g11 / det, i01 = -g01 / det, i11 = g00 / det;

    Tensor out = Tensor::zeros({2, n});
    for (int j = 0; j < n; ++j) {
        double a = c(j, 0), b = c(j, 1);
        out(0, j) = static_cast<float>(i00 * a + i01 * b);
        out(1, j) = static_cast<float>(i01 * a + i11 * b);
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeMismatch("matmul expects rank-2 tensors");
    if (a.dim(1) != b.dim(0)) throw ShapeMismatch("matmul inner dims differ");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            float aval = a(i, p);
            if (aval == 0.0f) continue;
            for (int j = 0; j < n; ++j) {
                out(i, j) += aval * b(p, j);
            }
        }
    }
    return out;
}

Tensor transpose2(const Tensor& a) {
    if (a.rank() != 2) throw ShapeMismatch("transpose2 expects a rank-2 tensor");
    Tensor out = Tensor::zeros({a.dim(1), a.dim(0)});
    for (int i = 0; i < a.dim(0); ++i) {
        for (int j = 0; j < a.dim(1); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

float min_singular_value_2col(const Tensor& c) {
    if (c.rank() != 2 || c.dim(1) != 2) throw ShapeMismatch("expected a C x 2 matrix");
    double g00 = 0.0, g01 = 0.0, g11 = 0.0;
    for (int i = 0; i < c.dim(0); ++i) {
        double a = c(i, 0), b = c(i, 1);
        g00 += a * a;
        g01 += a * b;
        g11 += b * b;
    }
    double tr = g00 + g11;
    double disc = std::sqrt(std::max(0.0, (g00 - g11) * (g00 - g11) + 4.0 * g01 * g01));
    double lam_min = 0.5 * (tr - disc);
    return static_cast<float>(std::sqrt(std::max(0.0, lam_min)));
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("max_abs_diff shapes differ");
    float m = 0.0f;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        m = std::max(m, std::abs(da[i] - db[i]));
    }
    return m;
}

}  // namespace dmt
