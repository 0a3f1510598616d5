#include "dmt/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace dmt {

namespace {

constexpr double kClip = 1e-7;

void check_bce_inputs(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) throw ShapeMismatch("bce shapes differ");
    for (float t : target.data()) {
        if (!(t >= 0.0f && t <= 1.0f)) throw Error("bce target outside [0, 1]");
    }
}

}  // namespace

double bce(const Tensor& pred, const Tensor& target) {
    check_bce_inputs(pred, target);
    double acc = 0.0;
    auto p = pred.data();
    auto t = target.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double pc = std::clamp(static_cast<double>(p[i]), kClip, 1.0 - kClip);
        acc -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
    }
    double loss = acc / static_cast<double>(p.size());
    if (!std::isfinite(loss)) throw NonFiniteLoss("bce produced a non-finite value");
    return loss;
}

Tensor bce_grad(const Tensor& pred, const Tensor& target) {
    check_bce_inputs(pred, target);
    Tensor g = Tensor::zeros(pred.shape());
    auto p = pred.data();
    auto t = target.data();
    const double inv_n = 1.0 / static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        double pv = p[i];
        if (pv <= kClip || pv >= 1.0 - kClip) continue;  // clip region is flat
        g.data()[i] = static_cast<float>((-t[i] / pv + (1.0 - t[i]) / (1.0 - pv)) * inv_n);
    }
    return g;
}

double loss_coarse(const CoarseMask& coarse, const Tensor& query_mask) {
    if (coarse.empty()) throw ShapeMismatch("coarse mask has no levels");
    double acc = 0.0;
    for (const CoarseMaskLevel& lvl : coarse) {
        Tensor resized = bilinear_resize_2d(query_mask, lvl.fg.dim(0), lvl.fg.dim(1));
        acc += bce(lvl.fg, resized);
    }
    return acc / static_cast<double>(coarse.size());
}

double loss_dual(const Tensor& m_f, const Tensor& m_b, const Tensor& query_mask,
                 const LossWeights& w) {
    w.validate();
    Tensor inv = Tensor::zeros(query_mask.shape());
    for (std::size_t i = 0; i < inv.size(); ++i) inv.data()[i] = 1.0f - query_mask.data()[i];
    return bce(m_f, query_mask) + static_cast<double>(w.alpha1) * bce(m_b, inv);
}

DualGrads loss_dual_grads(const Tensor& m_f, const Tensor& m_b, const Tensor& query_mask,
                          const LossWeights& w) {
    w.validate();
    Tensor inv = Tensor::zeros(query_mask.shape());
    for (std::size_t i = 0; i < inv.size(); ++i) inv.data()[i] = 1.0f - query_mask.data()[i];
    DualGrads g;
    g.d_m_f = bce_grad(m_f, query_mask);
    g.d_m_b = bce_grad(m_b, inv);
    for (float& v : g.d_m_b.data()) v *= w.alpha1;
    return g;
}

double loss_total(double l1, double l2, const LossWeights& w) {
    w.validate();
    return static_cast<double>(w.alpha2) * l1 + l2;
}

double loss_tsf(const std::vector<Tensor>& pred_support, const std::vector<Tensor>& gt_support) {
    if (pred_support.empty() || pred_support.size() != gt_support.size()) {
        throw ShapeMismatch("loss_tsf needs K >= 1 matched mask pairs");
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < pred_support.size(); ++k) {
        acc += bce(pred_support[k], gt_support[k]);
    }
    return acc / static_cast<double>(pred_support.size());
}

void AdamState::step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
                     const AdamConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeMismatch("param/grad count mismatch");
    if (cfg.lr < 0.0f) throw ConfigError("learning rate must be non-negative");
    ++step_;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].tensor;
        const Tensor& g = *grads[i].tensor;
        if (!p.same_shape(g)) {
            throw ShapeMismatch("gradient shape mismatch for " + params[i].name);
        }
        Slot& slot = slots_[params[i].name];
        if (slot.m.empty()) {
            slot.m = Tensor::zeros(p.shape());
            slot.v = Tensor::zeros(p.shape());
        } else if (!slot.m.same_shape(p)) {
            throw ShapeMismatch("optimizer slot shape mismatch for " + params[i].name);
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            double gv = g.data()[j];
            double m = b1 * slot.m.data()[j] + (1.0 - b1) * gv;
            double v = b2 * slot.v.data()[j] + (1.0 - b2) * gv * gv;
            slot.m.data()[j] = static_cast<float>(m);
            slot.v.data()[j] = static_cast<float>(v);
            double update = cfg.lr * (m / corr1) / (std::sqrt(v / corr2) + cfg.eps);
            p.data()[j] = static_cast<float>(p.data()[j] - update);
        }
    }
}

void AdamState::restore(long step, std::map<std::string, Slot> slots) {
    step_ = step;
    slots_ = std::move(slots);
}

double fd_gradcheck(const std::function<double(const std::vector<double>&)>& fn,
                    std::vector<double> params, const std::vector<double>& analytic, double h) {
    if (params.size() != analytic.size()) throw ShapeMismatch("gradcheck size mismatch");
    double max_err = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double saved = params[i];
        params[i] = saved + h;
        double up = fn(params);
        params[i] = saved - h;
        double down = fn(params);
        params[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NonFiniteLoss("gradcheck objective non-finite near parameter " + std::to_string(i));
        }
        double numeric = (up - down) / (2.0 * h);
        double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
        max_err = std::max(max_err, std::abs(numeric - analytic[i]) / denom);
    }
    return max_err;
}

}  // namespace dmt
