#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dmt/fusion_net.hpp"
#include "dmt/smt.hpp"
#include "dmt/tensor.hpp"

namespace dmt {

struct LossWeights {
    float alpha1 = 1.0f;  // background head weight in L2
    float alpha2 = 0.5f;  // coarse-supervision weight in the total loss

    void validate() const {
        if (alpha1 < 0.0f || alpha2 < 0.0f) throw ConfigError("loss weights must be non-negative");
    }
};

/// Mean binary cross-entropy with predictions clipped to [1e-7, 1 - 1e-7];
/// soft targets in [0, 1] are allowed.
double bce(const Tensor& pred, const Tensor& target);

/// dBCE/dpred (mean convention); zero where the clip was active.
Tensor bce_grad(const Tensor& pred, const Tensor& target);

/// L1: mean over levels of BCE between the coarse foreground channel and
/// the bilinearly resized query mask.
double loss_coarse(const CoarseMask& coarse, const Tensor& query_mask);

/// L2: BCE(M_f, M_q) + alpha1 * BCE(M_b, 1 - M_q).
double loss_dual(const Tensor& m_f, const Tensor& m_b, const Tensor& query_mask,
                 const LossWeights& w);

/// Upstream gradients for both heads under the L2 loss.
struct DualGrads {
    Tensor d_m_f;
    Tensor d_m_b;
};
DualGrads loss_dual_grads(const Tensor& m_f, const Tensor& m_b, const Tensor& query_mask,
                          const LossWeights& w);

/// Total loss: alpha2 * L1 + L2.
double loss_total(double l1, double l2, const LossWeights& w);

/// Mean of per-shot BCEs between predicted and true support masks.
double loss_tsf(const std::vector<Tensor>& pred_support, const std::vector<Tensor>& gt_support);

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Per-tensor first/second moment state, keyed by parameter name.
class AdamState {
public:
    struct Slot {
        Tensor m;
        Tensor v;
    };

    /// One bias-corrected update over matched (param, grad) pairs; slots are
    /// created lazily, the shared step count increments once per call.
    void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
              const AdamConfig& cfg);

    long step_count() const { return step_; }
    const std::map<std::string, Slot>& slots() const { return slots_; }
    void restore(long step, std::map<std::string, Slot> slots);

private:
    std::map<std::string, Slot> slots_;
    long step_ = 0;
};

/// Central-difference check of an analytic gradient. Returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
/// Throws NonFiniteLoss when fn produces a non-finite value.
double fd_gradcheck(const std::function<double(const std::vector<double>&)>& fn,
                    std::vector<double> params, const std::vector<double>& analytic,
                    double h = 1e-3);

}  // namespace dmt
