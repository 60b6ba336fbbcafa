#pragma once

#include <string>

#include "avseg/tensor.hpp"

namespace avseg {

// Which axis of the [T, D, S] distribution feature is normalized.
enum class SoftmaxAxis { channel, spatial };

enum class SyncLoss {
    kl,            // frame-wise KL(P_audio || P_visual)
    l2,            // L2 norm of P_audio - P_visual over the whole clip
    framewise_l2,  // mean over frames of the per-frame L2 norm
    none,
};

enum class SegLoss { dice_focal, dice };

std::string to_string(SoftmaxAxis a);
std::string to_string(SyncLoss s);
std::string to_string(SegLoss s);
SoftmaxAxis parse_softmax_axis(const std::string& s);
SyncLoss parse_sync_loss(const std::string& s);
SegLoss parse_seg_loss(const std::string& s);

inline constexpr double kProbabilityFloor = 1e-12;

// Mean over frames of 1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth).
// pred_probs and target are [T, C, H, W]; target must be binary. With C > 1
// the per-channel values are averaged as well.
Tensor dice_loss(const Tensor& pred_probs, const Tensor& target, double smooth = 1.0);

// Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t with p = sigmoid(logit).
// Targets are binary.
Tensor focal_loss(const Tensor& logits, const Tensor& target, double alpha = 0.25, double gamma = 2.0);

struct DistributionFeature {
    Tensor probs;  // [T, D, S]
    SoftmaxAxis axis = SoftmaxAxis::channel;
};

// f is either an audio feature [T, Na, D] (mean-pooled over queries and
// broadcast over the L tokens of `like`) or a token feature [T, L, D] with the
// same shape as `like`. Output is softmaxed along `axis` of [T, D, L].
DistributionFeature avfs_transform(const Tensor& f, const Tensor& like, SoftmaxAxis axis);

// (1/T) sum_t sum Pa log(Pa / Pv) with both sides floored at 1e-12.
Tensor avfs_loss(const DistributionFeature& pa, const DistributionFeature& pv);
Tensor avfs_l2_loss(const DistributionFeature& pa, const DistributionFeature& pv, bool framewise);

struct LossConfig {
    SegLoss seg = SegLoss::dice_focal;
    SyncLoss sync = SyncLoss::kl;
    SoftmaxAxis axis = SoftmaxAxis::channel;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double dice_smooth = 1.0;
    double dice_weight = 1.0;
    double focal_weight = 1.0;
    double sync_weight = 1.0;
};

// Weighted terms; total is their sum in the order dice + focal + avfs.
struct LossBreakdown {
    double dice = 0.0;
    double focal = 0.0;
    double avfs = 0.0;
    double total = 0.0;
    Tensor total_tensor;
};

// pred_logits / target [T, C, H, W]; f_a [T, Na, D]; f_agv [T, L, D].
LossBreakdown total_loss(const Tensor& pred_logits, const Tensor& target, const Tensor& f_a, const Tensor& f_agv,
                         const LossConfig& cfg);

}  // namespace avseg
