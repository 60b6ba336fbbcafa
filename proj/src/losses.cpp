#include "avseg/losses.hpp"

#include <cmath>

#include "avseg/errors.hpp"
#include "avseg/ops.hpp"

namespace avseg {

std::string to_string(SoftmaxAxis a) { return a == SoftmaxAxis::channel ? "channel" : "spatial"; }

std::string to_string(SyncLoss s) {
    switch (s) {
        case SyncLoss::kl: return "kl";
        case SyncLoss::l2: return "l2";
        case SyncLoss::framewise_l2: return "framewise_l2";
        case SyncLoss::none: return "none";
    }
    return "?";
}

std::string to_string(SegLoss s) { return s == SegLoss::dice_focal ? "dice_focal" : "dice"; }

SoftmaxAxis parse_softmax_axis(const std::string& s) {
    if (s == "channel") return SoftmaxAxis::channel;
    if (s == "spatial") return SoftmaxAxis::spatial;
    throw ConfigError("unknown softmax axis '" + s + "'");
}

SyncLoss parse_sync_loss(const std::string& s) {
    for (auto v : {SyncLoss::kl, SyncLoss::l2, SyncLoss::framewise_l2, SyncLoss::none}) {
        if (to_string(v) == s) return v;
    }
    throw ConfigError("unknown sync loss '" + s + "'");
}

SegLoss parse_seg_loss(const std::string& s) {
    if (s == "dice_focal") return SegLoss::dice_focal;
    if (s == "dice") return SegLoss::dice;
    throw ConfigError("unknown segmentation loss '" + s + "'");
}

namespace {

void check_binary(const Tensor& target, const char* what) {
    for (double v : target.data()) {
        if (v != 0.0 && v != 1.0) throw DataError(std::string(what) + ": target values must be 0 or 1");
    }
}

}  // namespace

Tensor dice_loss(const Tensor& pred_probs, const Tensor& target, double smooth) {
    if (pred_probs.shape() != target.shape() || pred_probs.dim() != 4) {
        throw DimensionError("dice_loss: prediction " + shape_str(pred_probs.shape()) + " and target " +
                             shape_str(target.shape()) + " must share a [T,C,H,W] shape");
    }
    check_binary(target, "dice_loss");
    const auto& s = pred_probs.shape();
    const Shape rows{s[0] * s[1], s[2] * s[3]};
    Tensor p = reshape(pred_probs, rows);
    Tensor t = reshape(target, rows);
    Tensor inter = sum(mul(p, t), 1);
    Tensor denom = add_scalar(add(sum(p, 1), sum(t, 1)), smooth);
    Tensor ratio = div(add_scalar(scale(inter, 2.0), smooth), denom);
    return mean(add_scalar(neg(ratio), 1.0));
}

Tensor focal_loss(const Tensor& logits, const Tensor& target, double alpha, double gamma) {
    if (logits.shape() != target.shape()) {
        throw DimensionError("focal_loss: logits " + shape_str(logits.shape()) + " and target " +
                             shape_str(target.shape()) + " differ");
    }
    const auto x = logits.data();
    const auto y = target.data();
    const std::size_t n = x.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    auto dloss = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = y[i] > 0.5;
        const double s = pos ? 1.0 : -1.0;
        const double z = s * x[i];
        // log p_t = -softplus(-z), 1 - p_t = sigmoid(-z)
        const double log_pt = -(std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))));
        const double pt = std::exp(log_pt);
        const double one_minus = z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
        const double a = pos ? alpha : 1.0 - alpha;
        const double mod = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
        total += -a * mod * log_pt;
        // d/dx of -a (1-pt)^g log pt, using dpt/dx = s pt (1-pt)
        const double d = -a * s * (-gamma * mod * pt * log_pt + mod * one_minus);
        (*dloss)[i] = d * inv_n;
    }
    detail::add_flops(20 * n);
    return detail::make_result({1}, {total * inv_n}, {logits, target}, [dloss](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const double up = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * (*dloss)[i];
    });
}

DistributionFeature avfs_transform(const Tensor& f, const Tensor& like, SoftmaxAxis axis) {
    const auto& ls = like.shape();
    const auto& fs = f.shape();
    if (ls.size() != 3 || fs.size() != 3 || fs[0] != ls[0] || fs[2] != ls[2]) {
        throw DimensionError("avfs_transform: feature " + shape_str(fs) + " cannot be matched to " + shape_str(ls));
    }
    Tensor x = f;
    if (fs != ls) x = expand(mean(f, 1, true), ls);
    Tensor cols = permute(x, {0, 2, 1});  // T, D, L
    return {softmax(cols, axis == SoftmaxAxis::channel ? 1 : 2), axis};
}

namespace {

void check_pair(const DistributionFeature& pa, const DistributionFeature& pv) {
    if (pa.axis != pv.axis) throw ContractError("avfs: distributions were normalized along different axes");
    if (pa.probs.shape() != pv.probs.shape() || pa.probs.dim() != 3) {
        throw DimensionError("avfs: distribution shapes " + shape_str(pa.probs.shape()) + " and " +
                             shape_str(pv.probs.shape()) + " differ");
    }
}

}  // namespace

Tensor avfs_loss(const DistributionFeature& pa, const DistributionFeature& pv) {
    check_pair(pa, pv);
    const double T = static_cast<double>(pa.probs.shape()[0]);
    Tensor a = clamp_min(pa.probs, kProbabilityFloor);
    Tensor v = clamp_min(pv.probs, kProbabilityFloor);
    return scale(sum(mul(pa.probs, sub(log(a), log(v)))), 1.0 / T);
}

Tensor avfs_l2_loss(const DistributionFeature& pa, const DistributionFeature& pv, bool framewise) {
    check_pair(pa, pv);
    Tensor diff = square(sub(pa.probs, pv.probs));
    if (!framewise) return sqrt(add_scalar(sum(diff), kProbabilityFloor));
    const auto& s = diff.shape();
    Tensor per_frame = sum(reshape(diff, {s[0], s[1] * s[2]}), 1);
    return mean(sqrt(add_scalar(per_frame, kProbabilityFloor)));
}

LossBreakdown total_loss(const Tensor& pred_logits, const Tensor& target, const Tensor& f_a, const Tensor& f_agv,
                         const LossConfig& cfg) {
    LossBreakdown out;
    Tensor dice = scale(dice_loss(sigmoid(pred_logits), target, cfg.dice_smooth), cfg.dice_weight);
    Tensor total = dice;
    out.dice = dice.item();
    if (cfg.seg == SegLoss::dice_focal) {
        Tensor focal = scale(focal_loss(pred_logits, target, cfg.focal_alpha, cfg.focal_gamma), cfg.focal_weight);
        out.focal = focal.item();
        total = add(total, focal);
    }
    if (cfg.sync != SyncLoss::none && cfg.sync_weight != 0.0) {
        DistributionFeature pa = avfs_transform(f_a, f_agv, cfg.axis);
        DistributionFeature pv = avfs_transform(f_agv, f_agv, cfg.axis);
        Tensor sync = cfg.sync == SyncLoss::kl ? avfs_loss(pa, pv)
                                               : avfs_l2_loss(pa, pv, cfg.sync == SyncLoss::framewise_l2);
        sync = scale(sync, cfg.sync_weight);
        out.avfs = sync.item();
        total = add(total, sync);
    }
    out.total_tensor = total;
    out.total = total.item();
    return out;
}

}  // namespace avseg
