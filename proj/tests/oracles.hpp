#pragma once

// Naive reference implementations shared by the unit tests and the
// acceptance binary. Plain loops over std::vector, no library kernels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "avseg/attention.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

// Row-major [N, in] x Linear -> [N, out].
inline Mat apply_linear(const Mat& x, const avseg::Linear& lin) {
    const std::size_t in = lin.in_features(), out = lin.out_features();
    Mat y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t n = 0; n < x.size(); ++n) {
        for (std::size_t o = 0; o < out; ++o) {
            double s = lin.bias.defined() ? lin.bias.data()[o] : 0.0;
            for (std::size_t i = 0; i < in; ++i) s += x[n][i] * lin.weight.at({i, o});
            y[n][o] = s;
        }
    }
    return y;
}

// Rows of frame t of a [T, N, D] tensor.
inline Mat frame_rows(const avseg::Tensor& x, std::size_t t) {
    const std::size_t N = x.shape()[1], D = x.shape()[2];
    Mat m(N, std::vector<double>(D));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t d = 0; d < D; ++d) m[n][d] = x.at({t, n, d});
    }
    return m;
}

// Dense multi-head attention on already projected rows.
inline Mat attend(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
    const std::size_t D = q[0].size(), dk = D / heads;
    Mat out(q.size(), std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::vector<double> s(k.size());
            for (std::size_t j = 0; j < k.size(); ++j) {
                double dot = 0;
                for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) dot += q[i][c] * k[j][c];
                s[j] = dot / std::sqrt(static_cast<double>(dk));
            }
            const double m = *std::max_element(s.begin(), s.end());
            double z = 0;
            for (auto& x : s) z += (x = std::exp(x - m));
            for (std::size_t j = 0; j < k.size(); ++j) {
                for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) out[i][c] += s[j] / z * v[j][c];
            }
        }
    }
    return out;
}

// Bilinear lookup at normalized (x, y) on an h x w level stored from row
// `start` of `value`, with cell centers at (j + 0.5) / w and border clamping.
inline double bilinear(const Mat& value, std::size_t start, std::size_t h, std::size_t w, double x, double y,
                       std::size_t c) {
    const double px = std::clamp(x * static_cast<double>(w) - 0.5, 0.0, static_cast<double>(w - 1));
    const double py = std::clamp(y * static_cast<double>(h) - 0.5, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(px)), y0 = static_cast<std::size_t>(std::floor(py));
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
    auto at = [&](std::size_t i, std::size_t j) { return value[start + i * w + j][c]; };
    return (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x1) + (1 - fx) * fy * at(y1, x0) +
           fx * fy * at(y1, x1);
}

// Deformable aggregation with every offset, weight and gather materialized.
inline avseg::Tensor deformable_aggregate(const avseg::DeformableSelfAttention& blk, const avseg::Tensor& tokens,
                                          const avseg::DeformableGeometry& geom) {
    const std::size_t T = tokens.shape()[0], L = tokens.shape()[1], D = tokens.shape()[2];
    const std::size_t H = blk.cfg.num_heads, Lv = blk.cfg.num_levels, K = blk.cfg.num_points, dh = D / H;
    std::vector<double> out(T * L * D, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const Mat x = frame_rows(tokens, t);
        const Mat value = apply_linear(x, blk.value_proj);
        const Mat off = apply_linear(x, blk.sampling_offsets);
        const Mat logit = apply_linear(x, blk.attention_logits);
        for (std::size_t q = 0; q < L; ++q) {
            const double rx = geom.reference_points.at({q, 0}), ry = geom.reference_points.at({q, 1});
            for (std::size_t h = 0; h < H; ++h) {
                std::vector<double> w(Lv * K);
                double m = -1e300;
                for (std::size_t i = 0; i < Lv * K; ++i) m = std::max(m, w[i] = logit[q][h * Lv * K + i]);
                double z = 0;
                for (auto& v : w) z += (v = std::exp(v - m));
                for (std::size_t l = 0; l < Lv; ++l) {
                    const auto [lh, lw] = geom.level_shapes[l];
                    for (std::size_t k = 0; k < K; ++k) {
                        const std::size_t o = ((h * Lv + l) * K + k) * 2;
                        const double sx = rx + off[q][o] / static_cast<double>(lw);
                        const double sy = ry + off[q][o + 1] / static_cast<double>(lh);
                        const double a = w[l * K + k] / z;
                        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                            out[(t * L + q) * D + c] += a * bilinear(value, geom.level_starts[l], lh, lw, sx, sy, c);
                        }
                    }
                }
            }
        }
    }
    return avseg::Tensor({T, L, D}, std::move(out));
}

struct PixelCounts {
    double tp = 0, fp = 0, fn = 0;
};

// Confusion counts of frame t for binary mask sets [T, ...].
inline PixelCounts count_pixels(const avseg::Tensor& pred, const avseg::Tensor& gt, std::size_t t) {
    const std::size_t n = pred.numel() / pred.shape()[0];
    PixelCounts c;
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred.data()[t * n + i] == 1.0, g = gt.data()[t * n + i] == 1.0;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

inline double iou(const PixelCounts& c) {
    const double uni = c.tp + c.fp + c.fn;
    return uni == 0 ? 1.0 : c.tp / uni;
}

inline double fscore(const PixelCounts& c, double beta_sq) {
    if (c.tp + c.fp + c.fn == 0) return 1.0;
    const double prec = c.tp + c.fp == 0 ? 0.0 : c.tp / (c.tp + c.fp);
    const double rec = c.tp + c.fn == 0 ? 0.0 : c.tp / (c.tp + c.fn);
    return beta_sq * prec + rec == 0 ? 0.0 : (1 + beta_sq) * prec * rec / (beta_sq * prec + rec);
}

}  // namespace oracle
