#pragma once

// Differentiable tensor primitives. Every op records a backward closure when
// any input requires grad; shape problems raise DimensionError naming the
// offending shapes.

#include <cstddef>
#include <span>
#include <vector>

#include "avseg/tensor.hpp"

namespace avseg {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// [..., m, k] x [..., k, n] -> [..., m, n]; batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax along `axis` (negative counts from the end).
Tensor softmax(const Tensor& x, int axis);

// Normalizes the last dimension, then applies gain and bias of that length.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
// max(x, floor); gradient passes only where x > floor.
Tensor clamp_min(const Tensor& x, double floor);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
// Broadcast-expand size-1 (or missing leading) dims to `shape`.
Tensor expand(const Tensor& x, const Shape& shape);

// Bilinear lookup into featmap [H, W, D] at normalized points [P, 2] given as
// (x, y) in [0, 1]. Cell (i, j) has its center at ((j + 0.5) / W, (i + 0.5) / H).
// Coordinates outside the centers' hull are clamped to the border cells, where
// the gradient with respect to the point is zero.
Tensor bilinear_sample(const Tensor& featmap, const Tensor& points);

// Resizes [B, h, w, C] grids to [B, out_h, out_w, C], sampling each output
// pixel center with the same convention as bilinear_sample.
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

struct LevelShape {
    std::size_t height = 0;
    std::size_t width = 0;
};

// Multi-level deformable gather.
//   value:     [T, Nv, D], levels stored back to back starting at level_starts
//   locations: [T, Nq, heads, levels, points, 2] normalized (x, y)
//   weights:   [T, Nq, heads, levels, points]
// Head h reads channels [h*D/heads, (h+1)*D/heads). Result is [T, Nq, D].
Tensor deformable_sample(const Tensor& value, std::span<const LevelShape> levels,
                         std::span<const std::size_t> level_starts, const Tensor& locations,
                         const Tensor& weights);

}  // namespace avseg
