#include "avseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "avseg/errors.hpp"

namespace avseg {

using detail::add_flops;
using detail::make_alias;
using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
    }
    return static_cast<std::size_t>(a);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Strides of `in` aligned to the right of `out`, zero on broadcast dims.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    const auto in_strides = contiguous_strides(in);
    const std::size_t offset = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] != 1) strides[offset + i] = in_strides[i];
    }
    return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Calls fn(out_index, offset) for every element of `out` in row-major order,
// where offset follows `strides`.
template <typename Fn>
void for_each_strided(const Shape& out, const std::vector<std::size_t>& strides, Fn&& fn) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    if (rank == 0) {
        fn(std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, off);
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out[d]) {
                off += strides[d];
                break;
            }
            off -= strides[d] * (out[d] - 1);
            idx[d] = 0;
        }
    }
}

// Index maps from output positions into each operand of a broadcast binary op.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> a_index;
    std::vector<std::size_t> b_index;
    bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    plan.out = broadcast_shape(a, b, op);
    const std::size_t n = shape_numel(plan.out);
    plan.a_index.resize(n);
    plan.b_index.resize(n);
    const std::size_t na = shape_numel(a);
    const std::size_t nb = shape_numel(b);
    const bool a_full = na == n;
    const bool b_full = nb == n;
    auto is_suffix = [&](const Shape& small, std::size_t nsmall) {
        if (nsmall == 1) return true;
        if (small.size() > plan.out.size()) return false;
        // Trailing dims must match exactly with no interior broadcasting.
        std::size_t k = small.size();
        while (k > 0 && small[small.size() - k] == 1) --k;
        for (std::size_t i = 0; i < k; ++i) {
            if (small[small.size() - 1 - i] != plan.out[plan.out.size() - 1 - i]) return false;
        }
        return true;
    };
    if (a_full && is_suffix(b, nb)) {
        for (std::size_t i = 0; i < n; ++i) {
            plan.a_index[i] = i;
            plan.b_index[i] = i % nb;
        }
        return plan;
    }
    if (b_full && is_suffix(a, na)) {
        for (std::size_t i = 0; i < n; ++i) {
            plan.a_index[i] = i % na;
            plan.b_index[i] = i;
        }
        return plan;
    }
    for_each_strided(plan.out, broadcast_strides(a, plan.out),
                     [&](std::size_t i, std::size_t off) { plan.a_index[i] = off; });
    for_each_strided(plan.out, broadcast_strides(b, plan.out),
                     [&](std::size_t i, std::size_t off) { plan.b_index[i] = off; });
    return plan;
}

// Shared driver for the four broadcast arithmetic ops. `fwd(x, y)` computes the
// value, `dfa(x, y)` / `dfb(x, y)` its partials.
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da dfa, Db dfb) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), name));
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t n = shape_numel(plan->out);
    std::vector<double> out(n);
    if (plan->same) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[plan->a_index[i]], bv[plan->b_index[i]]);
    }
    add_flops(n);
    return make_result(plan->out, std::move(out), {a, b}, [plan, dfa, dfb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grad;
        const auto& x = *pa.data;
        const auto& y = *pb.data;
        const std::size_t n = g.size();
        if (pa.requires_grad) {
            auto& ga = pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = plan->same ? i : plan->a_index[i];
                const std::size_t ib = plan->same ? i : plan->b_index[i];
                ga[ia] += g[i] * dfa(x[ia], y[ib]);
            }
        }
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = plan->same ? i : plan->a_index[i];
                const std::size_t ib = plan->same ? i : plan->b_index[i];
                gb[ib] += g[i] * dfb(x[ia], y[ib]);
            }
        }
    });
}

// Elementwise unary op; `deriv(x, y)` receives input and output values.
template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    add_flops(xv.size());
    return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        const auto& in = *p.data;
        const auto& y = *self.data;
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(in[i], y[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(
        x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary_op(
        x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary_op(
        x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v, double) {
            return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
        });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp_min(const Tensor& x, double floor) {
    return unary_op(
        x, [floor](double v) { return v > floor ? v : floor; },
        [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa[sa.size() - 1];
    const std::size_t n = sb[sb.size() - 1];

    Shape batch_a(sa.begin(), sa.end() - 2);
    Shape batch_b(sb.begin(), sb.end() - 2);
    Shape batch_out;
    try {
        batch_out = broadcast_shape(batch_a, batch_b, "matmul");
    } catch (const DimensionError&) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }

    // (a_offset, b_offset) per output matrix, in units of whole matrices.
    struct Pairs {
        std::vector<std::size_t> a, b;
        std::size_t rows;  // rows per a-block (m, or all rows when b is shared)
    };
    auto pairs = std::make_shared<Pairs>();
    Shape out_shape = batch_out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    if (batch_b.empty() || shape_numel(batch_b) == 1) {
        // Shared right operand: fold every batch of `a` into the row count.
        const std::size_t blocks = shape_numel(batch_out);
        if (shape_numel(batch_a) != blocks) {
            throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
        }
        pairs->a = {0};
        pairs->b = {0};
        pairs->rows = blocks * m;
    } else {
        const std::size_t blocks = shape_numel(batch_out);
        pairs->a.resize(blocks);
        pairs->b.resize(blocks);
        for_each_strided(batch_out, broadcast_strides(batch_a, batch_out),
                         [&](std::size_t i, std::size_t off) { pairs->a[i] = off; });
        for_each_strided(batch_out, broadcast_strides(batch_b, batch_out),
                         [&](std::size_t i, std::size_t off) { pairs->b[i] = off; });
        pairs->rows = m;
    }

    std::vector<double> out(shape_numel(out_shape));
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t rows = pairs->rows;
    for (std::size_t blk = 0; blk < pairs->a.size(); ++blk) {
        ConstMatMap A(av.data() + pairs->a[blk] * m * k, rows, k);
        ConstMatMap B(bv.data() + pairs->b[blk] * k * n, k, n);
        MatMap C(out.data() + blk * rows * n, rows, n);
        C.noalias() = A * B;
    }
    add_flops(2 * pairs->a.size() * rows * k * n);

    return make_result(std::move(out_shape), std::move(out), {a, b}, [pairs, m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::size_t rows = pairs->rows;
        for (std::size_t blk = 0; blk < pairs->a.size(); ++blk) {
            ConstMatMap G(self.grad.data() + blk * rows * n, rows, n);
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                ConstMatMap B(pb.data->data() + pairs->b[blk] * k * n, k, n);
                MatMap GA(ga.data() + pairs->a[blk] * m * k, rows, k);
                GA.noalias() += G * B.transpose();
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                ConstMatMap A(pa.data->data() + pairs->a[blk] * m * k, rows, k);
                MatMap GB(gb.data() + pairs->b[blk] * k * n, k, n);
                GB.noalias() += A.transpose() * G;
            }
        }
        add_flops(4 * pairs->a.size() * rows * k * n);
    });
}

Tensor softmax(const Tensor& x, int axis) {
    const Shape& s = x.shape();
    const std::size_t ax = normalize_axis(axis, s.size(), s);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[ax];
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            const double inv = 1.0 / total;
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
        }
    }
    add_flops(3 * xv.size());
    return make_result(s, std::move(out), {x}, [outer, inner, len](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        const auto& y = *self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t i = base + j * inner;
                    gp[i] += y[i] * (g[i] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
    const Shape& s = x.shape();
    const std::size_t n = s.back();
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                             shape_str(bias.shape()) + " do not match last dim of " + shape_str(s));
    }
    const std::size_t rows = x.numel() / n;
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    auto stats = std::make_shared<std::vector<double>>(2 * rows);  // mean, rstd
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * r] = mu;
        (*stats)[2 * r + 1] = rstd;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * rstd * gv[j] + bv[j];
    }
    add_flops(8 * xv.size());
    return make_result(s, std::move(out), {x, gain, bias}, [stats, rows, n](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& xv = *px.data;
        const auto& gv = *pg.data;
        const auto& g = self.grad;
        std::vector<double> xhat(n), dyg(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const double mu = (*stats)[2 * r];
            const double rstd = (*stats)[2 * r + 1];
            double mean_dyg = 0.0, mean_dyg_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                xhat[j] = (xv[r * n + j] - mu) * rstd;
                dyg[j] = g[r * n + j] * gv[j];
                mean_dyg += dyg[j];
                mean_dyg_xhat += dyg[j] * xhat[j];
            }
            mean_dyg /= static_cast<double>(n);
            mean_dyg_xhat /= static_cast<double>(n);
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] += rstd * (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat);
                }
            }
            if (pg.requires_grad) {
                auto& gg = pg.ensure_grad();
                for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[j];
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
    });
}

namespace {

struct Reduction {
    std::size_t outer, len, inner;
};

Reduction plan_reduction(const Shape& s, std::size_t ax) {
    Reduction r{1, s[ax], 1};
    for (std::size_t i = 0; i < ax; ++i) r.outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

Tensor reduce_axis(const Tensor& x, int axis, bool keepdim, bool average) {
    const Shape& s = x.shape();
    const std::size_t ax = normalize_axis(axis, s.size(), s);
    const Reduction r = plan_reduction(s, ax);
    const double factor = average ? 1.0 / static_cast<double>(r.len) : 1.0;
    const auto xv = x.data();
    std::vector<double> out(r.outer * r.inner, 0.0);
    for (std::size_t o = 0; o < r.outer; ++o) {
        for (std::size_t j = 0; j < r.len; ++j) {
            const double* src = xv.data() + (o * r.len + j) * r.inner;
            double* dst = out.data() + o * r.inner;
            for (std::size_t in = 0; in < r.inner; ++in) dst[in] += src[in];
        }
    }
    if (average) {
        for (auto& v : out) v *= factor;
    }
    add_flops(xv.size());
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != ax) out_shape.push_back(s[i]);
        else if (keepdim) out_shape.push_back(1);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    return make_result(std::move(out_shape), std::move(out), {x}, [r, factor](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < r.outer; ++o) {
            for (std::size_t j = 0; j < r.len; ++j) {
                double* dst = gp.data() + (o * r.len + j) * r.inner;
                const double* src = self.grad.data() + o * r.inner;
                for (std::size_t in = 0; in < r.inner; ++in) dst[in] += src[in] * factor;
            }
        }
    });
}

Tensor reduce_all(const Tensor& x, bool average) {
    const auto xv = x.data();
    double total = 0.0;
    for (double v : xv) total += v;
    const double factor = average ? 1.0 / static_cast<double>(xv.size()) : 1.0;
    add_flops(xv.size());
    return make_result({1}, {total * factor}, {x}, [factor](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        const double g = self.grad[0] * factor;
        for (auto& v : gp) v += g;
    });
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false); }
Tensor sum(const Tensor& x, int axis, bool keepdim) { return reduce_axis(x, axis, keepdim, false); }
Tensor mean(const Tensor& x) { return reduce_all(x, true); }
Tensor mean(const Tensor& x, int axis, bool keepdim) { return reduce_axis(x, axis, keepdim, true); }

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    for (auto v : shape) {
        if (v == 0) throw DimensionError("reshape: zero extent in " + shape_str(shape));
    }
    return make_alias(std::move(shape), x.node()->data, {x}, [](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const Shape& s = x.shape();
    if (order.size() != s.size()) {
        throw DimensionError("permute: order has " + std::to_string(order.size()) + " entries for shape " +
                             shape_str(s));
    }
    std::vector<bool> seen(s.size(), false);
    for (auto o : order) {
        if (o >= s.size() || seen[o]) throw DimensionError("permute: invalid axis order for " + shape_str(s));
        seen[o] = true;
    }
    const auto in_strides = contiguous_strides(s);
    Shape out_shape(s.size());
    std::vector<std::size_t> strides(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        out_shape[i] = s[order[i]];
        strides[i] = in_strides[order[i]];
    }
    auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
    for_each_strided(out_shape, strides, [&](std::size_t i, std::size_t off) { (*index)[i] = off; });
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
    return make_result(std::move(out_shape), std::move(out), {x}, [index](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t i = 0; i < index->size(); ++i) gp[(*index)[i]] += self.grad[i];
    });
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
    const Shape& s = x.shape();
    const std::size_t a = normalize_axis(axis_a, s.size(), s);
    const std::size_t b = normalize_axis(axis_b, s.size(), s);
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::swap(order[a], order[b]);
    return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const std::size_t ax = normalize_axis(axis, s0.size(), s0);
    Shape out_shape = s0;
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
        if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
        out_shape[ax] += s[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
    for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
    auto widths = std::make_shared<std::vector<std::size_t>>();
    for (const auto& p : parts) widths->push_back(p.shape()[ax] * inner);
    const std::size_t row = out_shape[ax] * inner;
    std::vector<double> out(outer * row);
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].data();
        const std::size_t w = (*widths)[k];
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * w, w, out.data() + o * row + col);
        }
        col += w;
    }
    return make_result(std::move(out_shape), std::move(out), parts, [widths, outer, row](Node& self) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            const std::size_t w = (*widths)[k];
            if (p.requires_grad) {
                auto& gp = p.ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = self.grad.data() + o * row + col;
                    double* dst = gp.data() + o * w;
                    for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                }
            }
            col += w;
        }
    });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
    const Shape& s = x.shape();
    const std::size_t ax = normalize_axis(axis, s.size(), s);
    if (length == 0 || start + length > s[ax]) {
        throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of range on axis " + std::to_string(ax) + " of " + shape_str(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t row_in = s[ax] * inner;
    const std::size_t row_out = length * inner;
    const std::size_t col = start * inner;
    const auto xv = x.data();
    std::vector<double> out(outer * row_out);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * row_in + col, row_out, out.data() + o * row_out);
    Shape out_shape = s;
    out_shape[ax] = length;
    return make_result(std::move(out_shape), std::move(out), {x}, [outer, row_in, row_out, col](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * row_out;
            double* dst = gp.data() + o * row_in + col;
            for (std::size_t i = 0; i < row_out; ++i) dst[i] += src[i];
        }
    });
}

Tensor expand(const Tensor& x, const Shape& shape) {
    const Shape& s = x.shape();
    bool ok = s.size() <= shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
        const std::size_t target = shape[shape.size() - s.size() + i];
        ok = s[i] == target || s[i] == 1;
    }
    if (!ok) throw DimensionError("expand: cannot broadcast " + shape_str(s) + " to " + shape_str(shape));
    auto index = std::make_shared<std::vector<std::size_t>>(shape_numel(shape));
    for_each_strided(shape, broadcast_strides(s, shape), [&](std::size_t i, std::size_t off) { (*index)[i] = off; });
    const auto xv = x.data();
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index)[i]];
    return make_result(shape, std::move(out), {x}, [index](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t i = 0; i < index->size(); ++i) gp[(*index)[i]] += self.grad[i];
    });
}

namespace {

// One bilinear lookup: four taps plus the partials of the blend weights with
// respect to the normalized coordinates.
struct BilinearTap {
    std::size_t c00, c01, c10, c11;  // cell indices y * W + x
    double w00, w01, w10, w11;
    double fx, fy;
    double scale_x, scale_y;  // d(pixel)/d(normalized), zero when clamped
};

BilinearTap make_tap(double u, double v, std::size_t height, std::size_t width) {
    BilinearTap t{};
    double px = u * static_cast<double>(width) - 0.5;
    double py = v * static_cast<double>(height) - 0.5;
    t.scale_x = static_cast<double>(width);
    t.scale_y = static_cast<double>(height);
    const double max_x = static_cast<double>(width - 1);
    const double max_y = static_cast<double>(height - 1);
    if (px < 0.0 || px > max_x) {
        px = std::clamp(px, 0.0, max_x);
        t.scale_x = 0.0;
    }
    if (py < 0.0 || py > max_y) {
        py = std::clamp(py, 0.0, max_y);
        t.scale_y = 0.0;
    }
    const auto x0 = static_cast<std::size_t>(std::floor(px));
    const auto y0 = static_cast<std::size_t>(std::floor(py));
    const std::size_t x1 = std::min(x0 + 1, width - 1);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    t.fx = px - static_cast<double>(x0);
    t.fy = py - static_cast<double>(y0);
    t.c00 = y0 * width + x0;
    t.c01 = y0 * width + x1;
    t.c10 = y1 * width + x0;
    t.c11 = y1 * width + x1;
    t.w00 = (1 - t.fx) * (1 - t.fy);
    t.w01 = t.fx * (1 - t.fy);
    t.w10 = (1 - t.fx) * t.fy;
    t.w11 = t.fx * t.fy;
    return t;
}

}  // namespace

Tensor bilinear_sample(const Tensor& featmap, const Tensor& points) {
    const Shape& fs = featmap.shape();
    const Shape& ps = points.shape();
    if (fs.size() != 3 || ps.size() != 2 || ps[1] != 2) {
        throw DimensionError("bilinear_sample: expected featmap [H,W,D] and points [P,2], got " + shape_str(fs) +
                             " and " + shape_str(ps));
    }
    const std::size_t H = fs[0], W = fs[1], D = fs[2], P = ps[0];
    const auto fv = featmap.data();
    const auto pv = points.data();
    auto taps = std::make_shared<std::vector<BilinearTap>>(P);
    std::vector<double> out(P * D);
    for (std::size_t p = 0; p < P; ++p) {
        const BilinearTap t = make_tap(pv[2 * p], pv[2 * p + 1], H, W);
        (*taps)[p] = t;
        for (std::size_t d = 0; d < D; ++d) {
            out[p * D + d] = t.w00 * fv[t.c00 * D + d] + t.w01 * fv[t.c01 * D + d] + t.w10 * fv[t.c10 * D + d] +
                             t.w11 * fv[t.c11 * D + d];
        }
    }
    add_flops(8 * P * D);
    return make_result({P, D}, std::move(out), {featmap, points}, [taps, D](Node& self) {
        Node& pf = *self.parents[0];
        Node& pp = *self.parents[1];
        const auto& fv = *pf.data;
        const auto& g = self.grad;
        for (std::size_t p = 0; p < taps->size(); ++p) {
            const BilinearTap& t = (*taps)[p];
            if (pf.requires_grad) {
                auto& gf = pf.ensure_grad();
                for (std::size_t d = 0; d < D; ++d) {
                    const double gd = g[p * D + d];
                    gf[t.c00 * D + d] += t.w00 * gd;
                    gf[t.c01 * D + d] += t.w01 * gd;
                    gf[t.c10 * D + d] += t.w10 * gd;
                    gf[t.c11 * D + d] += t.w11 * gd;
                }
            }
            if (pp.requires_grad) {
                auto& gp = pp.ensure_grad();
                double du = 0.0, dv = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    const double f00 = fv[t.c00 * D + d], f01 = fv[t.c01 * D + d];
                    const double f10 = fv[t.c10 * D + d], f11 = fv[t.c11 * D + d];
                    const double gd = g[p * D + d];
                    du += gd * ((1 - t.fy) * (f01 - f00) + t.fy * (f11 - f10));
                    dv += gd * ((1 - t.fx) * (f10 - f00) + t.fx * (f11 - f01));
                }
                gp[2 * p] += du * t.scale_x;
                gp[2 * p + 1] += dv * t.scale_y;
            }
        }
    });
}

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4 || out_h == 0 || out_w == 0) {
        throw DimensionError("upsample_bilinear: expected [B,h,w,C], got " + shape_str(s));
    }
    const std::size_t B = s[0], h = s[1], w = s[2], C = s[3];
    auto taps = std::make_shared<std::vector<BilinearTap>>(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t xx = 0; xx < out_w; ++xx) {
            const double u = (static_cast<double>(xx) + 0.5) / static_cast<double>(out_w);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(out_h);
            (*taps)[y * out_w + xx] = make_tap(u, v, h, w);
        }
    }
    const auto xv = x.data();
    const std::size_t in_plane = h * w * C;
    const std::size_t out_plane = out_h * out_w * C;
    std::vector<double> out(B * out_plane);
    for (std::size_t b = 0; b < B; ++b) {
        const double* src = xv.data() + b * in_plane;
        double* dst = out.data() + b * out_plane;
        for (std::size_t p = 0; p < taps->size(); ++p) {
            const BilinearTap& t = (*taps)[p];
            for (std::size_t c = 0; c < C; ++c) {
                dst[p * C + c] = t.w00 * src[t.c00 * C + c] + t.w01 * src[t.c01 * C + c] +
                                 t.w10 * src[t.c10 * C + c] + t.w11 * src[t.c11 * C + c];
            }
        }
    }
    add_flops(8 * out.size());
    return make_result({B, out_h, out_w, C}, std::move(out), {x}, [taps, B, C, in_plane, out_plane](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            const double* g = self.grad.data() + b * out_plane;
            double* dst = gp.data() + b * in_plane;
            for (std::size_t q = 0; q < taps->size(); ++q) {
                const BilinearTap& t = (*taps)[q];
                for (std::size_t c = 0; c < C; ++c) {
                    const double gc = g[q * C + c];
                    dst[t.c00 * C + c] += t.w00 * gc;
                    dst[t.c01 * C + c] += t.w01 * gc;
                    dst[t.c10 * C + c] += t.w10 * gc;
                    dst[t.c11 * C + c] += t.w11 * gc;
                }
            }
        }
    });
}

Tensor deformable_sample(const Tensor& value, std::span<const LevelShape> levels,
                         std::span<const std::size_t> level_starts, const Tensor& locations,
                         const Tensor& weights) {
    const Shape& vs = value.shape();
    const Shape& ls = locations.shape();
    const Shape& ws = weights.shape();
    const auto fail = [&](const std::string& why) {
        throw DimensionError("deformable_sample: " + why + " (value " + shape_str(vs) + ", locations " +
                             shape_str(ls) + ", weights " + shape_str(ws) + ")");
    };
    if (vs.size() != 3 || ls.size() != 6 || ws.size() != 5 || ls[5] != 2) fail("bad ranks");
    const std::size_t T = vs[0], Nv = vs[1], D = vs[2];
    const std::size_t Nq = ls[1], heads = ls[2], nlev = ls[3], npts = ls[4];
    if (ls[0] != T || Shape(ls.begin(), ls.end() - 1) != ws) fail("locations and weights disagree");
    if (levels.size() != nlev || level_starts.size() != nlev) fail("level count mismatch");
    if (D % heads != 0) fail("channels not divisible by heads");
    for (std::size_t l = 0; l < nlev; ++l) {
        if (level_starts[l] + levels[l].height * levels[l].width > Nv) fail("level exceeds value tokens");
    }
    const std::size_t dh = D / heads;
    const auto vv = value.data();
    const auto lv = locations.data();
    const auto wv = weights.data();

    std::vector<LevelShape> lev(levels.begin(), levels.end());
    std::vector<std::size_t> starts(level_starts.begin(), level_starts.end());
    const std::size_t nsamples = T * Nq * heads * nlev * npts;
    auto taps = std::make_shared<std::vector<BilinearTap>>(nsamples);
    std::vector<double> out(T * Nq * D, 0.0);
    std::size_t s = 0;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t q = 0; q < Nq; ++q) {
            double* dst_q = out.data() + (t * Nq + q) * D;
            for (std::size_t h = 0; h < heads; ++h) {
                double* dst = dst_q + h * dh;
                for (std::size_t l = 0; l < nlev; ++l) {
                    const double* base = vv.data() + (t * Nv + starts[l]) * D + h * dh;
                    for (std::size_t k = 0; k < npts; ++k, ++s) {
                        const BilinearTap tap = make_tap(lv[2 * s], lv[2 * s + 1], lev[l].height, lev[l].width);
                        (*taps)[s] = tap;
                        const double a = wv[s];
                        const double* f00 = base + tap.c00 * D;
                        const double* f01 = base + tap.c01 * D;
                        const double* f10 = base + tap.c10 * D;
                        const double* f11 = base + tap.c11 * D;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dst[c] += a * (tap.w00 * f00[c] + tap.w01 * f01[c] + tap.w10 * f10[c] + tap.w11 * f11[c]);
                        }
                    }
                }
            }
        }
    }
    add_flops(10 * nsamples * dh);

    return make_result(
        {T, Nq, D}, std::move(out), {value, locations, weights},
        [taps, lev, starts, T, Nv, D, Nq, heads, nlev, npts, dh](Node& self) {
            Node& pv = *self.parents[0];
            Node& pl = *self.parents[1];
            Node& pw = *self.parents[2];
            const auto& vv = *pv.data;
            const auto& wv = *pw.data;
            std::vector<double>* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
            std::vector<double>* gl = pl.requires_grad ? &pl.ensure_grad() : nullptr;
            std::vector<double>* gw = pw.requires_grad ? &pw.ensure_grad() : nullptr;
            std::size_t s = 0;
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t q = 0; q < Nq; ++q) {
                    const double* g_q = self.grad.data() + (t * Nq + q) * D;
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double* g = g_q + h * dh;
                        for (std::size_t l = 0; l < nlev; ++l) {
                            const std::size_t off = (t * Nv + starts[l]) * D + h * dh;
                            const double* base = vv.data() + off;
                            for (std::size_t k = 0; k < npts; ++k, ++s) {
                                const BilinearTap& tap = (*taps)[s];
                                const double a = wv[s];
                                const double* f00 = base + tap.c00 * D;
                                const double* f01 = base + tap.c01 * D;
                                const double* f10 = base + tap.c10 * D;
                                const double* f11 = base + tap.c11 * D;
                                double dot = 0.0, du = 0.0, dv = 0.0;
                                for (std::size_t c = 0; c < dh; ++c) {
                                    const double sample =
                                        tap.w00 * f00[c] + tap.w01 * f01[c] + tap.w10 * f10[c] + tap.w11 * f11[c];
                                    dot += g[c] * sample;
                                    du += g[c] * ((1 - tap.fy) * (f01[c] - f00[c]) + tap.fy * (f11[c] - f10[c]));
                                    dv += g[c] * ((1 - tap.fx) * (f10[c] - f00[c]) + tap.fx * (f11[c] - f01[c]));
                                }
                                if (gw) (*gw)[s] += dot;
                                if (gl) {
                                    (*gl)[2 * s] += a * du * tap.scale_x;
                                    (*gl)[2 * s + 1] += a * dv * tap.scale_y;
                                }
                                if (gv) {
                                    double* d = gv->data() + off;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                        const double ga = a * g[c];
                                        d[tap.c00 * D + c] += tap.w00 * ga;
                                        d[tap.c01 * D + c] += tap.w01 * ga;
                                        d[tap.c10 * D + c] += tap.w10 * ga;
                                        d[tap.c11 * D + c] += tap.w11 * ga;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            add_flops(20 * T * Nq * heads * nlev * npts * dh);
        });
}

}  // namespace avseg
