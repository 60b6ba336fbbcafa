#include "avseg/gradcheck.hpp"

#include <chrono>
#include <cmath>

#include "avseg/attention.hpp"
#include "avseg/backbones.hpp"
#include "avseg/bavd.hpp"
#include "avseg/losses.hpp"
#include "avseg/ops.hpp"
#include "avseg/rng.hpp"

namespace avseg {

TensorCheck compare_gradients(const std::string& name, const std::vector<double>& analytic,
                              const std::vector<double>& numeric, const GradCheckOptions& opts) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    diff = std::sqrt(diff);
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    TensorCheck c;
    c.name = name;
    c.entries = analytic.size();
    c.relative = scale >= opts.tiny;
    c.error = c.relative ? diff / scale : diff;
    return c;
}

GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                const NamedTensors& inputs, const GradCheckOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    for (auto [n, t] : inputs) t.zero_grad();
    loss().backward();
    GradCheckResult r;
    r.name = name;
    for (auto [n, t] : inputs) {
        const std::vector<double> analytic = t.grad_vector();
        std::vector<double> numeric(t.numel());
        auto x = t.data_mut();
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + opts.step;
            const double up = loss().item();
            x[i] = orig - opts.step;
            const double down = loss().item();
            x[i] = orig;
            numeric[i] = (up - down) / (2 * opts.step);
        }
        r.tensors.push_back(compare_gradients(n, analytic, numeric, opts));
        r.max_error = std::max(r.max_error, r.tensors.back().error);
    }
    r.passed = r.max_error < opts.tolerance;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

ModelConfig gradcheck_model_config() {
    ModelConfig c;
    c.frames = 2;
    c.height = 32;
    c.width = 32;
    c.model_dim = 8;
    c.num_queries = 4;
    c.num_layers = 2;
    c.num_heads = 2;
    c.num_points = 4;
    c.audio_dim = 8;
    c.init_seed = 3;
    return c;
}

namespace {

// Moves every parameter off its initial value (zero-initialized gates and
// layers included) so that no gradient path is trivially zero.
template <class Module>
NamedTensors randomized(Module& m, Rng& rng, double scale = 0.2) {
    NamedTensors out;
    m.visit("", [&](const std::string& name, Tensor& t) {
        for (auto& v : t.data_mut()) v += rng.uniform(-scale, scale);
        out.emplace_back(name, t);
    });
    return out;
}

Tensor leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    return rng.uniform_tensor(std::move(shape), lo, hi, true);
}

// Random linear functional of the output, so that errors cannot cancel.
Tensor probe(const Tensor& out, Rng& rng) { return rng.normal_tensor(out.shape(), 0.0, 1.0); }

struct Suite {
    GradCheckOptions opts;
    std::function<void(const GradCheckResult&)> progress;
    std::vector<GradCheckResult> results;

    void run(const std::string& name, const std::function<Tensor()>& loss, const NamedTensors& inputs) {
        results.push_back(check_gradients(name, loss, inputs, opts));
        if (progress) progress(results.back());
    }
    // loss = sum(f(...) * R) for a fixed random R.
    void run_map(const std::string& name, const std::function<Tensor()>& f, const NamedTensors& inputs, Rng& rng) {
        const Tensor r = probe(f(), rng);
        run(name, [f, r] { return sum(mul(f(), r)); }, inputs);
    }
};

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opts,
                                                 const std::function<void(const GradCheckResult&)>& progress) {
    Suite s{opts, progress, {}};
    Rng rng(20240611);

    {
        Tensor a = leaf(rng, {2, 3, 4}), b = leaf(rng, {3, 1}), c = leaf(rng, {4}, 0.5, 1.5);
        s.run_map("add_broadcast", [=] { return add(a, b); }, {{"a", a}, {"b", b}}, rng);
        s.run_map("sub_broadcast", [=] { return sub(a, c); }, {{"a", a}, {"c", c}}, rng);
        s.run_map("mul_broadcast", [=] { return mul(a, b); }, {{"a", a}, {"b", b}}, rng);
        s.run_map("div_broadcast", [=] { return div(a, c); }, {{"a", a}, {"c", c}}, rng);
        s.run_map("scale_add_scalar_neg", [=] { return neg(add_scalar(scale(a, 1.7), 0.3)); }, {{"a", a}}, rng);
    }
    {
        Tensor a = leaf(rng, {2, 3, 4}), b = leaf(rng, {4, 5}), c = leaf(rng, {2, 4, 2});
        s.run_map("matmul_shared_rhs", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}}, rng);
        s.run_map("matmul_batched", [=] { return matmul(a, c); }, {{"a", a}, {"c", c}}, rng);
    }
    {
        Tensor x = leaf(rng, {3, 4, 5}, -3, 3);
        s.run_map("softmax_last", [=] { return softmax(x, -1); }, {{"x", x}}, rng);
        s.run_map("softmax_middle", [=] { return softmax(x, 1); }, {{"x", x}}, rng);
        Tensor g = leaf(rng, {5}, 0.5, 1.5), b = leaf(rng, {5});
        s.run_map("layer_norm", [=] { return layer_norm(x, g, b); }, {{"x", x}, {"gain", g}, {"bias", b}}, rng);
    }
    {
        Tensor x = leaf(rng, {4, 6}, -3, 3);
        // Keep relu and clamp inputs away from their kinks.
        for (auto& v : x.data_mut()) {
            if (std::abs(v) < 0.05) v += 0.1;
        }
        Tensor p = leaf(rng, {4, 6}, 0.2, 2.0);
        s.run_map("sigmoid", [=] { return sigmoid(x); }, {{"x", x}}, rng);
        s.run_map("relu", [=] { return relu(x); }, {{"x", x}}, rng);
        s.run_map("gelu", [=] { return gelu(x); }, {{"x", x}}, rng);
        s.run_map("exp", [=] { return exp(x); }, {{"x", x}}, rng);
        s.run_map("square", [=] { return square(x); }, {{"x", x}}, rng);
        s.run_map("log", [=] { return log(p); }, {{"p", p}}, rng);
        s.run_map("sqrt", [=] { return sqrt(p); }, {{"p", p}}, rng);
        s.run_map("clamp_min", [=] { return clamp_min(x, 0.0); }, {{"x", x}}, rng);
    }
    {
        Tensor x = leaf(rng, {2, 3, 4}), y = leaf(rng, {2, 5, 4});
        s.run("sum_all", [=] { return sum(square(x)); }, {{"x", x}});
        s.run_map("sum_axis", [=] { return sum(x, 1, false); }, {{"x", x}}, rng);
        s.run_map("mean_axis_keepdim", [=] { return mean(x, -1, true); }, {{"x", x}}, rng);
        s.run_map("reshape", [=] { return reshape(x, {6, 4}); }, {{"x", x}}, rng);
        s.run_map("permute", [=] { return permute(x, {2, 0, 1}); }, {{"x", x}}, rng);
        s.run_map("transpose", [=] { return transpose(x, 0, 2); }, {{"x", x}}, rng);
        s.run_map("concat", [=] { return concat({x, y}, 1); }, {{"x", x}, {"y", y}}, rng);
        s.run_map("slice", [=] { return slice(y, 1, 1, 3); }, {{"y", y}}, rng);
        Tensor z = leaf(rng, {2, 1, 4});
        s.run_map("expand", [=] { return expand(z, {3, 2, 5, 4}); }, {{"z", z}}, rng);
        s.run("shared_subexpression", [=] {
            Tensor u = mul(x, x);
            return sum(add(mul(u, x), u));
        }, {{"x", x}});
    }
    {
        Tensor fm = leaf(rng, {4, 5, 3});
        // Interior points plus some outside the cell-center hull (clamped).
        Tensor pts = leaf(rng, {7, 2}, -0.05, 1.05);
        s.run_map("bilinear_sample", [=] { return bilinear_sample(fm, pts); }, {{"featmap", fm}, {"points", pts}}, rng);
        Tensor grid = leaf(rng, {2, 3, 4, 2});
        s.run_map("upsample_bilinear", [=] { return upsample_bilinear(grid, 7, 9); }, {{"grid", grid}}, rng);
    }
    {
        const std::vector<LevelShape> levels = {{4, 4}, {2, 3}};
        const std::vector<std::size_t> starts = {0, 16};
        Tensor value = leaf(rng, {2, 22, 4});
        Tensor loc = leaf(rng, {2, 3, 2, 2, 2, 2}, -0.1, 1.1);
        Tensor w = leaf(rng, {2, 3, 2, 2, 2}, 0.0, 1.0);
        s.run_map("deformable_sample",
                  [=] { return deformable_sample(value, levels, starts, loc, w); },
                  {{"value", value}, {"locations", loc}, {"weights", w}}, rng);
    }

    const ModelConfig mc = gradcheck_model_config();
    const AttentionConfig ac = mc.attention();
    const std::size_t T = mc.frames, D = mc.model_dim, Na = mc.num_queries;
    const DeformableGeometry geom = make_geometry(mc.level_shapes());
    const std::size_t L = geom.num_tokens();
    {
        Rng init(1);
        auto cross = std::make_shared<CrossAttention>(ac, init);
        Tensor q = leaf(rng, {T, Na, D}), kv = leaf(rng, {T, L, D});
        auto params = randomized(*cross, rng);
        params.emplace_back("query", q);
        params.emplace_back("key_value", kv);
        s.run_map("cross_attention", [=] { return cross->forward(q, kv, kv); }, params, rng);

        auto deform = std::make_shared<DeformableSelfAttention>(ac, init);
        Tensor tok = leaf(rng, {T, L, D});
        params = randomized(*deform, rng, 0.05);
        params.emplace_back("tokens", tok);
        s.run_map("deformable_self_attention", [=] { return deform->forward(tok, geom); }, params, rng);

        auto agca = std::make_shared<AudioGuidedCrossAttention>(ac, init);
        Tensor fv = leaf(rng, {T, L, D}), br = leaf(rng, {T, Na, D});
        params = randomized(*agca, rng);
        params.emplace_back("f_v", fv);
        params.emplace_back("bridge_in", br);
        s.run_map("audio_guided_cross_attention", [=] { return agca->forward(fv, br); }, params, rng);

        auto dec = std::make_shared<BidirectionalDecoder>(mc, init);
        Tensor fvis = leaf(rng, {T, L, D}), fa = leaf(rng, {T, Na, D});
        params = randomized(*dec, rng, 0.05);
        s.run_map("vga_layer", [=] { return dec->vga[0].forward(fa, fvis); }, params, rng);
        params.emplace_back("f_vis", fvis);
        params.emplace_back("f_a0", fa);
        s.run_map("agv_layer", [=] { return dec->agv[0].forward(fvis, fa, geom); }, params, rng);
        s.run_map("decoder", [=] {
            auto out = dec->forward(fvis, fa, geom);
            return concat({out.f_agv, out.f_vga}, 1);
        }, params, rng);

        for (auto mode : {FusionMode::similarity, FusionMode::elementwise}) {
            ModelConfig hc = mc;
            hc.fusion = mode;
            auto head = std::make_shared<FusionHead>(hc, init);
            params = randomized(*head, rng);
            params.emplace_back("f_agv", fvis);
            params.emplace_back("f_vga", fa);
            s.run_map("fusion_head_" + to_string(mode),
                      [=] { return head->forward(fvis, fa, geom, mc.height, mc.width).logits; }, params, rng);
        }

        auto vis = std::make_shared<VisualBackbone>(mc, init);
        Tensor frames = leaf(rng, {T, 3, mc.height, mc.width}, 0.0, 1.0);
        params = randomized(*vis, rng);
        s.run_map("visual_backbone", [=] { return vis->forward(frames).tokens; }, params, rng);

        for (auto mode : {QueryIntegration::sum, QueryIntegration::concat}) {
            ModelConfig qc = mc;
            qc.query_integration = mode;
            auto aud = std::make_shared<AudioBackbone>(qc, init);
            Tensor audio = leaf(rng, {T, mc.audio_dim});
            params = randomized(*aud, rng);
            params.emplace_back("audio", audio);
            s.run_map("audio_backbone_" + to_string(mode), [=] { return aud->forward(audio).queries; }, params, rng);
        }
    }
    {
        Tensor logits = leaf(rng, {T, 1, 6, 6}, -2, 2);
        Tensor target = Tensor({T, 1, 6, 6}, std::vector<double>(T * 36));
        for (auto& v : target.data_mut()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        s.run("dice_loss", [=] { return dice_loss(sigmoid(logits), target); }, {{"logits", logits}});
        s.run("focal_loss", [=] { return focal_loss(logits, target); }, {{"logits", logits}});
        Tensor fa = leaf(rng, {T, Na, D}), fagv = leaf(rng, {T, L, D});
        for (auto axis : {SoftmaxAxis::channel, SoftmaxAxis::spatial}) {
            s.run("avfs_kl_" + to_string(axis), [=] {
                return avfs_loss(avfs_transform(fa, fagv, axis), avfs_transform(fagv, fagv, axis));
            }, {{"f_a", fa}, {"f_agv", fagv}});
        }
        for (bool framewise : {false, true}) {
            s.run(framewise ? "avfs_framewise_l2" : "avfs_l2", [=] {
                return avfs_l2_loss(avfs_transform(fa, fagv, SoftmaxAxis::channel),
                                    avfs_transform(fagv, fagv, SoftmaxAxis::channel), framewise);
            }, {{"f_a", fa}, {"f_agv", fagv}});
        }
    }
    {
        auto model = std::make_shared<AvsModel>(mc);
        NamedTensors params;
        for (auto& [name, t] : model->parameters()) {
            for (auto& v : t.data_mut()) v += rng.uniform(-0.05, 0.05);
            params.emplace_back(name, t);
        }
        Tensor frames = rng.uniform_tensor({T, 3, mc.height, mc.width}, 0.0, 1.0);
        Tensor audio = rng.normal_tensor({T, mc.audio_dim}, 0.0, 1.0);
        Tensor target({T, 1, mc.height, mc.width}, std::vector<double>(T * mc.height * mc.width, 0.0));
        auto tg = target.data_mut();
        for (std::size_t i = 0; i < tg.size(); ++i) tg[i] = (i / mc.width) % mc.height < 14 ? 1.0 : 0.0;
        LossConfig lc;
        s.run("full_model_total_loss", [=] {
            auto out = model->forward(frames, audio);
            return total_loss(out.mask.logits, target, out.f_a0, out.f_agv, lc).total_tensor;
        }, params);
    }
    return s.results;
}

}  // namespace avseg
