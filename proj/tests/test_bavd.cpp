#include <doctest.h>

#include <cmath>

#include "avseg/errors.hpp"
#include "avseg/gradcheck.hpp"
#include "avseg/model.hpp"

using namespace avseg;

namespace {

ModelConfig small_model(std::size_t layers = 2) {
    ModelConfig c;
    c.num_layers = layers;
    c.model_dim = 8;
    c.num_queries = 4;
    c.frames = 2;
    c.num_heads = 2;
    c.num_points = 2;
    c.audio_dim = 8;
    c.init_seed = 11;
    return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// Layer norm over the last axis written out by hand.
std::vector<double> naive_norm(const std::vector<double>& x, const LayerNorm& ln) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = (x[i] - mu) / std::sqrt(var + ln.eps) * ln.gain.data()[i] + ln.bias.data()[i];
    }
    return y;
}

std::vector<double> naive_linear(const std::vector<double>& x, const Linear& lin) {
    std::vector<double> y(lin.out_features());
    for (std::size_t o = 0; o < y.size(); ++o) {
        double s = lin.bias.defined() ? lin.bias.data()[o] : 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * lin.weight.at({i, o});
        y[o] = s;
    }
    return y;
}

std::vector<double> row(const Tensor& x, std::size_t t, std::size_t n) {
    std::vector<double> r(x.shape()[2]);
    for (std::size_t d = 0; d < r.size(); ++d) r[d] = x.at({t, n, d});
    return r;
}

void zero_severing(AvsModel& m) {
    for (auto& layer : m.decoder.agv) layer.agca.gate.data_mut()[0] = 0.0;
    for (auto& v : m.head.mlp_out.weight.data_mut()) v = 0.0;
    for (auto& v : m.head.mlp_out.bias.data_mut()) v = 0.0;
}

template <class Module>
void perturb(Module& m, Rng& rng, double scale) {
    m.visit("", [&](const std::string&, Tensor& t) {
        for (auto& v : t.data_mut()) v += rng.uniform(-scale, scale);
    });
}

}  // namespace

TEST_CASE("vga layer") {
    Rng rng(1);
    const ModelConfig mc = small_model();
    VgaLayer layer{CrossAttention(mc.attention(), rng), make_layer_norm(8)};
    perturb(layer, rng, 0.2);
    Tensor q = rng.uniform_tensor({2, 4, 8}, -1, 1);

    SUBCASE("single visual token reaches every query") {
        Tensor one = rng.uniform_tensor({2, 1, 8}, -1, 1);
        Tensor out = layer.forward(q, one);
        for (std::size_t t = 0; t < 2; ++t) {
            const auto msg = naive_linear(naive_linear(row(one, t, 0), layer.cross.v_proj), layer.cross.out_proj);
            for (std::size_t n = 0; n < 4; ++n) {
                auto x = row(q, t, n);
                for (std::size_t d = 0; d < 8; ++d) x[d] += msg[d];
                const auto ref = naive_norm(x, layer.norm);
                for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out.at({t, n, d}) - ref[d]) <= 1e-12);
            }
        }
    }
    SUBCASE("constant bridge makes attention weights irrelevant") {
        Tensor one = rng.uniform_tensor({2, 1, 8}, -1, 1);
        Tensor many = expand(one, {2, 7, 8});
        CHECK(max_abs_diff(layer.forward(q, many), layer.forward(q, one)) <= 1e-12);
    }
    SUBCASE("matches a dense reference") {
        Tensor kv = rng.uniform_tensor({2, 5, 8}, -1, 1);
        Tensor out = layer.forward(q, kv);
        const std::size_t dk = 4;
        for (std::size_t t = 0; t < 2; ++t) {
            for (std::size_t n = 0; n < 4; ++n) {
                const auto qp = naive_linear(row(q, t, n), layer.cross.q_proj);
                std::vector<double> attended(8, 0.0);
                for (std::size_t h = 0; h < 2; ++h) {
                    std::vector<double> s(5);
                    double z = 0;
                    for (std::size_t j = 0; j < 5; ++j) {
                        const auto kp = naive_linear(row(kv, t, j), layer.cross.k_proj);
                        double dot = 0;
                        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) dot += qp[c] * kp[c];
                        z += (s[j] = std::exp(dot / 2.0));
                    }
                    for (std::size_t j = 0; j < 5; ++j) {
                        const auto vp = naive_linear(row(kv, t, j), layer.cross.v_proj);
                        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) attended[c] += s[j] / z * vp[c];
                    }
                }
                const auto msg = naive_linear(attended, layer.cross.out_proj);
                auto x = row(q, t, n);
                for (std::size_t d = 0; d < 8; ++d) x[d] += msg[d];
                const auto ref = naive_norm(x, layer.norm);
                for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out.at({t, n, d}) - ref[d]) <= 1e-10);
            }
        }
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(layer.forward(q, Tensor::zeros({3, 5, 8})), DimensionError);
        CHECK_THROWS_AS(layer.forward(q, Tensor::zeros({2, 5, 6})), DimensionError);
    }
}

TEST_CASE("decoder keeps branch shapes across layers") {
    const ModelConfig mc = small_model(3);
    AvsModel m(mc);
    Rng rng(2);
    const auto geom = make_geometry(mc.level_shapes());
    Tensor fv = rng.uniform_tensor({2, mc.num_tokens(), 8}, -1, 1), fa = rng.uniform_tensor({2, 4, 8}, -1, 1);
    const DecoderOutput out = m.decoder.forward(fv, fa, geom);
    REQUIRE(out.layers.size() == 3);
    for (const auto& s : out.layers) {
        CHECK(s.f_agv.shape() == fv.shape());
        CHECK(s.f_vga.shape() == fa.shape());
    }
    CHECK_THROWS_AS(m.decoder.forward(fv, Tensor::zeros({3, 4, 8}), geom), DimensionError);
    CHECK_THROWS_AS(m.decoder.forward(slice(fv, 1, 0, 80), fa, geom), DimensionError);
}

TEST_CASE("severed bridges make predictions independent of audio") {
    for (auto bridge : {BridgeMode::bidirectional, BridgeMode::audio_to_vis, BridgeMode::vis_to_audio}) {
        ModelConfig mc = small_model();
        mc.bridge = bridge;
        AvsModel m(mc);
        Rng rng(3);
        perturb(m.decoder, rng, 0.1);
        zero_severing(m);
        Tensor frames = rng.uniform_tensor({2, 3, 64, 64}, 0, 1);
        Tensor a1 = rng.uniform_tensor({2, 8}, -1, 1), a2 = rng.uniform_tensor({2, 8}, -3, 3);
        const auto o1 = m.forward(frames, a1), o2 = m.forward(frames, a2);
        CHECK(o1.f_vga.to_vector() != o2.f_vga.to_vector());
        CHECK(o1.f_agv.to_vector() == o2.f_agv.to_vector());
        CHECK(o1.mask.logits.to_vector() == o2.mask.logits.to_vector());
    }
}

TEST_CASE("open bridges let audio change the prediction") {
    AvsModel m(small_model());
    Rng rng(4);
    for (auto& layer : m.decoder.agv) layer.agca.gate.data_mut()[0] = 0.5;
    Tensor frames = rng.uniform_tensor({2, 3, 64, 64}, 0, 1);
    const auto o1 = m.forward(frames, rng.uniform_tensor({2, 8}, -1, 1));
    const auto o2 = m.forward(frames, rng.uniform_tensor({2, 8}, -1, 1));
    CHECK(max_abs_diff(o1.mask.logits, o2.mask.logits) > 1e-9);
}

TEST_CASE("fusion head residual identity") {
    for (auto mode : {FusionMode::similarity, FusionMode::elementwise}) {
        ModelConfig mc = small_model();
        mc.fusion = mode;
        AvsModel m(mc);
        Rng rng(5);
        Tensor frames = rng.uniform_tensor({2, 3, 64, 64}, 0, 1), audio = rng.uniform_tensor({2, 8}, -1, 1);
        const auto out = m.forward(frames, audio);
        CHECK(out.fused.to_vector() == out.f_agv.to_vector());
        CHECK(out.mask.logits.shape() == Shape{2, 1, 64, 64});

        // Reference: classifier on the finest 8x8 tokens, then bilinear upsampling
        // by 8 written out with explicit source coordinates.
        const Linear& cls = m.head.classifier;
        for (std::size_t t = 0; t < 2; ++t) {
            std::vector<double> grid(64);
            for (std::size_t i = 0; i < 64; ++i) grid[i] = naive_linear(row(out.f_agv, t, i), cls)[0];
            for (std::size_t y = 0; y < 64; y += 7) {
                for (std::size_t x = 0; x < 64; x += 5) {
                    const double sy = std::clamp((y + 0.5) / 8.0 - 0.5, 0.0, 7.0);
                    const double sx = std::clamp((x + 0.5) / 8.0 - 0.5, 0.0, 7.0);
                    const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
                    const std::size_t y1 = std::min<std::size_t>(y0 + 1, 7), x1 = std::min<std::size_t>(x0 + 1, 7);
                    const double fy = sy - y0, fx = sx - x0;
                    const double ref = (1 - fy) * ((1 - fx) * grid[y0 * 8 + x0] + fx * grid[y0 * 8 + x1]) +
                                       fy * ((1 - fx) * grid[y1 * 8 + x0] + fx * grid[y1 * 8 + x1]);
                    CHECK(std::abs(out.mask.logits.at({t, 0, y, x}) - ref) <= 1e-12);
                }
            }
        }
        // A nonzero MLP output breaks the identity.
        perturb(m.head, rng, 0.3);
        const auto changed = m.forward(frames, audio);
        CHECK(max_abs_diff(changed.fused, changed.f_agv) > 1e-6);
    }
}

TEST_CASE("forward cost grows linearly in depth") {
    std::vector<std::uint64_t> flops;
    Rng rng(6);
    Tensor frames = rng.uniform_tensor({2, 3, 64, 64}, 0, 1), audio = rng.uniform_tensor({2, 8}, -1, 1);
    for (std::size_t n : {1, 2, 3, 4}) {
        AvsModel m(small_model(n));
        NoGradGuard g;
        FlopCounter fc;
        m.forward(frames, audio);
        flops.push_back(fc.count());
    }
    const auto step = flops[1] - flops[0];
    CHECK(step > 0);
    CHECK(flops[2] - flops[1] == step);
    CHECK(flops[3] - flops[2] == step);
}

TEST_CASE("forward is deterministic per seed") {
    Rng rng(7);
    Tensor frames = rng.uniform_tensor({2, 3, 64, 64}, 0, 1), audio = rng.uniform_tensor({2, 8}, -1, 1);
    AvsModel a(small_model()), b(small_model());
    CHECK(a.forward(frames, audio).mask.logits.to_vector() == b.forward(frames, audio).mask.logits.to_vector());
    ModelConfig other = small_model();
    other.init_seed = 12;
    AvsModel c(other);
    CHECK(a.forward(frames, audio).mask.logits.to_vector() != c.forward(frames, audio).mask.logits.to_vector());
}

TEST_CASE("depth sweep and full-scale shapes are valid configurations") {
    for (std::size_t n : {2, 4, 6}) {
        ModelConfig c;
        c.num_layers = n;
        CHECK_NOTHROW(c.validate());
    }
    ModelConfig full;
    full.model_dim = 256;
    full.num_queries = 300;
    full.num_heads = 8;
    full.frames = 5;
    const auto s4 = check_decoder_shapes(full, {{64, 64}, {32, 32}, {16, 16}});
    CHECK(s4.agv == Shape{5, 5376, 256});
    CHECK(s4.vga == Shape{5, 300, 256});
    full.frames = 10;
    const auto avss = check_decoder_shapes(full, {{28, 28}, {14, 14}, {7, 7}});
    CHECK(avss.agv == Shape{10, 1029, 256});

    ModelConfig bad;
    bad.num_layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ModelConfig{};
    bad.num_queries = 0;
    CHECK_THROWS_AS(check_decoder_shapes(bad, {{2, 2}, {1, 1}, {1, 1}}), ConfigError);
    bad = ModelConfig{};
    bad.height = 48;
    CHECK_THROWS_AS(AvsModel{bad}, ConfigError);
    CHECK(parse_bridge_mode("vis_to_audio") == BridgeMode::vis_to_audio);
    CHECK_THROWS_AS(parse_bridge_mode("sideways"), ConfigError);
}

TEST_CASE("full model passes a finite-difference check") {
    ModelConfig mc = small_model(1);
    mc.frames = 1;
    mc.height = mc.width = 32;
    AvsModel m(mc);
    Rng rng(8);
    perturb(m.head, rng, 0.2);
    for (auto& layer : m.decoder.agv) layer.agca.gate.data_mut()[0] = 0.4;
    Tensor frames = rng.uniform_tensor({1, 3, 32, 32}, 0, 1), audio = rng.uniform_tensor({1, 8}, -1, 1, true);
    Tensor r = rng.normal_tensor({1, 1, 32, 32}, 0, 1);
    NamedTensors inputs = m.parameters();
    inputs.emplace_back("audio", audio);
    const auto res = check_gradients("model", [&] { return sum(mul(m.forward(frames, audio).mask.logits, r)); }, inputs);
    CHECK(res.max_error < 1e-4);
}
