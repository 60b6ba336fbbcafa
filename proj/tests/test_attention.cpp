#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "avseg/attention.hpp"
#include "avseg/errors.hpp"
#include "avseg/gradcheck.hpp"
#include "oracles.hpp"

using namespace avseg;

namespace {

using oracle::apply_linear;
using oracle::frame_rows;
using oracle::Mat;

AttentionConfig small_config(std::size_t D, std::size_t heads, std::size_t points = 4, std::size_t levels = 3) {
    AttentionConfig c;
    c.model_dim = D;
    c.num_heads = heads;
    c.num_points = points;
    c.num_levels = levels;
    return c;
}

template <class Module>
void perturb(Module& m, Rng& rng, double scale) {
    m.visit("", [&](const std::string&, Tensor& t) {
        for (auto& v : t.data_mut()) v += rng.uniform(-scale, scale);
    });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("attention config validation") {
    CHECK_THROWS_AS(small_config(10, 4).validate(), ConfigError);
    AttentionConfig c = small_config(8, 2);
    c.num_points = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(CrossAttention(small_config(6, 4), rng), ConfigError);
}

TEST_CASE("cross attention matches a dense reference") {
    Rng rng(2);
    for (std::size_t heads : {1, 2}) {
        CrossAttention ca(small_config(4, heads), rng);
        perturb(ca, rng, 0.3);
        Tensor q = rng.uniform_tensor({1, 2, 4}, -1, 1), kv = rng.uniform_tensor({1, 3, 4}, -1, 1);
        Tensor out = ca.forward(q, kv, kv);
        const Mat Q = apply_linear(frame_rows(q, 0), ca.q_proj);
        const Mat K = apply_linear(frame_rows(kv, 0), ca.k_proj);
        const Mat V = apply_linear(frame_rows(kv, 0), ca.v_proj);
        const Mat ref = apply_linear(oracle::attend(Q, K, V, heads), ca.out_proj);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(out.at({0, i, d}) - ref[i][d]) <= 1e-10);
        }
        Tensor w = ca.attention_weights(q, kv);
        CHECK(w.shape() == Shape{1, heads, 2, 3});
        const Tensor sums = sum(w, -1);
        for (double s : sums.data()) CHECK(std::abs(s - 1) <= 1e-6);
    }
}

TEST_CASE("cross attention with one key ignores the query") {
    Rng rng(3);
    CrossAttention ca(small_config(8, 2), rng);
    Tensor q = rng.uniform_tensor({2, 5, 8}, -1, 1), kv = rng.uniform_tensor({2, 1, 8}, -1, 1);
    Tensor out = ca.forward(q, kv, kv);
    Tensor expect = ca.out_proj(ca.v_proj(kv));
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t i = 0; i < 5; ++i) {
            for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out.at({t, i, d}) - expect.at({t, 0, d})) <= 1e-12);
        }
    }
    // Duplicating the key splits the softmax mass without changing the output.
    Tensor dup = concat({kv, kv, kv}, 1);
    CHECK(max_abs_diff(ca.forward(q, dup, dup), out) <= 1e-12);
}

TEST_CASE("deformable identity sampling") {
    Rng rng(4);
    AttentionConfig c = small_config(4, 1, 1, 1);
    DeformableSelfAttention blk(c, rng);
    for (auto& v : blk.sampling_offsets.weight.data_mut()) v = 0;
    for (auto& v : blk.sampling_offsets.bias.data_mut()) v = 0;
    const DeformableGeometry g = make_geometry({{3, 5}});
    Tensor tokens = rng.uniform_tensor({2, 15, 4}, -1, 1);
    CHECK(max_abs_diff(blk.aggregate(tokens, g), blk.value_proj(tokens)) <= 1e-12);
}

TEST_CASE("deformable symmetric offsets on a linear ramp return the center value") {
    Rng rng(5);
    AttentionConfig c = small_config(2, 1, 2, 1);
    DeformableSelfAttention blk(c, rng);
    // Identity value projection, zero query-dependent offsets, +/- delta in x.
    blk.value_proj = make_zero_linear(2, 2);
    blk.value_proj.weight = Tensor({2, 2}, {1, 0, 0, 1});
    for (auto& v : blk.sampling_offsets.weight.data_mut()) v = 0;
    const double delta = 0.35;
    blk.sampling_offsets.bias = Tensor({4}, {delta, 0.1, -delta, -0.1});
    const std::size_t h = 4, w = 6;
    const DeformableGeometry g = make_geometry({{h, w}});
    std::vector<double> ramp;
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            ramp.push_back(0.7 * static_cast<double>(j) - 0.2 * static_cast<double>(i) + 1.0);
            ramp.push_back(-1.3 * static_cast<double>(j) + 0.5 * static_cast<double>(i));
        }
    }
    Tensor tokens({1, h * w, 2}, ramp);
    Tensor agg = blk.aggregate(tokens, g);
    for (std::size_t i = 1; i + 1 < h; ++i) {
        for (std::size_t j = 1; j + 1 < w; ++j) {
            const std::size_t q = i * w + j;
            for (std::size_t d = 0; d < 2; ++d) CHECK(std::abs(agg.at({0, q, d}) - tokens.at({0, q, d})) <= 1e-12);
        }
    }
}

TEST_CASE("deformable attention matches a naive gather on random instances") {
    Rng rng(6);
    double worst = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t heads = 1 + rng.below(3);
        const std::size_t D = heads * (1 + rng.below(3));
        const std::size_t levels = 1 + rng.below(3), points = 1 + rng.below(4);
        std::vector<LevelShape> shapes;
        for (std::size_t l = 0; l < levels; ++l) shapes.push_back({1 + rng.below(5), 1 + rng.below(5)});
        const DeformableGeometry g = make_geometry(shapes);
        DeformableSelfAttention blk(small_config(D, heads, points, levels), rng);
        perturb(blk, rng, 0.5);
        for (auto& v : blk.sampling_offsets.weight.data_mut()) v *= 4;
        Tensor tokens = rng.uniform_tensor({1 + rng.below(2), g.num_tokens(), D}, -1, 1);
        const Tensor fast = blk.aggregate(tokens, g);
        const Tensor slow = oracle::deformable_aggregate(blk, tokens, g);
        worst = std::max(worst, max_abs_diff(fast, slow));
        Tensor w = blk.sampling_weights(tokens);
        const auto& ws = w.shape();
        Tensor sums = sum(reshape(w, {ws[0], ws[1], ws[2], ws[3] * ws[4]}), -1);
        for (double s : sums.data()) CHECK(std::abs(s - 1) <= 1e-6);
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("deformable attention rejects inconsistent geometry") {
    Rng rng(7);
    DeformableSelfAttention blk(small_config(4, 2, 2, 2), rng);
    const DeformableGeometry g = make_geometry({{2, 2}, {1, 1}});
    CHECK_THROWS_AS(blk.forward(Tensor::zeros({1, 6, 4}), g), DimensionError);
    const DeformableGeometry one = make_geometry({{2, 2}});
    CHECK_THROWS_AS(blk.forward(Tensor::zeros({1, 4, 4}), one), DimensionError);
}

TEST_CASE("audio-guided attention") {
    Rng rng(8);
    AudioGuidedCrossAttention agca(small_config(8, 2), rng);
    Tensor fv = rng.uniform_tensor({2, 7, 8}, -1, 1), fa = rng.uniform_tensor({2, 3, 8}, -1, 1);

    SUBCASE("zero gate is the identity") {
        CHECK(agca.gate.item() == 0.0);
        CHECK(agca.forward(fv, fa).to_vector() == fv.to_vector());
    }
    SUBCASE("single audio token gives the same term at every position") {
        agca.gate.data_mut()[0] = 0.8;
        Tensor one = slice(fa, 1, 0, 1);
        Tensor term = sub(agca.forward(fv, one), fv);
        Tensor expect = scale(agca.v_proj(one), 0.8);
        for (std::size_t t = 0; t < 2; ++t) {
            for (std::size_t l = 0; l < 7; ++l) {
                for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(term.at({t, l, d}) - expect.at({t, 0, d})) <= 1e-12);
            }
        }
    }
    SUBCASE("matches a dense reference") {
        perturb(agca, rng, 0.3);
        const double w = agca.gate.item();
        Tensor out = agca.forward(fv, fa);
        for (std::size_t t = 0; t < 2; ++t) {
            const Mat Q = apply_linear(frame_rows(fv, t), agca.q_proj);
            const Mat K = apply_linear(frame_rows(fa, t), agca.k_proj);
            const Mat V = apply_linear(frame_rows(fa, t), agca.v_proj);
            const Mat a = oracle::attend(Q, K, V, 2);
            for (std::size_t l = 0; l < 7; ++l) {
                for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out.at({t, l, d}) - (fv.at({t, l, d}) + w * a[l][d])) <= 1e-10);
            }
        }
    }
    SUBCASE("optional output projection") {
        AttentionConfig c = small_config(8, 2);
        c.agca_output_projection = true;
        AudioGuidedCrossAttention proj(c, rng);
        std::size_t n = 0;
        proj.visit("", [&](const std::string& name, Tensor&) { n += name.rfind("out_proj", 0) == 0; });
        CHECK(n == 2);
        CHECK(proj.attend(fv, fa).shape() == fv.shape());
    }
}

TEST_CASE("attention blocks pass finite-difference checks") {
    Rng rng(9);
    const AttentionConfig c = small_config(4, 2, 2, 2);
    const DeformableGeometry g = make_geometry({{2, 3}, {1, 2}});
    DeformableSelfAttention blk(c, rng);
    AudioGuidedCrossAttention agca(c, rng);
    perturb(blk, rng, 0.05);
    perturb(agca, rng, 0.2);
    Tensor tokens = rng.uniform_tensor({2, 8, 4}, -1, 1, true);
    Tensor audio = rng.uniform_tensor({2, 3, 4}, -1, 1, true);
    Tensor r = rng.normal_tensor({2, 8, 4}, 0, 1);
    NamedTensors inputs;
    blk.visit("deform", [&](const std::string& n, Tensor& t) { inputs.emplace_back(n, t); });
    agca.visit("agca", [&](const std::string& n, Tensor& t) { inputs.emplace_back(n, t); });
    inputs.emplace_back("tokens", tokens);
    inputs.emplace_back("audio", audio);
    auto res = check_gradients("deform+agca", [&] { return sum(mul(agca.forward(blk.forward(tokens, g), audio), r)); },
                               inputs);
    CHECK(res.max_error < 1e-4);
}
