#include "avseg/attention.hpp"

#include <cmath>
#include <numbers>

#include "avseg/errors.hpp"

namespace avseg {

void AttentionConfig::validate() const {
    if (model_dim == 0 || num_heads == 0) throw ConfigError("attention: model_dim and num_heads must be positive");
    if (model_dim % num_heads != 0) {
        throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " not divisible by " +
                          std::to_string(num_heads) + " heads");
    }
    if (num_points == 0 || num_levels == 0) throw ConfigError("attention: num_points and num_levels must be >= 1");
}

std::size_t DeformableGeometry::num_tokens() const {
    std::size_t n = 0;
    for (const auto& l : level_shapes) n += l.height * l.width;
    return n;
}

void DeformableGeometry::validate(std::size_t tokens) const {
    if (level_shapes.empty() || level_starts.size() != level_shapes.size()) {
        throw DimensionError("geometry: level table is empty or inconsistent");
    }
    std::size_t start = 0;
    for (std::size_t l = 0; l < level_shapes.size(); ++l) {
        if (level_starts[l] != start) throw DimensionError("geometry: level starts are not contiguous");
        start += level_shapes[l].height * level_shapes[l].width;
    }
    if (start != tokens) {
        throw DimensionError("geometry: levels cover " + std::to_string(start) + " tokens, sequence has " +
                             std::to_string(tokens));
    }
    if (reference_points.defined() && reference_points.shape() != Shape{tokens, 2}) {
        throw DimensionError("geometry: reference points " + shape_str(reference_points.shape()) +
                             " do not match " + std::to_string(tokens) + " tokens");
    }
}

DeformableGeometry make_geometry(std::vector<LevelShape> levels) {
    DeformableGeometry g;
    std::vector<double> refs;
    std::size_t start = 0;
    for (const auto& l : levels) {
        if (l.height == 0 || l.width == 0) throw DimensionError("geometry: empty level");
        g.level_starts.push_back(start);
        start += l.height * l.width;
        for (std::size_t i = 0; i < l.height; ++i) {
            for (std::size_t j = 0; j < l.width; ++j) {
                refs.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(l.width));
                refs.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(l.height));
            }
        }
    }
    g.level_shapes = std::move(levels);
    g.reference_points = Tensor({start, 2}, std::move(refs));
    return g;
}

namespace {

void check_tokens(const Tensor& x, std::size_t dim, const char* what) {
    if (x.dim() != 3 || x.shape()[2] != dim) {
        throw DimensionError(std::string(what) + ": expected [T,N," + std::to_string(dim) + "], got " +
                             shape_str(x.shape()));
    }
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    const auto& s = x.shape();
    return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

}  // namespace

Tensor multi_head_attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Tensor* weights) {
    const auto& qs = q.shape();
    const auto& ks = k.shape();
    if (qs.size() != 3 || ks.size() != 3 || v.shape() != ks || qs[0] != ks[0] || qs[2] != ks[2] ||
        qs[2] % heads != 0) {
        throw DimensionError("attention: query " + shape_str(qs) + ", key " + shape_str(ks) + ", value " +
                             shape_str(v.shape()) + " are inconsistent");
    }
    const std::size_t dk = qs[2] / heads;
    Tensor qh = split_heads(q, heads);                                    // T,H,Nq,dk
    Tensor kt = permute(reshape(k, {ks[0], ks[1], heads, dk}), {0, 2, 3, 1});  // T,H,dk,Nk
    Tensor vh = split_heads(v, heads);                                    // T,H,Nk,dk
    Tensor attn = softmax(scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dk))), -1);
    if (weights) *weights = attn;
    Tensor out = permute(matmul(attn, vh), {0, 2, 1, 3});  // T,Nq,H,dk
    return reshape(out, {qs[0], qs[1], qs[2]});
}

CrossAttention::CrossAttention(const AttentionConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const auto D = cfg.model_dim;
    q_proj = make_linear(D, D, rng);
    k_proj = make_linear(D, D, rng);
    v_proj = make_linear(D, D, rng);
    out_proj = make_linear(D, D, rng);
}

Tensor CrossAttention::forward(const Tensor& query, const Tensor& key, const Tensor& value) const {
    check_tokens(query, cfg.model_dim, "cross attention query");
    check_tokens(key, cfg.model_dim, "cross attention key");
    check_tokens(value, cfg.model_dim, "cross attention value");
    return out_proj(multi_head_attend(q_proj(query), k_proj(key), v_proj(value), cfg.num_heads));
}

Tensor CrossAttention::attention_weights(const Tensor& query, const Tensor& key) const {
    Tensor w;
    Tensor kp = k_proj(key);
    multi_head_attend(q_proj(query), kp, kp, cfg.num_heads, &w);
    return w;
}

void CrossAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
    q_proj.visit(join_name(prefix, "q_proj"), fn);
    k_proj.visit(join_name(prefix, "k_proj"), fn);
    v_proj.visit(join_name(prefix, "v_proj"), fn);
    out_proj.visit(join_name(prefix, "out_proj"), fn);
}

DeformableSelfAttention::DeformableSelfAttention(const AttentionConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const auto D = cfg.model_dim;
    const auto H = cfg.num_heads, Lv = cfg.num_levels, K = cfg.num_points;
    // Small query-dependent offsets on top of a fixed fan of directions; the
    // quarter-cell phase keeps initial samples off exact cell centers.
    sampling_offsets.weight = rng.uniform_tensor({D, H * Lv * K * 2}, -0.01, 0.01, true);
    std::vector<double> bias(H * Lv * K * 2);
    for (std::size_t h = 0; h < H; ++h) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(H) +
                             std::numbers::pi / 8.0;
        for (std::size_t l = 0; l < Lv; ++l) {
            for (std::size_t k = 0; k < K; ++k) {
                const double r = 0.5 * static_cast<double>(k + 1);
                const std::size_t i = ((h * Lv + l) * K + k) * 2;
                bias[i] = r * std::cos(theta);
                bias[i + 1] = r * std::sin(theta);
            }
        }
    }
    sampling_offsets.bias = Tensor({H * Lv * K * 2}, std::move(bias), true);
    attention_logits = make_zero_linear(D, H * Lv * K);
    value_proj = make_linear(D, D, rng);
    out_proj = make_linear(D, D, rng);
    norm = make_layer_norm(D);
}

Tensor DeformableSelfAttention::sampling_locations(const Tensor& tokens, const DeformableGeometry& geom) const {
    check_tokens(tokens, cfg.model_dim, "deformable attention");
    const std::size_t T = tokens.shape()[0], L = tokens.shape()[1];
    geom.validate(L);
    if (geom.level_shapes.size() != cfg.num_levels) {
        throw DimensionError("deformable attention: geometry has " + std::to_string(geom.level_shapes.size()) +
                             " levels, block expects " + std::to_string(cfg.num_levels));
    }
    const auto H = cfg.num_heads, Lv = cfg.num_levels, K = cfg.num_points;
    std::vector<double> norm_v;
    for (const auto& l : geom.level_shapes) {
        norm_v.push_back(1.0 / static_cast<double>(l.width));
        norm_v.push_back(1.0 / static_cast<double>(l.height));
    }
    const Tensor normalizer({1, 1, 1, Lv, 1, 2}, std::move(norm_v));
    const Tensor refs = reshape(geom.reference_points, {1, L, 1, 1, 1, 2});
    Tensor offsets = reshape(sampling_offsets(tokens), {T, L, H, Lv, K, 2});
    return add(mul(offsets, normalizer), refs);
}

Tensor DeformableSelfAttention::sampling_weights(const Tensor& tokens) const {
    check_tokens(tokens, cfg.model_dim, "deformable attention");
    const std::size_t T = tokens.shape()[0], L = tokens.shape()[1];
    const auto H = cfg.num_heads, Lv = cfg.num_levels, K = cfg.num_points;
    Tensor logits = reshape(attention_logits(tokens), {T, L, H, Lv * K});
    return reshape(softmax(logits, -1), {T, L, H, Lv, K});
}

Tensor DeformableSelfAttention::aggregate(const Tensor& tokens, const DeformableGeometry& geom) const {
    Tensor loc = sampling_locations(tokens, geom);
    Tensor w = sampling_weights(tokens);
    return deformable_sample(value_proj(tokens), geom.level_shapes, geom.level_starts, loc, w);
}

Tensor DeformableSelfAttention::forward(const Tensor& tokens, const DeformableGeometry& geom) const {
    return norm(add(tokens, out_proj(aggregate(tokens, geom))));
}

void DeformableSelfAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
    sampling_offsets.visit(join_name(prefix, "sampling_offsets"), fn);
    attention_logits.visit(join_name(prefix, "attention_logits"), fn);
    value_proj.visit(join_name(prefix, "value_proj"), fn);
    out_proj.visit(join_name(prefix, "out_proj"), fn);
    norm.visit(join_name(prefix, "norm"), fn);
}

AudioGuidedCrossAttention::AudioGuidedCrossAttention(const AttentionConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const auto D = cfg.model_dim;
    q_proj = make_linear(D, D, rng);
    k_proj = make_linear(D, D, rng);
    v_proj = make_linear(D, D, rng);
    if (cfg.agca_output_projection) out_proj = make_linear(D, D, rng);
    gate = Tensor::zeros({1}, true);
}

Tensor AudioGuidedCrossAttention::attend(const Tensor& f_v, const Tensor& bridge_in) const {
    check_tokens(f_v, cfg.model_dim, "audio-guided attention query");
    check_tokens(bridge_in, cfg.model_dim, "audio-guided attention bridge");
    Tensor a = multi_head_attend(q_proj(f_v), k_proj(bridge_in), v_proj(bridge_in), cfg.num_heads);
    return cfg.agca_output_projection ? out_proj(a) : a;
}

Tensor AudioGuidedCrossAttention::forward(const Tensor& f_v, const Tensor& bridge_in) const {
    return add(f_v, mul(attend(f_v, bridge_in), gate));
}

void AudioGuidedCrossAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
    q_proj.visit(join_name(prefix, "q_proj"), fn);
    k_proj.visit(join_name(prefix, "k_proj"), fn);
    v_proj.visit(join_name(prefix, "v_proj"), fn);
    if (cfg.agca_output_projection) out_proj.visit(join_name(prefix, "out_proj"), fn);
    fn(join_name(prefix, "gate"), gate);
}

}  // namespace avseg
