#include "avseg/backbones.hpp"

#include "avseg/errors.hpp"
#include "avseg/ops.hpp"

namespace avseg {

std::size_t visual_token_count(std::size_t height, std::size_t width) {
    std::size_t n = 0;
    for (std::size_t i = 2; i <= 4; ++i) n += (height >> (i + 1)) * (width >> (i + 1));
    return n;
}

namespace {

// [T, 3, H, W] -> [T, (H/p)(W/p), p*p*3]
Tensor patchify_frames(const Tensor& frames, std::size_t p) {
    const auto& s = frames.shape();
    const std::size_t T = s[0], C = s[1], H = s[2], W = s[3];
    Tensor x = reshape(frames, {T, C, H / p, p, W / p, p});
    x = permute(x, {0, 2, 4, 3, 5, 1});
    return reshape(x, {T, (H / p) * (W / p), p * p * C});
}

// [T, h*w, D] on an h x w grid -> [T, (h/2)(w/2), 4D]
Tensor merge_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
    const auto& s = tokens.shape();
    const std::size_t T = s[0], D = s[2];
    Tensor x = reshape(tokens, {T, h / 2, 2, w / 2, 2, D});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    return reshape(x, {T, (h / 2) * (w / 2), 4 * D});
}

}  // namespace

VisualBackbone::VisualBackbone(const ModelConfig& cfg, Rng& rng) : dim(cfg.model_dim) {
    const auto D = cfg.model_dim;
    stem = make_linear(4 * 4 * 3, D, rng);
    for (auto& m : merge) m = make_linear(4 * D, D, rng);
    for (auto& p : level_proj) p = make_linear(D, D, rng);
}

VisualTokenSequence VisualBackbone::forward(const Tensor& frames) const {
    const auto& s = frames.shape();
    if (s.size() != 4 || s[1] != 3) throw DimensionError("visual backbone: expected [T,3,H,W], got " + shape_str(s));
    const std::size_t H = s[2], W = s[3];
    if (H % 32 != 0 || W % 32 != 0) {
        throw ConfigError("visual backbone: frame size " + std::to_string(H) + "x" + std::to_string(W) +
                          " is not divisible by 32");
    }
    VisualTokenSequence out;
    Tensor f = gelu(stem(patchify_frames(frames, 4)));
    out.f1 = f;
    std::size_t h = H / 4, w = W / 4;
    std::vector<Tensor> levels;
    std::vector<LevelShape> shapes;
    for (std::size_t i = 0; i < 3; ++i) {
        f = gelu(merge[i](merge_tokens(f, h, w)));
        h /= 2;
        w /= 2;
        levels.push_back(level_proj[i](f));
        shapes.push_back({h, w});
    }
    out.tokens = concat(levels, 1);
    out.geometry = make_geometry(std::move(shapes));
    return out;
}

void VisualBackbone::visit(const std::string& prefix, const ParamVisitor& fn) {
    stem.visit(join_name(prefix, "stem"), fn);
    for (std::size_t i = 0; i < 3; ++i) merge[i].visit(join_name(prefix, "merge." + std::to_string(i)), fn);
    for (std::size_t i = 0; i < 3; ++i) level_proj[i].visit(join_name(prefix, "level_proj." + std::to_string(i)), fn);
}

AudioBackbone::AudioBackbone(const ModelConfig& cfg, Rng& rng) : integration(cfg.query_integration) {
    const auto D = cfg.model_dim;
    fc1 = make_linear(cfg.audio_dim, D, rng, cfg.audio_encoder_bias);
    fc2 = make_linear(D, D, rng, cfg.audio_encoder_bias);
    query_embed = rng.normal_tensor({cfg.num_queries, D}, 0.0, 0.5, true);
    if (integration == QueryIntegration::concat) integrate = make_linear(2 * D, D, rng);
}

AudioFeature AudioBackbone::forward(const Tensor& audio) const {
    const auto& s = audio.shape();
    if (s.size() != 2 || s[1] != fc1.in_features()) {
        throw DimensionError("audio backbone: expected [T," + std::to_string(fc1.in_features()) + "], got " +
                             shape_str(s));
    }
    const std::size_t T = s[0];
    const std::size_t Na = query_embed.shape()[0], D = query_embed.shape()[1];
    AudioFeature out;
    out.embedding = reshape(fc2(gelu(fc1(audio))), {T, 1, D});
    Tensor q = reshape(query_embed, {1, Na, D});
    if (integration == QueryIntegration::sum) {
        out.queries = add(q, out.embedding);
    } else {
        out.queries = integrate(concat({expand(q, {T, Na, D}), expand(out.embedding, {T, Na, D})}, 2));
    }
    return out;
}

void AudioBackbone::visit(const std::string& prefix, const ParamVisitor& fn) {
    fc1.visit(join_name(prefix, "fc1"), fn);
    fc2.visit(join_name(prefix, "fc2"), fn);
    fn(join_name(prefix, "query_embed"), query_embed);
    if (integration == QueryIntegration::concat) integrate.visit(join_name(prefix, "integrate"), fn);
}

}  // namespace avseg
