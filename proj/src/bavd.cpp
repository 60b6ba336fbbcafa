#include "avseg/bavd.hpp"

#include <cmath>

#include "avseg/errors.hpp"
#include "avseg/ops.hpp"

namespace avseg {

std::string to_string(BridgeMode m) {
    switch (m) {
        case BridgeMode::bidirectional: return "bidirectional";
        case BridgeMode::audio_to_vis: return "audio_to_vis";
        case BridgeMode::vis_to_audio: return "vis_to_audio";
        case BridgeMode::no_agca: return "no_agca";
        case BridgeMode::none: return "none";
    }
    return "?";
}

std::string to_string(FusionMode m) { return m == FusionMode::similarity ? "similarity" : "elementwise"; }
std::string to_string(QueryIntegration m) { return m == QueryIntegration::sum ? "sum" : "concat"; }

BridgeMode parse_bridge_mode(const std::string& s) {
    for (auto m : {BridgeMode::bidirectional, BridgeMode::audio_to_vis, BridgeMode::vis_to_audio, BridgeMode::no_agca,
                   BridgeMode::none}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown bridge mode '" + s + "'");
}

FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "similarity") return FusionMode::similarity;
    if (s == "elementwise") return FusionMode::elementwise;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

QueryIntegration parse_query_integration(const std::string& s) {
    if (s == "sum") return QueryIntegration::sum;
    if (s == "concat") return QueryIntegration::concat;
    throw ConfigError("unknown query integration '" + s + "'");
}

AttentionConfig ModelConfig::attention() const {
    AttentionConfig a;
    a.model_dim = model_dim;
    a.num_heads = num_heads;
    a.num_points = num_points;
    a.num_levels = 3;
    a.agca_output_projection = agca_output_projection;
    return a;
}

std::vector<LevelShape> ModelConfig::level_shapes() const {
    return {{height / 8, width / 8}, {height / 16, width / 16}, {height / 32, width / 32}};
}

std::size_t ModelConfig::num_tokens() const {
    std::size_t n = 0;
    for (const auto& l : level_shapes()) n += l.height * l.width;
    return n;
}

void ModelConfig::validate() const {
    if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
    if (num_queries < 1) throw ConfigError("model: num_queries must be >= 1");
    if (frames < 1) throw ConfigError("model: frames must be >= 1");
    if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
        throw ConfigError("model: frame size " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be a positive multiple of 32");
    }
    if (audio_dim == 0 || num_classes == 0 || ffn_expansion == 0) {
        throw ConfigError("model: audio_dim, num_classes and ffn_expansion must be positive");
    }
    attention().validate();
}

DecoderShapes check_decoder_shapes(const ModelConfig& cfg, const std::vector<LevelShape>& levels) {
    if (cfg.num_layers < 1 || cfg.num_queries < 1) throw ConfigError("decoder: need N >= 1 and Na >= 1");
    cfg.attention().validate();
    if (levels.size() != cfg.attention().num_levels) throw ConfigError("decoder: expected 3 feature levels");
    std::size_t L = 0;
    for (const auto& l : levels) {
        if (l.height == 0 || l.width == 0) throw DimensionError("decoder: empty level");
        L += l.height * l.width;
    }
    return {{cfg.frames, L, cfg.model_dim}, {cfg.frames, cfg.num_queries, cfg.model_dim}};
}

Tensor AgvLayer::forward(const Tensor& f_agv_prev, const Tensor& bridge_in, const DeformableGeometry& geom) const {
    Tensor v = self_attn.forward(f_agv_prev, geom);
    if (has_agca) v = agca.forward(v, bridge_in);
    Tensor h = ffn_out(gelu(ffn_in(ffn_norm(v))));
    return add(v, h);
}

void AgvLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    self_attn.visit(join_name(prefix, "self_attn"), fn);
    if (has_agca) agca.visit(join_name(prefix, "agca"), fn);
    ffn_norm.visit(join_name(prefix, "ffn_norm"), fn);
    ffn_in.visit(join_name(prefix, "ffn_in"), fn);
    ffn_out.visit(join_name(prefix, "ffn_out"), fn);
}

Tensor VgaLayer::forward(const Tensor& f_vga_prev, const Tensor& agv_out) const {
    if (f_vga_prev.dim() != 3 || agv_out.dim() != 3 || f_vga_prev.shape()[0] != agv_out.shape()[0]) {
        throw DimensionError("vga layer: query " + shape_str(f_vga_prev.shape()) + " and bridge " +
                             shape_str(agv_out.shape()) + " are inconsistent");
    }
    return norm(add(f_vga_prev, cross.forward(f_vga_prev, agv_out, agv_out)));
}

void VgaLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
    cross.visit(join_name(prefix, "cross"), fn);
    norm.visit(join_name(prefix, "norm"), fn);
}

BidirectionalDecoder::BidirectionalDecoder(const ModelConfig& cfg, Rng& rng) : bridge(cfg.bridge) {
    cfg.validate();
    const auto acfg = cfg.attention();
    const auto D = cfg.model_dim;
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        AgvLayer a;
        a.self_attn = DeformableSelfAttention(acfg, rng);
        a.has_agca = cfg.bridge != BridgeMode::no_agca;
        if (a.has_agca) a.agca = AudioGuidedCrossAttention(acfg, rng);
        a.ffn_norm = make_layer_norm(D);
        a.ffn_in = make_linear(D, D * cfg.ffn_expansion, rng);
        a.ffn_out = make_linear(D * cfg.ffn_expansion, D, rng);
        agv.push_back(std::move(a));
        VgaLayer g;
        g.cross = CrossAttention(acfg, rng);
        g.norm = make_layer_norm(D);
        vga.push_back(std::move(g));
    }
}

DecoderOutput BidirectionalDecoder::forward(const Tensor& f_vis, const Tensor& f_a0,
                                            const DeformableGeometry& geom) const {
    if (f_vis.dim() != 3 || f_a0.dim() != 3 || f_vis.shape()[0] != f_a0.shape()[0] ||
        f_vis.shape()[2] != f_a0.shape()[2]) {
        throw DimensionError("decoder: visual tokens " + shape_str(f_vis.shape()) + " and audio queries " +
                             shape_str(f_a0.shape()) + " are inconsistent");
    }
    geom.validate(f_vis.shape()[1]);
    const bool agv_reads_vga_state = bridge == BridgeMode::bidirectional || bridge == BridgeMode::audio_to_vis;
    const bool vga_reads_agv_state =
        bridge == BridgeMode::bidirectional || bridge == BridgeMode::vis_to_audio || bridge == BridgeMode::no_agca;

    DecoderOutput out;
    Tensor f_agv = f_vis;
    Tensor f_vga = f_a0;
    for (std::size_t i = 0; i < agv.size(); ++i) {
        // Layer i of the AGV tower consumes the *input* of VGA layer i, and VGA
        // layer i consumes the *output* of AGV layer i, so AGV runs first.
        const Tensor& audio_bridge = agv_reads_vga_state ? f_vga : f_a0;
        f_agv = agv[i].forward(f_agv, audio_bridge, geom);
        const Tensor& visual_bridge = vga_reads_agv_state ? f_agv : f_vis;
        f_vga = vga[i].forward(f_vga, visual_bridge);
        out.layers.push_back({f_agv, f_vga});
    }
    out.f_agv = f_agv;
    out.f_vga = f_vga;
    return out;
}

void BidirectionalDecoder::visit(const std::string& prefix, const ParamVisitor& fn) {
    for (std::size_t i = 0; i < agv.size(); ++i) {
        agv[i].visit(join_name(prefix, "agv." + std::to_string(i)), fn);
        vga[i].visit(join_name(prefix, "vga." + std::to_string(i)), fn);
    }
}

Tensor MaskPrediction::probabilities() const { return sigmoid(logits); }

FusionHead::FusionHead(const ModelConfig& cfg, Rng& rng) : mode(cfg.fusion) {
    const auto D = cfg.model_dim;
    const std::size_t in = mode == FusionMode::similarity ? cfg.num_queries : D;
    mlp_in = make_linear(in, D, rng);
    mlp_out = make_zero_linear(D, D);
    classifier = make_linear(D, cfg.num_classes, rng);
}

Tensor FusionHead::fuse(const Tensor& f_agv, const Tensor& f_vga) const {
    const double d = static_cast<double>(f_agv.shape().back());
    Tensor interaction;
    if (mode == FusionMode::similarity) {
        interaction = scale(matmul(f_agv, transpose(f_vga, 1, 2)), 1.0 / std::sqrt(d));  // T,L,Na
    } else {
        interaction = mul(f_agv, mean(f_vga, 1, true));  // T,L,D
    }
    return add(f_agv, mlp_out(gelu(mlp_in(interaction))));
}

MaskPrediction FusionHead::predict(const Tensor& fused, const DeformableGeometry& geom, std::size_t height,
                                   std::size_t width) const {
    const auto& finest = geom.level_shapes.front();
    const std::size_t T = fused.shape()[0];
    const std::size_t C = classifier.out_features();
    Tensor fine = slice(fused, 1, geom.level_starts.front(), finest.height * finest.width);
    Tensor grid = reshape(classifier(fine), {T, finest.height, finest.width, C});
    return {permute(upsample_bilinear(grid, height, width), {0, 3, 1, 2})};
}

MaskPrediction FusionHead::forward(const Tensor& f_agv, const Tensor& f_vga, const DeformableGeometry& geom,
                                   std::size_t height, std::size_t width) const {
    return predict(fuse(f_agv, f_vga), geom, height, width);
}

void FusionHead::visit(const std::string& prefix, const ParamVisitor& fn) {
    mlp_in.visit(join_name(prefix, "mlp_in"), fn);
    mlp_out.visit(join_name(prefix, "mlp_out"), fn);
    classifier.visit(join_name(prefix, "classifier"), fn);
}

}  // namespace avseg
