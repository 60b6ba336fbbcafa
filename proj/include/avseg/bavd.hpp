#pragma once

// Bidirectional audio-visual decoder: an audio-guided vision (AGV) tower of
// deformable self-attention + gated audio cross attention + feed-forward
// layers, and a vision-guided audio (VGA) tower of cross-attention-only
// layers, exchanging keys/values through per-layer bridges. The fusion head
// combines both outputs into mask logits.

#include <cstdint>
#include <string>
#include <vector>

#include "avseg/attention.hpp"

namespace avseg {

enum class BridgeMode {
    bidirectional,  // AGV layer i reads VGA layer-i input, VGA layer i reads AGV layer-i output
    audio_to_vis,   // VGA tower attends to the static visual tokens
    vis_to_audio,   // AGV tower attends to the static audio queries
    no_agca,        // AGV tower has no audio cross attention at all
    none,           // both towers read only static features of the other modality
};

enum class FusionMode {
    similarity,   // MLP over the token-by-query similarity S = F_AGV F_VGA^T / sqrt(D)
    elementwise,  // MLP over F_AGV * mean_q(F_VGA)
};

enum class QueryIntegration { sum, concat };

std::string to_string(BridgeMode m);
std::string to_string(FusionMode m);
std::string to_string(QueryIntegration m);
BridgeMode parse_bridge_mode(const std::string& s);
FusionMode parse_fusion_mode(const std::string& s);
QueryIntegration parse_query_integration(const std::string& s);

struct ModelConfig {
    std::size_t num_layers = 6;
    std::size_t model_dim = 32;
    std::size_t num_queries = 16;
    std::size_t frames = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t num_heads = 4;
    std::size_t num_points = 4;
    std::size_t ffn_expansion = 4;
    std::size_t audio_dim = 16;
    std::size_t num_classes = 1;  // mask channels
    BridgeMode bridge = BridgeMode::bidirectional;
    FusionMode fusion = FusionMode::similarity;
    QueryIntegration query_integration = QueryIntegration::sum;
    bool agca_output_projection = false;
    bool audio_encoder_bias = true;
    // When false the visual tokens are replaced by zeros (probe fixtures).
    bool visual_tokens_enabled = true;
    std::uint64_t init_seed = 0;

    AttentionConfig attention() const;
    // Grids of F2, F3, F4 (strides 8, 16, 32).
    std::vector<LevelShape> level_shapes() const;
    std::size_t num_tokens() const;
    void validate() const;
};

struct DecoderShapes {
    Shape agv;  // [T, L, D]
    Shape vga;  // [T, Na, D]
};

// Checks decoder dimensions without building a model; used for full-scale
// configurations that are too large to instantiate here.
DecoderShapes check_decoder_shapes(const ModelConfig& cfg, const std::vector<LevelShape>& levels);

struct BranchState {
    Tensor f_agv;  // [T, L, D]
    Tensor f_vga;  // [T, Na, D]
};

struct DecoderOutput {
    Tensor f_agv;
    Tensor f_vga;
    std::vector<BranchState> layers;
};

struct AgvLayer {
    DeformableSelfAttention self_attn;
    AudioGuidedCrossAttention agca;
    LayerNorm ffn_norm;
    Linear ffn_in, ffn_out;
    bool has_agca = true;

    // bridge_in is ignored when the layer has no AGCA block.
    Tensor forward(const Tensor& f_agv_prev, const Tensor& bridge_in, const DeformableGeometry& geom) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Cross attention from the previous VGA state onto the AGV output, with a
// residual connection and layer norm. No self-attention, no feed-forward.
struct VgaLayer {
    CrossAttention cross;
    LayerNorm norm;

    Tensor forward(const Tensor& f_vga_prev, const Tensor& agv_out) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

class BidirectionalDecoder {
public:
    BidirectionalDecoder() = default;
    BidirectionalDecoder(const ModelConfig& cfg, Rng& rng);

    // f_vis [T,L,D] visual tokens, f_a0 [T,Na,D] VGA tower input.
    DecoderOutput forward(const Tensor& f_vis, const Tensor& f_a0, const DeformableGeometry& geom) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    BridgeMode bridge = BridgeMode::bidirectional;
    std::vector<AgvLayer> agv;
    std::vector<VgaLayer> vga;
};

struct MaskPrediction {
    Tensor logits;  // [T, C, H, W]
    Tensor probabilities() const;  // per-channel sigmoid
};

// M = Linear(F_AGV + MLP(F_AGV . F_VGA)). The MLP's last layer starts at zero.
class FusionHead {
public:
    FusionHead() = default;
    FusionHead(const ModelConfig& cfg, Rng& rng);

    // Fused feature before the final linear layer: [T, L, D].
    Tensor fuse(const Tensor& f_agv, const Tensor& f_vga) const;
    // Reads the finest-level tokens of `fused`, maps D -> C and upsamples.
    MaskPrediction predict(const Tensor& fused, const DeformableGeometry& geom, std::size_t height,
                           std::size_t width) const;
    MaskPrediction forward(const Tensor& f_agv, const Tensor& f_vga, const DeformableGeometry& geom,
                           std::size_t height, std::size_t width) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    FusionMode mode = FusionMode::similarity;
    Linear mlp_in, mlp_out, classifier;
};

}  // namespace avseg
