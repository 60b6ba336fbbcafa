#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "avseg/nn.hpp"
#include "avseg/ops.hpp"

namespace avseg {

struct AttentionConfig {
    std::size_t model_dim = 32;
    std::size_t num_heads = 4;
    std::size_t num_points = 4;  // deformable samples per head per level
    std::size_t num_levels = 3;
    // Adds a learned output projection to the audio-guided block before the
    // gate. The gated update has none, so this is off by default.
    bool agca_output_projection = false;

    std::size_t key_dim() const { return model_dim / num_heads; }
    void validate() const;
};

// Multi-scale token layout: levels stored back to back in the token axis.
struct DeformableGeometry {
    std::vector<LevelShape> level_shapes;
    std::vector<std::size_t> level_starts;
    Tensor reference_points;  // [L, 2] normalized (x, y) cell centers

    std::size_t num_tokens() const;
    // Throws DimensionError unless the levels tile exactly `tokens` entries.
    void validate(std::size_t tokens) const;
};

DeformableGeometry make_geometry(std::vector<LevelShape> levels);

// Scaled dot-product attention over already projected q [T,Nq,D],
// k/v [T,Nk,D], split into `heads`. When `weights` is non-null it receives the
// softmax weights [T, heads, Nq, Nk].
Tensor multi_head_attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                         Tensor* weights = nullptr);

// Standard multi-head cross attention with learned q/k/v/out projections.
class CrossAttention {
public:
    CrossAttention() = default;
    CrossAttention(const AttentionConfig& cfg, Rng& rng);

    // query [T,Nq,D], key/value [T,Nk,D] -> [T,Nq,D]
    Tensor forward(const Tensor& query, const Tensor& key, const Tensor& value) const;
    // [T, heads, Nq, Nk]
    Tensor attention_weights(const Tensor& query, const Tensor& key) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    AttentionConfig cfg;
    Linear q_proj, k_proj, v_proj, out_proj;
};

// Deformable self-attention over a multi-level token sequence: each query
// predicts per-head sampling offsets and weights, gathers values bilinearly
// around its reference point on every level, and the aggregate goes through
// an output projection, a residual add and layer norm.
class DeformableSelfAttention {
public:
    DeformableSelfAttention() = default;
    DeformableSelfAttention(const AttentionConfig& cfg, Rng& rng);

    // [T,L,heads,levels,points,2]; offsets are in units of each level's cells.
    Tensor sampling_locations(const Tensor& tokens, const DeformableGeometry& geom) const;
    // [T,L,heads,levels,points], softmax-normalized over levels*points.
    Tensor sampling_weights(const Tensor& tokens) const;
    // Weighted samples before output projection and residual: [T,L,D].
    Tensor aggregate(const Tensor& tokens, const DeformableGeometry& geom) const;
    Tensor forward(const Tensor& tokens, const DeformableGeometry& geom) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    AttentionConfig cfg;
    Linear sampling_offsets, attention_logits, value_proj, out_proj;
    LayerNorm norm;
};

// Audio-guided cross attention: f_v + Softmax(Q_v K_a^T / sqrt(d_k)) V_a * w.
// Keys and values are projected from the bridge input by this block; w is a
// single learnable scalar starting at 0.
class AudioGuidedCrossAttention {
public:
    AudioGuidedCrossAttention() = default;
    AudioGuidedCrossAttention(const AttentionConfig& cfg, Rng& rng);

    // Cross-attention term before the gate: [T,L,D].
    Tensor attend(const Tensor& f_v, const Tensor& bridge_in) const;
    Tensor forward(const Tensor& f_v, const Tensor& bridge_in) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    AttentionConfig cfg;
    Linear q_proj, k_proj, v_proj;
    Linear out_proj;  // only with cfg.agca_output_projection
    Tensor gate;      // [1]
};

}  // namespace avseg
