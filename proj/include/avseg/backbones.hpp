#pragma once

// Small trainable stand-ins for the pretrained extractors. They produce the
// same feature shapes: a four-level visual pyramid at strides 4/8/16/32 (the
// last three flattened into one token sequence) and a per-frame audio
// embedding added to learnable queries.

#include <string>

#include "avseg/attention.hpp"
#include "avseg/bavd.hpp"

namespace avseg {

struct VisualTokenSequence {
    Tensor tokens;  // [T, L, D], levels F2, F3, F4 back to back
    DeformableGeometry geometry;
    Tensor f1;      // [T, H/4 * W/4, D], computed but not consumed downstream
};

// L = sum over i in {2,3,4} of (H / 2^(i+1)) * (W / 2^(i+1)).
std::size_t visual_token_count(std::size_t height, std::size_t width);

// Strided patch convolutions: a 4x4/stride-4 stem, then 2x2/stride-2 merges.
class VisualBackbone {
public:
    VisualBackbone() = default;
    VisualBackbone(const ModelConfig& cfg, Rng& rng);

    // frames [T, 3, H, W]
    VisualTokenSequence forward(const Tensor& frames) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    std::size_t dim = 0;
    Linear stem;
    Linear merge[3];       // F1->F2, F2->F3, F3->F4
    Linear level_proj[3];  // per-level output projection of F2..F4
};

struct AudioFeature {
    Tensor queries;    // [T, Na, D]
    Tensor embedding;  // [T, 1, D]
};

class AudioBackbone {
public:
    AudioBackbone() = default;
    AudioBackbone(const ModelConfig& cfg, Rng& rng);

    // audio [T, A]
    AudioFeature forward(const Tensor& audio) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);

    QueryIntegration integration = QueryIntegration::sum;
    Linear fc1, fc2;
    Tensor query_embed;  // [Na, D]
    Linear integrate;    // [2D -> D], concat integration only
};

}  // namespace avseg
