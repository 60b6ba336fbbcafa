#pragma once

#include "avseg/backbones.hpp"
#include "avseg/bavd.hpp"

namespace avseg {

struct ModelOutput {
    MaskPrediction mask;
    Tensor fused;  // pre-classifier fused feature [T, L, D]
    Tensor f_agv;  // [T, L, D]
    Tensor f_vga;  // [T, Na, D]
    Tensor f_a0;   // [T, Na, D] decoder audio input
    Tensor f_vis;  // [T, L, D] decoder visual input (with positions)
    DeformableGeometry geometry;
};

// Backbones + learned per-level positional tables + decoder + fusion head.
class AvsModel {
public:
    explicit AvsModel(const ModelConfig& cfg);

    // frames [T, 3, H, W], audio [T, A]
    ModelOutput forward(const Tensor& frames, const Tensor& audio) const;

    // Stable, ordered parameter names; handles alias the model's storage.
    NamedTensors parameters();
    std::size_t parameter_count();
    const ModelConfig& config() const { return cfg_; }

    VisualBackbone visual;
    AudioBackbone audio;
    std::vector<Tensor> level_pos;  // [h_l * w_l, D] per level
    BidirectionalDecoder decoder;
    FusionHead head;

private:
    void visit(const ParamVisitor& fn);
    ModelConfig cfg_;
};

}  // namespace avseg
