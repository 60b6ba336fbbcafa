#include "avseg/model.hpp"

#include "avseg/errors.hpp"
#include "avseg/ops.hpp"

namespace avseg {

AvsModel::AvsModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    visual = VisualBackbone(cfg_, rng);
    audio = AudioBackbone(cfg_, rng);
    for (const auto& l : cfg_.level_shapes()) {
        level_pos.push_back(rng.normal_tensor({l.height * l.width, cfg_.model_dim}, 0.0, 0.1, true));
    }
    decoder = BidirectionalDecoder(cfg_, rng);
    head = FusionHead(cfg_, rng);
}

ModelOutput AvsModel::forward(const Tensor& frames, const Tensor& audio_in) const {
    const auto& fs = frames.shape();
    if (fs.size() != 4 || fs[2] != cfg_.height || fs[3] != cfg_.width) {
        throw DimensionError("model: frames " + shape_str(fs) + " do not match configured " +
                             std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
    }
    if (audio_in.dim() != 2 || audio_in.shape()[0] != fs[0]) {
        throw DimensionError("model: audio " + shape_str(audio_in.shape()) + " does not match " +
                             std::to_string(fs[0]) + " frames");
    }
    ModelOutput out;
    VisualTokenSequence vis = visual.forward(frames);
    out.geometry = vis.geometry;
    Tensor tokens = vis.tokens;
    if (!cfg_.visual_tokens_enabled) tokens = Tensor::zeros(tokens.shape());
    out.f_vis = add(tokens, concat(level_pos, 0));
    out.f_a0 = audio.forward(audio_in).queries;
    DecoderOutput dec = decoder.forward(out.f_vis, out.f_a0, out.geometry);
    out.f_agv = dec.f_agv;
    out.f_vga = dec.f_vga;
    out.fused = head.fuse(out.f_agv, out.f_vga);
    out.mask = head.predict(out.fused, out.geometry, cfg_.height, cfg_.width);
    return out;
}

void AvsModel::visit(const ParamVisitor& fn) {
    visual.visit("visual", fn);
    audio.visit("audio", fn);
    for (std::size_t i = 0; i < level_pos.size(); ++i) fn("level_pos." + std::to_string(i), level_pos[i]);
    decoder.visit("decoder", fn);
    head.visit("head", fn);
}

NamedTensors AvsModel::parameters() {
    NamedTensors out;
    visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::size_t AvsModel::parameter_count() {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

}  // namespace avseg
