#include "geopeft/model.hpp"

namespace geopeft {

SegmentationModel::SegmentationModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng base(cfg.backbone_seed);
    backbone = ViTBackbone(cfg.backbone, base);
    Rng rng(seed);
    auto lora_rng = rng.fork(1), vpt_rng = rng.fork(2), adapter_rng = rng.fork(3);
    auto neck_rng = rng.fork(4), decoder_rng = rng.fork(5);
    if (cfg.lora) attach_lora(backbone, *cfg.lora, lora_rng);
    if (cfg.vpt) attach_vpt(backbone, *cfg.vpt, vpt_rng);
    if (cfg.adapter) attach_vit_adapter(backbone, *cfg.adapter, adapter_rng);
    if (cfg.decoder.needs_pyramid()) neck = Neck::make(cfg.backbone.embed_dim, neck_rng);
    decoder = Decoder(cfg.decoder, cfg.backbone.embed_dim, cfg.backbone.patch_size, decoder_rng);
}

std::vector<Tensor> SegmentationModel::decoder_features(const EncoderOutput& enc) const {
    if (neck) return neck->forward(enc.taps);
    return {enc.taps.back()};
}

Tensor SegmentationModel::forward(const Tensor& images, const std::vector<std::string>& bands,
                                  const std::vector<Metadata>* meta, bool training) {
    const auto enc = backbone.forward(images, bands, meta);
    return decoder.forward(decoder_features(enc), images.size(2), images.size(3), training);
}

ParameterList SegmentationModel::parameters() const {
    auto out = backbone.parameters();
    if (neck) neck->parameters(out, "neck");
    decoder.parameters(out, "decoder");
    return out;
}

SegmentationModel SegmentationModel::clone() const {
    SegmentationModel m;
    m.cfg_ = cfg_;
    m.backbone = backbone.clone();
    if (neck) m.neck = neck->clone();
    m.decoder = decoder.clone();
    return m;
}

}  // namespace geopeft
