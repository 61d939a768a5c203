#pragma once

#include <optional>

#include "geopeft/decoders.hpp"
#include "geopeft/peft.hpp"

namespace geopeft {

struct ModelConfig {
    BackboneConfig backbone;
    DecoderConfig decoder;
    std::optional<LoraConfig> lora;
    std::optional<VptConfig> vpt;
    std::optional<VitAdapterConfig> adapter;
    /// Seed of the encoder weights. Kept separate from the run seed so that
    /// replicates share one starting encoder, as with a pre-trained model.
    std::uint64_t backbone_seed = 0;
};

/// Backbone (+ attachments) -> optional neck -> decoder.
class SegmentationModel {
public:
    SegmentationModel() = default;
    /// `seed` drives the attachments, neck and decoder initialisation.
    SegmentationModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    /// [B, C, H, W] -> [B, K, H, W] logits.
    Tensor forward(const Tensor& images, const std::vector<std::string>& bands,
                   const std::vector<Metadata>* meta, bool training);
    /// Decoder input for an encoder output: {final tap} or the neck pyramid.
    std::vector<Tensor> decoder_features(const EncoderOutput& enc) const;

    ParameterList parameters() const;
    SegmentationModel clone() const;

    ViTBackbone backbone;
    std::optional<Neck> neck;
    Decoder decoder;

private:
    ModelConfig cfg_;
};

}  // namespace geopeft
