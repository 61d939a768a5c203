#pragma once

#include <string>
#include <vector>

#include "geopeft/nn.hpp"

namespace geopeft {

enum class DecoderKind { Linear, Fcn, UperNet, UNet };

std::string to_string(DecoderKind k);
DecoderKind parse_decoder_kind(const std::string& s);

struct DecoderConfig {
    DecoderKind kind = DecoderKind::Linear;
    std::size_t num_classes = 2;
    std::size_t fcn_hidden = 128;
    std::size_t upernet_channels = 128;
    std::vector<std::size_t> ppm_scales = {1, 2, 3, 6};
    std::vector<std::size_t> unet_widths = {256, 128, 64, 32};

    void validate() const;
    /// UperNet and UNet read the 4-level pyramid from the neck.
    bool needs_pyramid() const { return kind == DecoderKind::UperNet || kind == DecoderKind::UNet; }
};

/// Learned up/down-sampling turning 4 equal-size tapped maps into scales
/// 4x, 2x, 1x, 1/2x of the patch grid with widths d/4, d/2, d, d.
struct Neck {
    nn::Conv up1a, up1b, up2, down4;

    static Neck make(std::size_t embed_dim, Rng& rng);
    static std::vector<std::size_t> widths(std::size_t embed_dim);
    std::vector<Tensor> forward(const std::vector<Tensor>& taps) const;
    Neck clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

std::size_t neck_parameter_count(std::size_t embed_dim);

class Decoder {
public:
    Decoder() = default;
    Decoder(DecoderConfig cfg, std::size_t embed_dim, std::size_t patch_size, Rng& rng);

    const DecoderConfig& config() const { return cfg_; }

    /// Linear and FCN take {final tap}; UperNet and UNet take the neck
    /// pyramid. Returns [B, K, out_h, out_w] logits.
    Tensor forward(const std::vector<Tensor>& features, std::size_t out_h, std::size_t out_w, bool training);

    /// The pyramid-pooling branch output at one scale (exposed for tests).
    Tensor ppm_branch(const Tensor& top, std::size_t index, bool training);

    Decoder clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;

private:
    DecoderConfig cfg_;
    std::size_t embed_dim_ = 0;
    std::size_t patch_size_ = 0;

    nn::Conv linear_up;

    struct FcnBlock {
        nn::Conv up, conv;
        nn::LayerNorm norm;
    };
    std::vector<FcnBlock> fcn_blocks;
    nn::Conv classifier;

    std::vector<nn::ConvBnRelu> ppm;
    nn::ConvBnRelu ppm_bottleneck;
    std::vector<nn::ConvBnRelu> laterals;
    std::vector<nn::ConvBnRelu> fpn;
    nn::ConvBnRelu fuse;

    struct UnetStage {
        nn::ConvBnRelu a, b;
    };
    std::vector<UnetStage> unet;
};

/// Exact trainable-parameter count of the decoder head (without neck).
std::size_t estimate_decoder_params(const DecoderConfig& cfg, std::size_t embed_dim, std::size_t patch_size);

}  // namespace geopeft
