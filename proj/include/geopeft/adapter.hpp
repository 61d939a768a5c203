#pragma once

#include <vector>

#include "geopeft/nn.hpp"

namespace geopeft {

struct BackboneConfig;

struct VitAdapterConfig {
    /// Stem width at stride 4; the pyramid levels use 2x, 4x and 4x of it.
    std::size_t stem_width = 64;
    /// 1-based layers preceded by an injector; empty selects the tap layers.
    std::vector<std::size_t> injection_layers;
    /// Strides of the spatial-prior pyramid relative to the input.
    std::vector<std::size_t> pyramid_strides = {8, 16, 32};
};

/// Pre-norm cross-attention x <- x + o(attn(q(LN x), k(LN c), v(LN c)))
/// with a zero-initialised output projection.
struct CrossAttention {
    nn::LayerNorm norm_query;
    nn::LayerNorm norm_context;
    nn::Linear q, k, v, o;

    static CrossAttention make(std::size_t d, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& context, std::size_t heads) const;
    CrossAttention clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

/// Simplified ViT-Adapter: convolutional spatial prior, cross-attention
/// injectors into the token stream and one extractor after the last block.
struct VitAdapter {
    VitAdapterConfig cfg;
    std::vector<std::size_t> injection_layers;
    /// First stem conv kept per input band so band subsets work; [w, 1, 3, 3] each.
    std::vector<Tensor> stem_band_slabs;
    nn::Conv stem2, down8, down16, down32;
    nn::Conv proj8, proj16, proj32;
    std::vector<CrossAttention> injectors;
    CrossAttention extractor;
    // Filled by spatial_prior for the current input.
    struct Prior {
        Tensor tokens;  // [B, M, d]
        std::vector<std::pair<std::size_t, std::size_t>> extents;
    };

    static VitAdapter make(const BackboneConfig& backbone, const VitAdapterConfig& cfg, Rng& rng);

    /// Spatial prior tokens for images whose channels are `channels` (indices
    /// into the backbone band list).
    Prior spatial_prior(const Tensor& images, const std::vector<std::size_t>& channels) const;
    /// Splits prior tokens back into [B, d, h, w] maps.
    std::vector<Tensor> pyramid(const Tensor& tokens, const Prior& layout) const;

    VitAdapter clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

}  // namespace geopeft
