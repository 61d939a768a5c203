#pragma once

#include <memory>
#include <string>
#include <vector>

#include "geopeft/adapter.hpp"
#include "geopeft/nn.hpp"

namespace geopeft {

struct BackboneConfig {
    std::size_t embed_dim = 768;
    std::size_t depth = 12;
    std::size_t heads = 12;
    std::size_t patch_size = 16;
    double mlp_ratio = 4.0;
    std::vector<std::string> band_ids;
    std::size_t image_h = 224;
    std::size_t image_w = 224;
    /// 1-based block indices; empty selects round(L * {1/4, 1/2, 3/4, 1}).
    std::vector<std::size_t> tap_layers;
    bool metadata_enabled = false;

    void validate() const;
    std::vector<std::size_t> taps() const;
    std::size_t grid_h() const { return image_h / patch_size; }
    std::size_t grid_w() const { return image_w / patch_size; }
    std::size_t num_tokens() const { return grid_h() * grid_w(); }
    std::size_t mlp_dim() const;
};

std::vector<std::size_t> default_taps(std::size_t depth);

/// Acquisition context for the optional metadata embedding.
struct Metadata {
    double lat = 0.0;
    double lon = 0.0;
    int day_of_year = 1;
    int year = 2020;
};

/// The 7 raw features: sin/cos of lat, lon (period 360 degrees), day of
/// year (period 365.25 days), and (year - 2000) / 10.
std::vector<double> metadata_features(const Metadata& m);

struct Block {
    nn::LayerNorm norm1;
    nn::Linear q, k, v, proj;
    nn::LayerNorm norm2;
    nn::Linear fc1, fc2;

    static Block make(std::size_t d, std::size_t hidden, Rng& rng);
    Tensor forward(const Tensor& x, std::size_t heads) const;
    Block clone() const;
    void parameters(ParameterList& out, const std::string& prefix, const std::string& lora_prefix) const;
};

/// Multi-head attention of [B, Tq, d] queries over [B, Tk, d] keys/values
/// that were already projected.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

struct EncoderOutput {
    /// One [B, d, H/p, W/p] map per tap layer.
    std::vector<Tensor> taps;
    /// [B, N, d] final-layer patch tokens after the closing norm.
    Tensor tokens;
    /// Adapter feature hierarchy at strides 8, 16, 32 (empty without adapter).
    std::vector<Tensor> adapter_pyramid;
};

class ViTBackbone {
public:
    ViTBackbone() = default;
    ViTBackbone(BackboneConfig cfg, Rng& rng);

    const BackboneConfig& config() const { return cfg_; }

    /// [B, C, H, W] with channels named by `bands` -> [B, N, d].
    Tensor embed_patches(const Tensor& images, const std::vector<std::string>& bands) const;
    /// One d-vector per entry, [B, d]; exact zeros when metadata is disabled.
    Tensor encode_metadata(const std::vector<Metadata>& meta) const;
    /// Runs the blocks on embedded tokens. `prior` carries the adapter's
    /// spatial prior tokens and is required iff an adapter is attached.
    EncoderOutput forward_features(const Tensor& tokens, const VitAdapter::Prior* prior = nullptr) const;
    EncoderOutput forward(const Tensor& images, const std::vector<std::string>& bands,
                          const std::vector<Metadata>* meta = nullptr) const;
    /// Mean of the final-layer patch tokens, [B, d].
    Tensor image_embedding(const Tensor& images, const std::vector<std::string>& bands,
                           const std::vector<Metadata>* meta = nullptr) const;

    /// Position of a band id in the configured band list.
    std::size_t band_index(const std::string& id) const;

    ViTBackbone clone() const;
    ParameterList parameters() const;

    // Structure is public so that attachments can wrap it in place.
    std::vector<Tensor> band_slabs;  // per cfg band: [d, 1, p, p]
    Tensor patch_bias;               // [d]
    Tensor pos_embed;                // [N, d]
    nn::Linear meta_proj;            // 7 -> d, only when metadata is enabled
    std::vector<Block> blocks;
    nn::LayerNorm norm;
    std::vector<Tensor> prompts;  // VPT-Deep: one [P, d] block per layer
    std::shared_ptr<VitAdapter> adapter;

private:
    BackboneConfig cfg_;
};

}  // namespace geopeft
