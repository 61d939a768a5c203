#include "geopeft/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "geopeft/vit.hpp"

namespace geopeft {

CrossAttention CrossAttention::make(std::size_t d, Rng& rng) {
    CrossAttention ca;
    ca.norm_query = nn::LayerNorm::make(d);
    ca.norm_context = nn::LayerNorm::make(d);
    ca.q = nn::Linear::make(d, d, rng);
    ca.k = nn::Linear::make(d, d, rng);
    ca.v = nn::Linear::make(d, d, rng);
    ca.o = nn::Linear::make(d, d, rng);
    // Zero output projection: the attachment starts as an exact identity.
    ca.o.weight = nn::constant_param({d, d}, 0.0f);
    return ca;
}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& context, std::size_t heads) const {
    auto hq = norm_query.forward(x);
    auto hc = norm_context.forward(context);
    return ops::add(x, o.forward(multi_head_attention(q.forward(hq), k.forward(hc), v.forward(hc), heads)));
}

CrossAttention CrossAttention::clone() const {
    return {norm_query.clone(), norm_context.clone(), q.clone(), k.clone(), v.clone(), o.clone()};
}

void CrossAttention::parameters(ParameterList& out, const std::string& prefix) const {
    norm_query.parameters(out, prefix + ".norm_query");
    norm_context.parameters(out, prefix + ".norm_context");
    q.parameters(out, prefix + ".q", prefix + ".q.lora");
    k.parameters(out, prefix + ".k", prefix + ".k.lora");
    v.parameters(out, prefix + ".v", prefix + ".v.lora");
    o.parameters(out, prefix + ".o", prefix + ".o.lora");
}

VitAdapter VitAdapter::make(const BackboneConfig& backbone, const VitAdapterConfig& cfg, Rng& rng) {
    if (cfg.pyramid_strides != std::vector<std::size_t>{8, 16, 32}) {
        throw std::invalid_argument("vit-adapter: pyramid must have 3 levels at strides 8, 16, 32");
    }
    if (cfg.stem_width == 0) throw std::invalid_argument("vit-adapter: stem width must be positive");
    VitAdapter a;
    a.cfg = cfg;
    a.injection_layers = cfg.injection_layers.empty() ? backbone.taps() : cfg.injection_layers;
    for (std::size_t i = 0; i < a.injection_layers.size(); ++i) {
        const auto l = a.injection_layers[i];
        if (l < 1 || l > backbone.depth) {
            throw std::invalid_argument("vit-adapter: injection layer " + std::to_string(l) + " outside [1, " +
                                        std::to_string(backbone.depth) + "]");
        }
        if (i && l <= a.injection_layers[i - 1]) throw std::invalid_argument("vit-adapter: injection layers must increase");
    }
    const std::size_t w = cfg.stem_width, d = backbone.embed_dim;
    const std::size_t c = backbone.band_ids.size();
    const double std1 = std::sqrt(2.0 / static_cast<double>(c * 9));
    for (std::size_t i = 0; i < c; ++i) a.stem_band_slabs.push_back(nn::normal_param({w, 1, 3, 3}, std1, rng));
    const ops::Conv2dOptions s2{2, 1};
    a.stem2 = nn::Conv::make(w, w, 3, s2, rng);
    a.down8 = nn::Conv::make(w, 2 * w, 3, s2, rng);
    a.down16 = nn::Conv::make(2 * w, 4 * w, 3, s2, rng);
    a.down32 = nn::Conv::make(4 * w, 4 * w, 3, s2, rng);
    a.proj8 = nn::Conv::make(2 * w, d, 1, {}, rng);
    a.proj16 = nn::Conv::make(4 * w, d, 1, {}, rng);
    a.proj32 = nn::Conv::make(4 * w, d, 1, {}, rng);
    for (std::size_t i = 0; i < a.injection_layers.size(); ++i) a.injectors.push_back(CrossAttention::make(d, rng));
    a.extractor = CrossAttention::make(d, rng);
    return a;
}

VitAdapter::Prior VitAdapter::spatial_prior(const Tensor& images, const std::vector<std::size_t>& channels) const {
    std::vector<Tensor> slabs;
    for (auto ch : channels) slabs.push_back(stem_band_slabs.at(ch));
    auto kernel = slabs.size() == 1 ? slabs[0] : ops::concat(slabs, 1);
    auto x = ops::gelu(ops::conv2d(images, kernel, {2, 1}));
    x = ops::gelu(stem2.forward(x));
    auto c8 = ops::gelu(down8.forward(x));
    auto c16 = ops::gelu(down16.forward(c8));
    auto c32 = ops::gelu(down32.forward(c16));
    Prior prior;
    std::vector<Tensor> parts;
    for (auto [feat, proj] : {std::pair{c8, &proj8}, std::pair{c16, &proj16}, std::pair{c32, &proj32}}) {
        prior.extents.emplace_back(feat.size(2), feat.size(3));
        parts.push_back(nn::map_to_tokens(proj->forward(feat)));
    }
    prior.tokens = ops::concat(parts, 1);
    return prior;
}

std::vector<Tensor> VitAdapter::pyramid(const Tensor& tokens, const Prior& layout) const {
    std::vector<Tensor> maps;
    std::size_t offset = 0;
    for (auto [h, w] : layout.extents) {
        maps.push_back(nn::tokens_to_map(ops::slice(tokens, 1, offset, offset + h * w), h, w));
        offset += h * w;
    }
    return maps;
}

VitAdapter VitAdapter::clone() const {
    VitAdapter a;
    a.cfg = cfg;
    a.injection_layers = injection_layers;
    for (const auto& s : stem_band_slabs) a.stem_band_slabs.push_back(nn::copy_param(s));
    a.stem2 = stem2.clone();
    a.down8 = down8.clone();
    a.down16 = down16.clone();
    a.down32 = down32.clone();
    a.proj8 = proj8.clone();
    a.proj16 = proj16.clone();
    a.proj32 = proj32.clone();
    for (const auto& inj : injectors) a.injectors.push_back(inj.clone());
    a.extractor = extractor.clone();
    return a;
}

void VitAdapter::parameters(ParameterList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < stem_band_slabs.size(); ++i) {
        nn::add_param(out, prefix + ".stem1.band" + std::to_string(i), stem_band_slabs[i]);
    }
    stem2.parameters(out, prefix + ".stem2");
    down8.parameters(out, prefix + ".down8");
    down16.parameters(out, prefix + ".down16");
    down32.parameters(out, prefix + ".down32");
    proj8.parameters(out, prefix + ".proj8");
    proj16.parameters(out, prefix + ".proj16");
    proj32.parameters(out, prefix + ".proj32");
    for (std::size_t i = 0; i < injectors.size(); ++i) injectors[i].parameters(out, prefix + ".injectors." + std::to_string(i));
    extractor.parameters(out, prefix + ".extractor");
}

}  // namespace geopeft
