#include "geopeft/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace geopeft {

std::vector<std::size_t> default_taps(std::size_t depth) {
    std::vector<std::size_t> taps;
    for (double f : {0.25, 0.5, 0.75, 1.0}) taps.push_back(static_cast<std::size_t>(std::lround(depth * f)));
    return taps;
}

void BackboneConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("backbone config: " + m); };
    if (embed_dim == 0 || depth == 0 || heads == 0 || patch_size == 0) fail("dimensions must be positive");
    if (embed_dim % heads != 0) fail("embed_dim " + std::to_string(embed_dim) + " not divisible by heads");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (band_ids.empty()) fail("at least one band required");
    if (std::set<std::string>(band_ids.begin(), band_ids.end()).size() != band_ids.size()) fail("duplicate band id");
    if (image_h == 0 || image_w == 0 || image_h % patch_size || image_w % patch_size) {
        fail("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch size " +
             std::to_string(patch_size));
    }
    const auto t = taps();
    if (t.size() != 4) fail("exactly 4 tap layers required");
    for (std::size_t i = 0; i < 4; ++i) {
        if (t[i] < 1 || t[i] > depth) fail("tap layer " + std::to_string(t[i]) + " out of range [1, " + std::to_string(depth) + "]");
        if (i && t[i] <= t[i - 1]) fail("tap layers must be strictly increasing");
    }
    if (t.back() != depth) fail("last tap layer must equal depth");
}

std::vector<std::size_t> BackboneConfig::taps() const { return tap_layers.empty() ? default_taps(depth) : tap_layers; }

std::size_t BackboneConfig::mlp_dim() const { return static_cast<std::size_t>(std::lround(embed_dim * mlp_ratio)); }

std::vector<double> metadata_features(const Metadata& m) {
    if (!(m.lat >= -90 && m.lat <= 90) || !(m.lon >= -180 && m.lon <= 180)) {
        throw std::invalid_argument("metadata: coordinates out of range (lat " + std::to_string(m.lat) + ", lon " +
                                    std::to_string(m.lon) + ")");
    }
    if (m.day_of_year < 1 || m.day_of_year > 366) throw std::invalid_argument("metadata: day of year out of range");
    constexpr double tau = 2 * std::numbers::pi;
    return {std::sin(tau * m.lat / 360),        std::cos(tau * m.lat / 360),
            std::sin(tau * m.lon / 360),        std::cos(tau * m.lon / 360),
            std::sin(tau * m.day_of_year / 365.25), std::cos(tau * m.day_of_year / 365.25),
            (m.year - 2000) / 10.0};
}

// ------------------------------------------------------------------ blocks

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    const std::size_t b = q.size(0), tq = q.size(1), tk = k.size(1), d = q.size(2), dh = d / heads;
    auto split = [&](const Tensor& x, std::size_t t) {
        return ops::reshape(ops::transpose(ops::reshape(x, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
    };
    auto out = ops::scaled_dot_product_attention(split(q, tq), split(k, tk), split(v, tk));
    return ops::reshape(ops::transpose(ops::reshape(out, {b, heads, tq, dh}), {0, 2, 1, 3}), {b, tq, d});
}

Block Block::make(std::size_t d, std::size_t hidden, Rng& rng) {
    Block blk;
    blk.norm1 = nn::LayerNorm::make(d);
    blk.q = nn::Linear::make(d, d, rng);
    blk.k = nn::Linear::make(d, d, rng);
    blk.v = nn::Linear::make(d, d, rng);
    blk.proj = nn::Linear::make(d, d, rng);
    blk.norm2 = nn::LayerNorm::make(d);
    blk.fc1 = nn::Linear::make(d, hidden, rng);
    blk.fc2 = nn::Linear::make(hidden, d, rng);
    return blk;
}

Tensor Block::forward(const Tensor& x, std::size_t heads) const {
    auto h = norm1.forward(x);
    auto a = multi_head_attention(q.forward(h), k.forward(h), v.forward(h), heads);
    auto y = ops::add(x, proj.forward(a));
    return ops::add(y, fc2.forward(ops::gelu(fc1.forward(norm2.forward(y)))));
}

Block Block::clone() const {
    return {norm1.clone(), q.clone(), k.clone(), v.clone(), proj.clone(), norm2.clone(), fc1.clone(), fc2.clone()};
}

void Block::parameters(ParameterList& out, const std::string& prefix, const std::string& lora_prefix) const {
    norm1.parameters(out, prefix + ".norm1");
    q.parameters(out, prefix + ".attn.q", lora_prefix + ".attn.q");
    k.parameters(out, prefix + ".attn.k", lora_prefix + ".attn.k");
    v.parameters(out, prefix + ".attn.v", lora_prefix + ".attn.v");
    proj.parameters(out, prefix + ".attn.proj", lora_prefix + ".attn.proj");
    norm2.parameters(out, prefix + ".norm2");
    fc1.parameters(out, prefix + ".mlp.fc1", lora_prefix + ".mlp.fc1");
    fc2.parameters(out, prefix + ".mlp.fc2", lora_prefix + ".mlp.fc2");
}

// ---------------------------------------------------------------- backbone

ViTBackbone::ViTBackbone(BackboneConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim, p = cfg_.patch_size;
    const double slab_std = 1.0 / std::sqrt(static_cast<double>(cfg_.band_ids.size() * p * p));
    for (std::size_t i = 0; i < cfg_.band_ids.size(); ++i) band_slabs.push_back(nn::normal_param({d, 1, p, p}, slab_std, rng));
    patch_bias = nn::constant_param({d}, 0.0f);
    pos_embed = nn::normal_param({cfg_.num_tokens(), d}, 0.02, rng);
    if (cfg_.metadata_enabled) meta_proj = nn::Linear::make(7, d, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) blocks.push_back(Block::make(d, cfg_.mlp_dim(), rng));
    norm = nn::LayerNorm::make(d);
}

std::size_t ViTBackbone::band_index(const std::string& id) const {
    auto it = std::find(cfg_.band_ids.begin(), cfg_.band_ids.end(), id);
    if (it == cfg_.band_ids.end()) throw std::invalid_argument("unknown band id '" + id + "'");
    return static_cast<std::size_t>(it - cfg_.band_ids.begin());
}

Tensor ViTBackbone::embed_patches(const Tensor& images, const std::vector<std::string>& bands) const {
    if (images.dim() != 4) throw ShapeError("embed_patches: expected [B, C, H, W], got " + shape_str(images.shape()));
    if (bands.empty() || images.size(1) != bands.size()) {
        throw ShapeError("embed_patches: " + std::to_string(images.size(1)) + " channels but " +
                         std::to_string(bands.size()) + " band ids");
    }
    const std::size_t p = cfg_.patch_size, h = images.size(2), w = images.size(3);
    if (h % p || w % p) {
        throw ShapeError("embed_patches: extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch size " + std::to_string(p) + "; pad first");
    }
    if (h / p != cfg_.grid_h() || w / p != cfg_.grid_w()) {
        throw ShapeError("embed_patches: patch grid " + std::to_string(h / p) + "x" + std::to_string(w / p) +
                         " does not match the positional table " + std::to_string(cfg_.grid_h()) + "x" +
                         std::to_string(cfg_.grid_w()));
    }
    std::vector<Tensor> slabs;
    std::set<std::size_t> seen;
    for (const auto& id : bands) {
        const auto idx = band_index(id);
        if (!seen.insert(idx).second) throw std::invalid_argument("band id '" + id + "' given twice");
        slabs.push_back(band_slabs[idx]);
    }
    auto kernel = slabs.size() == 1 ? slabs[0] : ops::concat(slabs, 1);
    auto grid = ops::bias_add(ops::conv2d(images, kernel, {p, 0}), patch_bias, 1);
    return ops::add(nn::map_to_tokens(grid), pos_embed);
}

Tensor ViTBackbone::encode_metadata(const std::vector<Metadata>& meta) const {
    std::vector<float> feats;
    for (const auto& m : meta) {
        for (double f : metadata_features(m)) feats.push_back(static_cast<float>(f));
    }
    if (!cfg_.metadata_enabled) return Tensor::zeros({meta.size(), cfg_.embed_dim});
    return meta_proj.forward(Tensor::from_data({meta.size(), 7}, std::move(feats)));
}

EncoderOutput ViTBackbone::forward_features(const Tensor& tokens, const VitAdapter::Prior* prior) const {
    if (tokens.dim() != 3 || tokens.size(2) != cfg_.embed_dim) {
        throw ShapeError("forward_features: expected [B, N, " + std::to_string(cfg_.embed_dim) + "], got " +
                         shape_str(tokens.shape()));
    }
    if (adapter && !prior) throw std::invalid_argument("forward_features: adapter attached but no spatial prior given");
    if (!prompts.empty() && prompts.size() != blocks.size()) {
        throw std::invalid_argument("forward_features: prompt blocks do not match depth");
    }
    const auto taps = cfg_.taps();
    for (auto t : taps) {
        if (t < 1 || t > blocks.size()) throw std::out_of_range("tap layer " + std::to_string(t) + " out of range");
    }
    const std::size_t batch = tokens.size(0), n = tokens.size(1);
    Tensor context = prior ? prior->tokens : Tensor();
    std::vector<Tensor> tapped;
    Tensor x = tokens;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::size_t layer = i + 1;
        if (adapter) {
            const auto& inj = adapter->injection_layers;
            auto it = std::find(inj.begin(), inj.end(), layer);
            if (it != inj.end()) x = adapter->injectors[it - inj.begin()].forward(x, context, cfg_.heads);
        }
        if (!prompts.empty()) {
            const std::size_t np = prompts[i].size(0);
            auto joined = ops::concat<float>({nn::broadcast_batch(prompts[i], batch), x}, 1);
            x = ops::slice(blocks[i].forward(joined, cfg_.heads), 1, np, np + n);
        } else {
            x = blocks[i].forward(x, cfg_.heads);
        }
        if (layer == blocks.size()) x = norm.forward(x);
        if (std::find(taps.begin(), taps.end(), layer) != taps.end()) tapped.push_back(x);
    }
    EncoderOutput out;
    out.tokens = x;
    for (const auto& t : tapped) out.taps.push_back(nn::tokens_to_map(t, cfg_.grid_h(), cfg_.grid_w()));
    if (adapter) {
        context = adapter->extractor.forward(context, x, cfg_.heads);
        out.adapter_pyramid = adapter->pyramid(context, *prior);
        for (std::size_t j = 0; j < out.adapter_pyramid.size(); ++j) {
            auto level = ops::bilinear_interpolate(out.adapter_pyramid[j], cfg_.grid_h(), cfg_.grid_w());
            out.taps[j + 1] = ops::add(out.taps[j + 1], level);
        }
    }
    return out;
}

EncoderOutput ViTBackbone::forward(const Tensor& images, const std::vector<std::string>& bands,
                                   const std::vector<Metadata>* meta) const {
    auto tokens = embed_patches(images, bands);
    if (cfg_.metadata_enabled) {
        if (!meta || meta->size() != images.size(0)) {
            throw std::invalid_argument("metadata enabled: one metadata record per image required");
        }
        const std::size_t b = images.size(0), n = tokens.size(1);
        auto m = ops::reshape(encode_metadata(*meta), {b, 1, cfg_.embed_dim});
        tokens = ops::add(tokens, ops::matmul(Tensor::full({b, n, 1}, 1.0f), m));
    }
    if (!adapter) return forward_features(tokens);
    std::vector<std::size_t> channels;
    for (const auto& id : bands) channels.push_back(band_index(id));
    const auto prior = adapter->spatial_prior(images, channels);
    return forward_features(tokens, &prior);
}

Tensor ViTBackbone::image_embedding(const Tensor& images, const std::vector<std::string>& bands,
                                    const std::vector<Metadata>* meta) const {
    return ops::mean_axis(forward(images, bands, meta).tokens, 1);
}

ViTBackbone ViTBackbone::clone() const {
    ViTBackbone b;
    b.cfg_ = cfg_;
    for (const auto& s : band_slabs) b.band_slabs.push_back(nn::copy_param(s));
    b.patch_bias = nn::copy_param(patch_bias);
    b.pos_embed = nn::copy_param(pos_embed);
    if (meta_proj.weight.defined()) b.meta_proj = meta_proj.clone();
    for (const auto& blk : blocks) b.blocks.push_back(blk.clone());
    b.norm = norm.clone();
    for (const auto& p : prompts) b.prompts.push_back(nn::copy_param(p));
    if (adapter) b.adapter = std::make_shared<VitAdapter>(adapter->clone());
    return b;
}

ParameterList ViTBackbone::parameters() const {
    ParameterList out;
    for (std::size_t i = 0; i < band_slabs.size(); ++i) {
        nn::add_param(out, "encoder.patch_embed.band." + cfg_.band_ids[i], band_slabs[i]);
    }
    nn::add_param(out, "encoder.patch_embed.bias", patch_bias);
    nn::add_param(out, "encoder.pos_embed", pos_embed);
    if (meta_proj.weight.defined()) meta_proj.parameters(out, "encoder.meta_proj", "lora.meta_proj");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].parameters(out, "encoder.blocks." + std::to_string(i), "lora.blocks." + std::to_string(i));
    }
    norm.parameters(out, "encoder.norm");
    for (std::size_t i = 0; i < prompts.size(); ++i) nn::add_param(out, "vpt.prompts." + std::to_string(i), prompts[i]);
    if (adapter) adapter->parameters(out, "adapter");
    return out;
}

}  // namespace geopeft
