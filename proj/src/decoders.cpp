#include "geopeft/decoders.hpp"

#include <stdexcept>

namespace geopeft {

std::string to_string(DecoderKind k) {
    switch (k) {
        case DecoderKind::Linear: return "linear";
        case DecoderKind::Fcn: return "fcn";
        case DecoderKind::UperNet: return "upernet";
        case DecoderKind::UNet: return "unet";
    }
    return "?";
}

DecoderKind parse_decoder_kind(const std::string& s) {
    if (s == "linear") return DecoderKind::Linear;
    if (s == "fcn") return DecoderKind::Fcn;
    if (s == "upernet") return DecoderKind::UperNet;
    if (s == "unet") return DecoderKind::UNet;
    throw std::invalid_argument("unknown decoder kind '" + s + "'");
}

void DecoderConfig::validate() const {
    if (num_classes < 2) throw std::invalid_argument("decoder: num_classes must be >= 2");
    if (fcn_hidden == 0 || upernet_channels == 0) throw std::invalid_argument("decoder: widths must be positive");
    if (ppm_scales.empty()) throw std::invalid_argument("decoder: ppm needs at least one pooling scale");
    for (auto s : ppm_scales) {
        if (s == 0) throw std::invalid_argument("decoder: ppm scale must be positive");
    }
    if (unet_widths.size() != 4) throw std::invalid_argument("decoder: unet needs 4 stage widths");
    for (auto w : unet_widths) {
        if (w == 0) throw std::invalid_argument("decoder: unet widths must be positive");
    }
}

namespace {

bool power_of_two(std::size_t p) { return p && !(p & (p - 1)); }

std::size_t log2_exact(std::size_t p) {
    std::size_t n = 0;
    while (p > 1) {
        p >>= 1;
        ++n;
    }
    return n;
}

std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k, bool bias) {
    return in * out * k * k + (bias ? out : 0);
}

std::size_t cbr_count(std::size_t in, std::size_t out, std::size_t k) { return conv_count(in, out, k, false) + 2 * out; }

}  // namespace

// -------------------------------------------------------------------- neck

std::vector<std::size_t> Neck::widths(std::size_t d) { return {d / 4, d / 2, d, d}; }

Neck Neck::make(std::size_t d, Rng& rng) {
    if (d % 4) throw std::invalid_argument("neck: embed dim must be divisible by 4");
    Neck n;
    n.up1a = nn::Conv::make_transposed(d, d / 2, 2, 2, rng);
    n.up1b = nn::Conv::make_transposed(d / 2, d / 4, 2, 2, rng);
    n.up2 = nn::Conv::make_transposed(d, d / 2, 2, 2, rng);
    n.down4 = nn::Conv::make(d, d, 2, {2, 0}, rng);
    return n;
}

std::vector<Tensor> Neck::forward(const std::vector<Tensor>& taps) const {
    if (taps.size() != 4) throw std::invalid_argument("neck: expected 4 tapped maps, got " + std::to_string(taps.size()));
    for (const auto& t : taps) {
        if (t.shape() != taps[0].shape()) {
            throw ShapeError("neck: tapped maps differ in extent: " + shape_str(t.shape()) + " vs " +
                             shape_str(taps[0].shape()));
        }
    }
    if (taps[0].size(2) % 2 || taps[0].size(3) % 2) throw ShapeError("neck: patch grid must have even extent");
    return {up1b.forward(ops::gelu(up1a.forward(taps[0]))), up2.forward(taps[1]), taps[2], down4.forward(taps[3])};
}

Neck Neck::clone() const { return {up1a.clone(), up1b.clone(), up2.clone(), down4.clone()}; }

void Neck::parameters(ParameterList& out, const std::string& prefix) const {
    up1a.parameters(out, prefix + ".up1a");
    up1b.parameters(out, prefix + ".up1b");
    up2.parameters(out, prefix + ".up2");
    down4.parameters(out, prefix + ".down4");
}

std::size_t neck_parameter_count(std::size_t d) {
    return conv_count(d, d / 2, 2, true) + conv_count(d / 2, d / 4, 2, true) + conv_count(d, d / 2, 2, true) +
           conv_count(d, d, 2, true);
}

// ----------------------------------------------------------------- decoder

Decoder::Decoder(DecoderConfig cfg, std::size_t d, std::size_t p, Rng& rng)
    : cfg_(std::move(cfg)), embed_dim_(d), patch_size_(p) {
    cfg_.validate();
    const std::size_t k = cfg_.num_classes;
    switch (cfg_.kind) {
        case DecoderKind::Linear:
            linear_up = nn::Conv::make_transposed(d, k, p, p, rng);
            break;
        case DecoderKind::Fcn: {
            if (!power_of_two(p)) throw std::invalid_argument("fcn decoder: patch size must be a power of two");
            const std::size_t h = cfg_.fcn_hidden;
            for (std::size_t i = 0; i < log2_exact(p); ++i) {
                fcn_blocks.push_back({nn::Conv::make_transposed(i ? h : d, h, 2, 2, rng),
                                      nn::Conv::make(h, h, 3, {1, 1}, rng), nn::LayerNorm::make(h, 1e-6)});
            }
            classifier = nn::Conv::make(fcn_blocks.empty() ? d : h, k, 1, {}, rng);
            break;
        }
        case DecoderKind::UperNet: {
            const auto w = Neck::widths(d);
            const std::size_t c = cfg_.upernet_channels;
            for (std::size_t i = 0; i < cfg_.ppm_scales.size(); ++i) ppm.push_back(nn::ConvBnRelu::make(w[3], c, 1, rng));
            ppm_bottleneck = nn::ConvBnRelu::make(w[3] + cfg_.ppm_scales.size() * c, c, 3, rng);
            for (std::size_t i = 0; i < 3; ++i) laterals.push_back(nn::ConvBnRelu::make(w[i], c, 1, rng));
            for (std::size_t i = 0; i < 3; ++i) fpn.push_back(nn::ConvBnRelu::make(c, c, 3, rng));
            fuse = nn::ConvBnRelu::make(4 * c, c, 3, rng);
            classifier = nn::Conv::make(c, k, 1, {}, rng);
            break;
        }
        case DecoderKind::UNet: {
            const auto w = Neck::widths(d);
            const auto& u = cfg_.unet_widths;
            const std::size_t in[4] = {w[3] + w[2], u[0] + w[1], u[1] + w[0], u[2]};
            for (std::size_t i = 0; i < 4; ++i) {
                unet.push_back({nn::ConvBnRelu::make(in[i], u[i], 3, rng), nn::ConvBnRelu::make(u[i], u[i], 3, rng)});
            }
            classifier = nn::Conv::make(u[3], k, 1, {}, rng);
            break;
        }
    }
}

Tensor Decoder::ppm_branch(const Tensor& top, std::size_t index, bool training) {
    const std::size_t s = cfg_.ppm_scales.at(index);
    auto pooled = ppm[index].forward(ops::adaptive_avg_pool2d(top, s, s), training);
    return ops::bilinear_interpolate(pooled, top.size(2), top.size(3));
}

Tensor Decoder::forward(const std::vector<Tensor>& features, std::size_t out_h, std::size_t out_w, bool training) {
    auto expect_extent = [&](const Tensor& y) {
        if (y.size(2) != out_h || y.size(3) != out_w) {
            throw ShapeError("decoder " + to_string(cfg_.kind) + ": produced " + shape_str(y.shape()) + " for target " +
                             std::to_string(out_h) + "x" + std::to_string(out_w));
        }
        return y;
    };
    if (cfg_.needs_pyramid()) {
        if (features.size() != 4) {
            throw std::invalid_argument("decoder " + to_string(cfg_.kind) + " requires the 4-level pyramid");
        }
    } else if (features.size() != 1) {
        throw std::invalid_argument("decoder " + to_string(cfg_.kind) + " takes only the final tapped map");
    }
    switch (cfg_.kind) {
        case DecoderKind::Linear:
            return expect_extent(linear_up.forward(features[0]));
        case DecoderKind::Fcn: {
            auto x = features[0];
            for (const auto& b : fcn_blocks) x = ops::gelu(b.norm.forward_channels(b.conv.forward(b.up.forward(x))));
            return expect_extent(classifier.forward(x));
        }
        case DecoderKind::UperNet: {
            const auto& top = features[3];
            std::vector<Tensor> parts{top};
            for (std::size_t i = 0; i < ppm.size(); ++i) parts.push_back(ppm_branch(top, i, training));
            std::vector<Tensor> f(4);
            f[3] = ppm_bottleneck.forward(ops::concat(parts, 1), training);
            for (int i = 2; i >= 0; --i) {
                auto lat = laterals[i].forward(features[i], training);
                f[i] = ops::add(lat, ops::bilinear_interpolate(f[i + 1], lat.size(2), lat.size(3)));
            }
            for (std::size_t i = 0; i < 3; ++i) f[i] = fpn[i].forward(f[i], training);
            const std::size_t h0 = f[0].size(2), w0 = f[0].size(3);
            for (std::size_t i = 1; i < 4; ++i) f[i] = ops::bilinear_interpolate(f[i], h0, w0);
            auto y = classifier.forward(fuse.forward(ops::concat(f, 1), training));
            return expect_extent(ops::bilinear_interpolate(y, out_h, out_w));
        }
        case DecoderKind::UNet: {
            auto x = features[3];
            for (std::size_t i = 0; i < 4; ++i) {
                if (i < 3) {
                    const auto& skip = features[2 - i];
                    x = ops::concat<float>({ops::bilinear_interpolate(x, skip.size(2), skip.size(3)), skip}, 1);
                } else {
                    x = ops::bilinear_interpolate(x, out_h, out_w);
                }
                x = unet[i].b.forward(unet[i].a.forward(x, training), training);
            }
            return expect_extent(classifier.forward(x));
        }
    }
    throw std::logic_error("unreachable decoder kind");
}

Decoder Decoder::clone() const {
    Decoder d;
    d.cfg_ = cfg_;
    d.embed_dim_ = embed_dim_;
    d.patch_size_ = patch_size_;
    if (linear_up.weight.defined()) d.linear_up = linear_up.clone();
    for (const auto& b : fcn_blocks) d.fcn_blocks.push_back({b.up.clone(), b.conv.clone(), b.norm.clone()});
    if (classifier.weight.defined()) d.classifier = classifier.clone();
    for (const auto& m : ppm) d.ppm.push_back(m.clone());
    if (ppm_bottleneck.conv.weight.defined()) d.ppm_bottleneck = ppm_bottleneck.clone();
    for (const auto& m : laterals) d.laterals.push_back(m.clone());
    for (const auto& m : fpn) d.fpn.push_back(m.clone());
    if (fuse.conv.weight.defined()) d.fuse = fuse.clone();
    for (const auto& s : unet) d.unet.push_back({s.a.clone(), s.b.clone()});
    return d;
}

void Decoder::parameters(ParameterList& out, const std::string& prefix) const {
    if (linear_up.weight.defined()) linear_up.parameters(out, prefix + ".up");
    for (std::size_t i = 0; i < fcn_blocks.size(); ++i) {
        const auto p = prefix + ".blocks." + std::to_string(i);
        fcn_blocks[i].up.parameters(out, p + ".up");
        fcn_blocks[i].conv.parameters(out, p + ".conv");
        fcn_blocks[i].norm.parameters(out, p + ".norm");
    }
    for (std::size_t i = 0; i < ppm.size(); ++i) ppm[i].parameters(out, prefix + ".ppm." + std::to_string(i));
    if (ppm_bottleneck.conv.weight.defined()) ppm_bottleneck.parameters(out, prefix + ".ppm_bottleneck");
    for (std::size_t i = 0; i < laterals.size(); ++i) laterals[i].parameters(out, prefix + ".lateral." + std::to_string(i));
    for (std::size_t i = 0; i < fpn.size(); ++i) fpn[i].parameters(out, prefix + ".fpn." + std::to_string(i));
    if (fuse.conv.weight.defined()) fuse.parameters(out, prefix + ".fuse");
    for (std::size_t i = 0; i < unet.size(); ++i) {
        unet[i].a.parameters(out, prefix + ".unet." + std::to_string(i) + ".a");
        unet[i].b.parameters(out, prefix + ".unet." + std::to_string(i) + ".b");
    }
    if (classifier.weight.defined()) classifier.parameters(out, prefix + ".classifier");
}

std::size_t estimate_decoder_params(const DecoderConfig& cfg, std::size_t d, std::size_t p) {
    cfg.validate();
    const std::size_t k = cfg.num_classes;
    switch (cfg.kind) {
        case DecoderKind::Linear:
            return conv_count(d, k, p, true);
        case DecoderKind::Fcn: {
            if (!power_of_two(p)) throw std::invalid_argument("fcn decoder: patch size must be a power of two");
            const std::size_t h = cfg.fcn_hidden, n = log2_exact(p);
            std::size_t total = 0;
            for (std::size_t i = 0; i < n; ++i) total += conv_count(i ? h : d, h, 2, true) + conv_count(h, h, 3, true) + 2 * h;
            return total + conv_count(n ? h : d, k, 1, true);
        }
        case DecoderKind::UperNet: {
            const auto w = Neck::widths(d);
            const std::size_t c = cfg.upernet_channels;
            std::size_t total = cfg.ppm_scales.size() * cbr_count(w[3], c, 1);
            total += cbr_count(w[3] + cfg.ppm_scales.size() * c, c, 3);
            for (std::size_t i = 0; i < 3; ++i) total += cbr_count(w[i], c, 1) + cbr_count(c, c, 3);
            return total + cbr_count(4 * c, c, 3) + conv_count(c, k, 1, true);
        }
        case DecoderKind::UNet: {
            const auto w = Neck::widths(d);
            const auto& u = cfg.unet_widths;
            const std::size_t in[4] = {w[3] + w[2], u[0] + w[1], u[1] + w[0], u[2]};
            std::size_t total = 0;
            for (std::size_t i = 0; i < 4; ++i) total += cbr_count(in[i], u[i], 3) + cbr_count(u[i], u[i], 3);
            return total + conv_count(u[3], k, 1, true);
        }
    }
    return 0;
}

}  // namespace geopeft
