#include <doctest.h>

#include <set>

#include "fixtures.hpp"

using namespace geopeft;
using testing::max_abs_diff;

namespace {

std::vector<Tensor> random_maps(Rng& rng, std::size_t n, std::size_t d, std::size_t g) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tensor<float>(rng, {1, d, g, g}));
    return out;
}

}  // namespace

TEST_CASE("neck produces the 4x, 2x, 1x, 1/2x pyramid") {
    Rng rng(1);
    auto neck = Neck::make(16, rng);
    auto pyr = neck.forward(random_maps(rng, 4, 16, 8));
    REQUIRE(pyr.size() == 4);
    CHECK(pyr[0].shape() == Shape{1, 4, 32, 32});
    CHECK(pyr[1].shape() == Shape{1, 8, 16, 16});
    CHECK(pyr[2].shape() == Shape{1, 16, 8, 8});
    CHECK(pyr[3].shape() == Shape{1, 16, 4, 4});
    CHECK_THROWS_AS(neck.forward(random_maps(rng, 3, 16, 8)), std::invalid_argument);
    auto mixed = random_maps(rng, 4, 16, 8);
    mixed[2] = testing::random_tensor<float>(rng, {1, 16, 4, 4});
    CHECK_THROWS_AS(neck.forward(mixed), ShapeError);
}

TEST_CASE("neck weights receive gradient under linear probing") {
    ModelConfig mc;
    mc.backbone = testing::tiny_backbone();
    mc.decoder.kind = DecoderKind::UperNet;
    SegmentationModel m(mc, 3);
    auto params = m.parameters();
    apply_freeze_policy(params, FreezePolicy::LinearProbe);
    Rng rng(2);
    auto x = testing::random_tensor<float>(rng, {2, 6, 32, 32});
    backward(ops::cross_entropy(m.forward(x, mc.backbone.band_ids, nullptr, true), Tensor::zeros({2, 32, 32})));
    for (const auto& p : params) {
        if (p.name.rfind("neck.", 0) != 0 || p.name.find("weight") == std::string::npos) continue;
        double g = 0;
        for (float v : p.tensor.grad()) g += std::abs(v);
        INFO(p.name);
        CHECK(g > 0);
    }
    for (const auto& p : params) {
        if (p.name.rfind("encoder.", 0) == 0) CHECK_FALSE(p.tensor.has_grad());
    }
}

TEST_CASE("linear decoder is one transposed conv to full resolution") {
    Rng rng(3);
    DecoderConfig cfg;
    cfg.num_classes = 7;
    Decoder dec(cfg, 32, 16, rng);
    auto feat = testing::random_tensor<float>(rng, {1, 32, 8, 8});
    auto y = dec.forward({feat}, 128, 128, false);
    CHECK(y.shape() == Shape{1, 7, 128, 128});
    // Graph between features and logits holds no nonlinearity.
    feat.set_requires_grad(true);
    auto z = dec.forward({feat}, 128, 128, false);
    std::set<std::string> seen;
    for (auto* n : topological_order(ops::sum(z))) seen.insert(n->op);
    for (const auto& op : seen) CHECK((op == "leaf" || op == "conv_transpose2d" || op == "bias_add" || op == "sum"));
    CHECK(seen.count("conv_transpose2d") == 1);
    CHECK_THROWS_AS(dec.forward(random_maps(rng, 4, 32, 8), 128, 128, false), std::invalid_argument);
}

TEST_CASE("fcn depth follows log2 of the patch size") {
    Rng rng(4);
    DecoderConfig cfg;
    cfg.kind = DecoderKind::Fcn;
    cfg.fcn_hidden = 8;
    Decoder dec(cfg, 16, 16, rng);
    ParameterList ps;
    dec.parameters(ps, "decoder");
    std::set<std::string> blocks;
    for (const auto& p : ps) {
        if (p.name.rfind("decoder.blocks.", 0) == 0) blocks.insert(p.name.substr(0, 16));
    }
    CHECK(blocks.size() == 4);
    CHECK(dec.forward({testing::random_tensor<float>(rng, {1, 16, 2, 2})}, 32, 32, false).shape() == Shape{1, 2, 32, 32});
    DecoderConfig odd = cfg;
    CHECK_THROWS_AS(Decoder(odd, 16, 12, rng), std::invalid_argument);
}

TEST_CASE("unet skip connections are load-bearing") {
    Rng rng(5);
    DecoderConfig cfg;
    cfg.kind = DecoderKind::UNet;
    cfg.unet_widths = {16, 8, 8, 4};
    Decoder dec(cfg, 16, 8, rng);
    auto neck = Neck::make(16, rng);
    auto pyr = neck.forward(random_maps(rng, 4, 16, 4));
    auto y = dec.forward(pyr, 32, 32, false);
    CHECK(y.shape() == Shape{1, 2, 32, 32});
    pyr[0] = Tensor::zeros(pyr[0].shape());
    CHECK(max_abs_diff(dec.forward(pyr, 32, 32, false), y) > 0);
    CHECK_THROWS_AS(dec.forward({pyr[3]}, 32, 32, false), std::invalid_argument);
}

TEST_CASE("global pyramid pooling ignores spatial order") {
    Rng rng(6);
    DecoderConfig cfg;
    cfg.kind = DecoderKind::UperNet;
    cfg.upernet_channels = 8;
    Decoder dec(cfg, 16, 8, rng);
    auto top = testing::random_tensor<float>(rng, {2, 16, 4, 4});
    auto v = top.to_vector();
    // Reverse each plane.
    for (std::size_t p = 0; p < 32; ++p) std::reverse(v.begin() + p * 16, v.begin() + (p + 1) * 16);
    auto flipped = Tensor::from_data(top.shape(), v);
    CHECK(max_abs_diff(dec.ppm_branch(top, 0, true), dec.ppm_branch(flipped, 0, true)) <= 1e-6);
}

TEST_CASE("decoder output extent equals the input extent") {
    Rng rng(7);
    for (auto kind : {DecoderKind::Linear, DecoderKind::Fcn, DecoderKind::UperNet, DecoderKind::UNet}) {
        for (int trial = 0; trial < 3; ++trial) {
            const std::size_t p = trial == 0 ? 4 : 8;
            const std::size_t gh = 2 * (1 + rng.index(3)), gw = 2 * (1 + rng.index(3));
            ModelConfig mc;
            mc.backbone = testing::tiny_backbone(2, 8, p);
            mc.backbone.embed_dim = 16;
            mc.backbone.image_h = gh * p;
            mc.backbone.image_w = gw * p;
            mc.decoder.kind = kind;
            mc.decoder.num_classes = 3;
            mc.decoder.fcn_hidden = 8;
            mc.decoder.upernet_channels = 8;
            mc.decoder.unet_widths = {8, 8, 4, 4};
            SegmentationModel m(mc, trial);
            auto x = testing::random_tensor<float>(rng, {1, 2, gh * p, gw * p});
            INFO(to_string(kind) << " " << gh * p << "x" << gw * p);
            CHECK(m.forward(x, mc.backbone.band_ids, nullptr, false).shape() == Shape{1, 3, gh * p, gw * p});
        }
    }
}

TEST_CASE("decoder parameter estimates") {
    DecoderConfig lin;
    CHECK(estimate_decoder_params(lin, 64, 8) == 8194);
    lin.num_classes = 1;
    CHECK_THROWS_AS(estimate_decoder_params(lin, 64, 8), std::invalid_argument);
    DecoderConfig fcn;
    fcn.kind = DecoderKind::Fcn;
    std::size_t prev = 0;
    for (std::size_t h : {8, 16, 32, 64, 128}) {
        fcn.fcn_hidden = h;
        const auto n = estimate_decoder_params(fcn, 64, 8);
        CHECK(n > prev);
        prev = n;
    }
    // Estimates agree with the built modules.
    for (auto kind : {DecoderKind::Linear, DecoderKind::Fcn, DecoderKind::UperNet, DecoderKind::UNet}) {
        DecoderConfig cfg;
        cfg.kind = kind;
        cfg.num_classes = 5;
        Rng rng(1);
        Decoder dec(cfg, 64, 8, rng);
        ParameterList ps;
        dec.parameters(ps, "decoder");
        CHECK(count_parameters(ps).total == estimate_decoder_params(cfg, 64, 8));
    }
    Rng rng(2);
    ParameterList ps;
    Neck::make(64, rng).parameters(ps, "neck");
    CHECK(count_parameters(ps).total == neck_parameter_count(64));
}

TEST_CASE("model parameters round-trip through a checkpoint") {
    ModelConfig mc;
    mc.backbone = testing::tiny_backbone();
    mc.decoder.kind = DecoderKind::UNet;
    mc.decoder.unet_widths = {8, 8, 4, 4};
    mc.lora = LoraConfig{2};
    SegmentationModel a(mc, 1);
    SegmentationModel b(mc, 2);
    const auto dir = std::filesystem::temp_directory_path() / "geopeft_model_ckpt";
    save_checkpoint(dir, a.parameters());
    auto pb = b.parameters();
    CHECK(restore_parameters(pb, load_checkpoint(dir)) == pb.size());
    Rng rng(3);
    auto x = testing::random_tensor<float>(rng, {1, 6, 32, 32});
    CHECK(max_abs_diff(a.forward(x, mc.backbone.band_ids, nullptr, false), b.forward(x, mc.backbone.band_ids, nullptr, false)) == 0.0);
    std::filesystem::remove_all(dir);
}
