#include <doctest.h>

#include "fixtures.hpp"

using namespace geopeft;
using testing::max_abs_diff;
using testing::tiny_backbone;

namespace {

BackboneConfig vit_b() {
    BackboneConfig c;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.band_ids = testing::band_list(6);
    return c;
}

BackboneConfig vit_l() {
    auto c = vit_b();
    c.embed_dim = 1024;
    c.depth = 24;
    c.heads = 16;
    return c;
}

ParameterReport meta_report(const BackboneConfig& cfg, const std::function<void(ViTBackbone&, Rng&)>& attach) {
    MetaScope scope;
    Rng rng(0);
    ViTBackbone b(cfg, rng);
    attach(b, rng);
    return count_parameters(b.parameters());
}

}  // namespace

TEST_CASE("LoRA leaves the forward unchanged at attachment") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto cfg = tiny_backbone();
        ViTBackbone base(cfg, rng);
        auto adapted = base.clone();
        attach_lora(adapted, {4}, rng);
        auto x = testing::random_tensor<float>(rng, {1, 6, 32, 32});
        CHECK(max_abs_diff(base.forward(x, cfg.band_ids).tokens, adapted.forward(x, cfg.band_ids).tokens) <= 1e-6);
    }
}

TEST_CASE("LoRA parameter counts") {
    LoraConfig lora;
    auto rb = meta_report(vit_b(), [&](ViTBackbone& b, Rng& r) { attach_lora(b, lora, r); });
    CHECK(rb.group("lora") == 2064384);
    CHECK(lora_parameter_count(vit_b(), lora) == 2064384);
    auto rl = meta_report(vit_l(), [&](ViTBackbone& b, Rng& r) { attach_lora(b, lora, r); });
    CHECK(rl.group("lora") == 5505024);
    CHECK(lora_parameter_count(vit_l(), lora) == 5505024);
    // A square target contributes 2 d r.
    LoraConfig q_only;
    q_only.targets = {LoraTarget::Query};
    CHECK(lora_parameter_count(vit_b(), q_only) == 12u * 2 * 768 * 16);
}

TEST_CASE("LoRA rejects rank 0 and empty targets") {
    Rng rng(1);
    ViTBackbone b(tiny_backbone(), rng);
    CHECK_THROWS_AS(attach_lora(b, {0}, rng), std::invalid_argument);
    LoraConfig none;
    none.targets.clear();
    CHECK_THROWS_AS(attach_lora(b, none, rng), std::invalid_argument);
    CHECK_THROWS_AS(parse_lora_target("k"), std::invalid_argument);
}

TEST_CASE("merging untrained adapters reproduces the base weights bitwise") {
    Rng rng(2);
    auto cfg = tiny_backbone();
    ViTBackbone base(cfg, rng);
    auto adapted = base.clone();
    attach_lora(adapted, {4}, rng);
    auto merged = merge_lora(adapted);
    auto pb = base.parameters(), pm = merged.parameters();
    REQUIRE(pb.size() == pm.size());
    for (std::size_t i = 0; i < pb.size(); ++i) {
        CHECK(pb[i].name == pm[i].name);
        CHECK(pb[i].tensor.to_vector() == pm[i].tensor.to_vector());
    }
    auto twice = merge_lora(merged);
    auto pt = twice.parameters();
    for (std::size_t i = 0; i < pt.size(); ++i) CHECK(pt[i].tensor.to_vector() == pm[i].tensor.to_vector());
}

TEST_CASE("merge matches the adapter forward with nonzero B") {
    Rng rng(3);
    auto cfg = tiny_backbone();
    ViTBackbone adapted(cfg, rng);
    attach_lora(adapted, {4}, rng);
    for (auto& blk : adapted.blocks) {
        for (auto* l : {&blk.q, &blk.v, &blk.fc1, &blk.fc2}) {
            for (auto& v : l->lora_b.mutable_data()) v = static_cast<float>(rng.normal(0, 0.05));
        }
    }
    auto merged = merge_lora(adapted);
    for (auto& blk : merged.blocks) CHECK_FALSE(blk.q.has_lora());
    auto x = testing::random_tensor<float>(rng, {2, 6, 32, 32});
    CHECK(max_abs_diff(adapted.forward(x, cfg.band_ids).tokens, merged.forward(x, cfg.band_ids).tokens) <= 1e-5);
}

TEST_CASE("VPT parameter counts and validation") {
    VptConfig vpt;
    CHECK(meta_report(vit_b(), [&](ViTBackbone& b, Rng& r) { attach_vpt(b, vpt, r); }).group("vpt") == 921600);
    CHECK(meta_report(vit_l(), [&](ViTBackbone& b, Rng& r) { attach_vpt(b, vpt, r); }).group("vpt") == 2457600);
    CHECK(vpt_parameter_count(vit_l(), vpt) == 2457600);
    Rng rng(4);
    ViTBackbone b(tiny_backbone(), rng);
    CHECK_THROWS_AS(attach_vpt(b, {0}, rng), std::invalid_argument);
    attach_vpt(b, {3}, rng);
    REQUIRE(b.prompts.size() == 4);
    for (float v : b.prompts[0].data()) CHECK(std::abs(v) <= 0.1f);
}

TEST_CASE("encoder sizes match the closed form and Table-3 scale") {
    auto rb = meta_report(vit_b(), [](ViTBackbone&, Rng&) {});
    auto rl = meta_report(vit_l(), [](ViTBackbone&, Rng&) {});
    CHECK(rb.encoder == encoder_parameter_count(vit_b()));
    CHECK(rl.encoder == encoder_parameter_count(vit_l()));
    CHECK(std::lround(rb.encoder / 1e6) == 86);
    CHECK(std::lround(rl.encoder / 1e6) == 304);
    CHECK(rb.trainable_fraction == 0.0);  // nothing marked yet
}

TEST_CASE("ViT-Adapter is an identity on the token stream at attachment") {
    Rng rng(5);
    auto cfg = tiny_backbone(6, 64, 8);
    ViTBackbone base(cfg, rng);
    auto adapted = base.clone();
    attach_vit_adapter(adapted, {}, rng);
    auto x = testing::random_tensor<float>(rng, {1, 6, 64, 64});
    auto out = adapted.forward(x, cfg.band_ids);
    CHECK(max_abs_diff(base.forward(x, cfg.band_ids).tokens, out.tokens) <= 1e-6);
    REQUIRE(out.adapter_pyramid.size() == 3);
    CHECK(out.adapter_pyramid[0].shape() == Shape{1, cfg.embed_dim, 8, 8});
    CHECK(out.adapter_pyramid[1].shape() == Shape{1, cfg.embed_dim, 4, 4});
    CHECK(out.adapter_pyramid[2].shape() == Shape{1, cfg.embed_dim, 2, 2});
}

TEST_CASE("ViT-Adapter size and validation") {
    auto rl = meta_report(vit_l(), [](ViTBackbone& b, Rng& r) { attach_vit_adapter(b, {}, r); });
    const double frac = double(rl.group("adapter")) / rl.encoder;
    CHECK(frac >= 0.05);
    CHECK(frac <= 0.15);
    Rng rng(6);
    ViTBackbone b(tiny_backbone(), rng);
    VitAdapterConfig bad;
    bad.pyramid_strides = {8, 16};
    CHECK_THROWS_AS(attach_vit_adapter(b, bad, rng), std::invalid_argument);
    bad = {};
    bad.injection_layers = {0, 2};
    CHECK_THROWS_AS(attach_vit_adapter(b, bad, rng), std::invalid_argument);
    bad.injection_layers = {5};
    CHECK_THROWS_AS(attach_vit_adapter(b, bad, rng), std::invalid_argument);
}

TEST_CASE("freeze policies select the documented trainable sets") {
    Rng rng(7);
    ModelConfig mc;
    mc.backbone = tiny_backbone();
    mc.decoder.kind = DecoderKind::UperNet;
    SegmentationModel plain(mc, 1);
    auto params = plain.parameters();
    auto set = apply_freeze_policy(params, FreezePolicy::Full);
    auto r = count_parameters(params);
    CHECK(r.trainable == r.total);
    CHECK(r.trainable_fraction == 1.0);
    set = apply_freeze_policy(params, FreezePolicy::LinearProbe);
    for (const auto& n : set) CHECK((n.rfind("decoder.", 0) == 0 || n.rfind("neck.", 0) == 0));
    CHECK(count_parameters(params).trainable == count_parameters(params).group("decoder") + count_parameters(params).group("neck"));
    CHECK_THROWS_AS(apply_freeze_policy(params, FreezePolicy::Lora), std::invalid_argument);

    mc.lora = LoraConfig{4};
    SegmentationModel lora(mc, 1);
    auto lp = lora.parameters();
    CHECK_THROWS_AS(apply_freeze_policy(lp, FreezePolicy::Full), std::invalid_argument);
    CHECK_THROWS_AS(apply_freeze_policy(lp, FreezePolicy::Vpt), std::invalid_argument);
    set = apply_freeze_policy(lp, FreezePolicy::Lora);
    for (const auto& n : set) {
        const auto g = parameter_group(n);
        CHECK((g == "lora" || g == "neck" || g == "decoder"));
    }
    for (const auto& p : lp) {
        if (p.buffer) CHECK_FALSE(p.tensor.requires_grad());
    }

    mc.lora.reset();
    auto fp = plain.parameters();
    set = apply_freeze_policy(fp, FreezePolicy::Full, {true});
    for (const auto& n : set) CHECK(n.rfind("encoder.patch_embed.", 0) != 0);
    CHECK(set.count("encoder.pos_embed") == 1);
    CHECK_THROWS_AS(parse_freeze_policy("half"), std::invalid_argument);
}
