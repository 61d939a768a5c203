#include <doctest.h>

#include <filesystem>

#include "fixtures.hpp"
#include "geopeft/config.hpp"
#include "geopeft/diagnostics.hpp"
#include "geopeft/synthetic.hpp"

using namespace geopeft;
namespace fs = std::filesystem;

TEST_CASE("config parses sections, comments and lists") {
    const std::string text = R"(# desk run
[model]
embed_dim = 64   # width
depth = 4
heads = 4
patch_size = 8
image_height = 64
image_width = 64
bands = B02, B03, B04

[peft]
method = lora
lora_rank = 8
lora_targets = q, v

[train]
lr = 0.003
seed = 7

[replicate]
seeds = 1, 2, 3
)";
    auto c = parse_config(text);
    CHECK(c.run.model.backbone.embed_dim == 64);
    CHECK(c.run.model.backbone.band_ids == std::vector<std::string>{"B02", "B03", "B04"});
    CHECK(c.method == PeftMethod::Lora);
    CHECK(c.lora.rank == 8);
    CHECK(c.run.lr == 0.003);
    CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
    auto run = c.resolved_run();
    CHECK(run.policy == FreezePolicy::Lora);
    REQUIRE(run.model.lora.has_value());
    CHECK(run.model.lora->targets.size() == 2);
    CHECK(!run.model.vpt.has_value());
}

TEST_CASE("config round trips through the resolved writer") {
    ProjectConfig c;
    c.run.lr = 0.1;
    c.run.weight_decay = 1.0 / 3.0;
    c.method = PeftMethod::Vpt;
    c.vpt.prompts_per_layer = 7;
    c.synthetic.regions[0].class_weights = {0.25, 0.75};
    c.split.excluded_regions = {"AT", "IE"};
    c.dataset = "/data/x";
    c.eval_splits = {Split::Test};
    const auto text = write_config(c);
    const auto back = parse_config(text);
    CHECK(write_config(back) == text);
    CHECK(back.run.weight_decay == c.run.weight_decay);
    CHECK(back.synthetic.regions[0].class_weights == c.synthetic.regions[0].class_weights);
    CHECK(back.vpt.prompts_per_layer == 7);
}

TEST_CASE("config errors name the line") {
    auto line_of = [](const std::string& text) -> std::size_t {
        try {
            parse_config(text, "run.cfg");
        } catch (const ConfigError& e) {
            return e.line();
        }
        return 0;
    };
    CHECK(line_of("[train]\nlr = 0.1\nlearning_rate = 2\n") == 3);
    CHECK(line_of("[nope]\n") == 1);
    CHECK(line_of("lr = 1\n") == 1);
    CHECK(line_of("[train]\nlr = abc\n") == 2);
    CHECK(line_of("[train]\nlr = 1\nlr = 2\n") == 3);
    CHECK(line_of("[train]\nbatch_size\n") == 2);
    CHECK(line_of("[peft]\nmethod = adapterx\n") == 2);
    CHECK(line_of("[train]\nplateau_factor = 1.5\n") == 2);
    try {
        parse_config("[train]\nlrr = 1\n", "run.cfg");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("run.cfg:2") == 0);
    }
}

TEST_CASE("min distance toy example and exactness") {
    std::vector<std::vector<double>> train = {{0, 0}, {1, 0}, {0, 1}};
    CHECK(min_distances({{1, 1}}, train)[0] == 1.0);
    CHECK(min_distances({{0, 1}}, train)[0] == 0.0);
    CHECK_THROWS(min_distances({{1, 1}}, {}));

    Rng rng(41);
    std::vector<std::vector<double>> ref(30, std::vector<double>(5)), q(12, std::vector<double>(5));
    for (auto& v : ref)
        for (auto& x : v) x = rng.normal();
    for (auto& v : q)
        for (auto& x : v) x = rng.normal();
    auto rep = distance_report(ref, {{Split::Val, q}, {Split::Test, q}});
    CHECK(rep.rows.size() == 2);
    CHECK(!rep.rows.count(Split::Ghos));
    // Independent O(n^2) oracle.
    double sum = 0;
    for (const auto& a : q) {
        double best = INFINITY;
        for (const auto& b : ref) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
            best = std::min(best, std::sqrt(s));
        }
        sum += best;
    }
    CHECK(rep.rows.at(Split::Val).mean == sum / 12.0);
    for (double d : rep.rows.at(Split::Test).per_sample) CHECK(d >= 0.0);
    CHECK(rep.to_csv().rfind("split,mean_min_distance,samples\n", 0) == 0);
}

namespace {

Dataset embed_dataset() {
    auto dir = fs::temp_directory_path() / "geopeft_test_embed";
    fs::remove_all(dir);
    auto cfg = default_synthetic_config();
    cfg.samples_per_region = 6;
    cfg.height = cfg.width = 16;
    generate_synthetic(cfg, dir);
    return load_dataset(dir);
}

RunConfig embed_run() {
    RunConfig rc;
    auto& b = rc.model.backbone;
    b.embed_dim = 16;
    b.depth = 4;
    b.heads = 2;
    b.patch_size = 4;
    b.image_h = b.image_w = 16;
    return rc;
}

}  // namespace

TEST_CASE("embedding export") {
    auto data = embed_dataset();
    auto model = build_model(embed_run(), data);
    auto rows = export_embeddings(model, data, Split::Val);
    CHECK(rows.size() == data.split(Split::Val).size());
    for (const auto& r : rows) CHECK(r.values.size() == 16);

    // Duplicate samples give identical rows.
    auto dup = data;
    dup.splits[Split::Val] = {data.split(Split::Val)[0], data.split(Split::Val)[0]};
    auto two = export_embeddings(model, dup, Split::Val);
    REQUIRE(two.size() == 2);
    CHECK(two[0].values == two[1].values);
    auto csv = embeddings_csv(two);
    CHECK(csv.rfind("sample_id,region,e0,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    auto missing = data;
    missing.splits.erase(Split::Ghos);
    CHECK_THROWS(export_embeddings(model, missing, Split::Ghos));
}

TEST_CASE("constant image embedding matches an independent token path") {
    auto data = embed_dataset();
    auto model = build_model(embed_run(), data);
    auto s = data.split(Split::Val)[0];
    const std::vector<float> level = {0.5f, -1.0f, 2.0f, 0.0f, 1.5f, -0.25f};
    const std::size_t plane = 16 * 16, d = 16;
    for (std::size_t c = 0; c < 6; ++c) std::fill(s.image.begin() + c * plane, s.image.begin() + (c + 1) * plane, level[c]);
    auto dup = data;
    dup.splits[Split::Val] = {s};
    const auto got = export_embeddings(model, dup, Split::Val)[0].values;

    // Every patch sees the same pixels, so its embedding is the bias plus
    // sum_c level_c * sum(slab_c), plus its positional vector.
    const auto& bb = model.backbone;
    std::vector<float> patch(d);
    for (std::size_t j = 0; j < d; ++j) {
        double v = bb.patch_bias.data()[j];
        for (std::size_t c = 0; c < 6; ++c) {
            const auto slab = bb.band_slabs[bb.band_index(data.bands[c])].data();
            const std::size_t k = slab.size() / d;
            for (std::size_t i = 0; i < k; ++i) v += level[c] * slab[j * k + i];
        }
        patch[j] = static_cast<float>(v);
    }
    const std::size_t n = 16;
    std::vector<float> tok(n * d);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < d; ++j) tok[t * d + j] = patch[j] + bb.pos_embed.data()[t * d + j];
    std::vector<Metadata> meta = {s.metadata()};
    auto out = bb.forward_features(Tensor::from_data({1, n, d}, tok), nullptr).tokens;
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0;
        for (std::size_t t = 0; t < n; ++t) mean += out.data()[t * d + j];
        CHECK(std::abs(mean / n - got[j]) <= 1e-5);
    }
}

TEST_CASE("distance report on the region-shifted dataset") {
    auto data = embed_dataset();
    auto model = build_model(embed_run(), data);
    auto rep = distance_report(model, data);
    CHECK(rep.rows.count(Split::Val));
    CHECK(rep.rows.count(Split::Test));
    CHECK(rep.rows.count(Split::Ghos));
    // A val sample identical to a train sample sits at distance 0.
    auto dup = data;
    dup.splits[Split::Val] = {data.split(Split::Train)[1]};
    CHECK(distance_report(model, dup).rows.at(Split::Val).mean == 0.0);
    auto empty = data;
    empty.splits.erase(Split::Train);
    CHECK_THROWS(distance_report(model, empty));
}

TEST_CASE("parameter memory report") {
    RunConfig b;
    b.model.backbone.band_ids = testing::band_list(6);
    b.model.vpt = VptConfig{};
    b.policy = FreezePolicy::Vpt;
    auto vpt = parameter_memory_report(b);
    CHECK(vpt.encoder == 86386944);
    CHECK(vpt.peft == 921600);
    CHECK(vpt.peft_pct == 1.07);
    CHECK(millions(vpt.peft) == "0.9M");

    RunConfig l = b;
    l.model.backbone.embed_dim = 1024;
    l.model.backbone.depth = 24;
    l.model.backbone.heads = 16;
    l.model.vpt.reset();
    l.model.lora = LoraConfig{};
    l.policy = FreezePolicy::Lora;
    auto lora = parameter_memory_report(l);
    CHECK(lora.peft == 5505024);
    CHECK(lora.peft_pct == 1.81);
    CHECK(millions(lora.peft) == "5.5M");
    REQUIRE(lora.methods.size() == 3);
    const auto& full = lora.methods[0];
    const auto& probe = lora.methods[1];
    CHECK(full.method == "full");
    CHECK(probe.method == "linear-probe");
    CHECK(probe.optimizer_elements < full.optimizer_elements);
    CHECK(full.trainable >= lora.methods[2].trainable);
    CHECK(lora.methods[2].trainable >= probe.trainable);
    CHECK(probe.activation_elements < lora.methods[2].activation_elements);
    CHECK(full.activation_elements > 0);
    CHECK(lora.to_text().find("5505024") != std::string::npos);
}
