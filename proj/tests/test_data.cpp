#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "geopeft/data.hpp"
#include "geopeft/splits.hpp"
#include "geopeft/synthetic.hpp"
#include "geopeft/train.hpp"

using namespace geopeft;
namespace fs = std::filesystem;

namespace {

Sample make_sample(const std::vector<std::string>& bands, std::size_t h, std::size_t w, Rng& rng) {
    Sample s;
    s.id = "s";
    s.bands = bands;
    s.height = h;
    s.width = w;
    s.image.resize(bands.size() * h * w);
    for (auto& v : s.image) v = static_cast<float>(rng.normal(1.0, 2.0));
    s.mask.resize(h * w);
    for (auto& m : s.mask) m = static_cast<std::uint8_t>(rng.index(2));
    return s;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("geopeft_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

SyntheticConfig small_synthetic(std::uint64_t seed) {
    auto cfg = default_synthetic_config();
    cfg.samples_per_region = 10;
    cfg.height = cfg.width = 16;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("normalize: constant band at its mean maps to zero") {
    Sample s;
    s.bands = {"B02"};
    s.height = s.width = 2;
    s.image = {3, 3, 3, 3};
    s.mask = {0, 0, 0, 0};
    auto n = normalize(s, {{"B02", {3.0, 2.0}}});
    for (float v : n.image) CHECK(v == 0.0f);
    CHECK_THROWS(normalize(s, {{"B03", {0.0, 1.0}}}));
}

TEST_CASE("normalize round trip") {
    Rng rng(3);
    auto s = make_sample(prithvi_bands(), 8, 8, rng);
    BandStatsMap stats;
    for (const auto& b : s.bands) stats[b] = {rng.normal(), rng.uniform(0.5, 3.0)};
    auto back = denormalize(normalize(s, stats), stats);
    for (std::size_t i = 0; i < s.image.size(); ++i) CHECK(std::abs(back.image[i] - s.image[i]) <= 1e-6 * std::max(1.0f, std::abs(s.image[i])));
}

TEST_CASE("subset_bands") {
    Rng rng(4);
    auto s = make_sample(sentinel2_bands(), 4, 4, rng);
    auto same = subset_bands(s, sentinel2_bands());
    CHECK(same.image == s.image);
    CHECK(same.bands == s.bands);

    auto p = subset_bands(s, prithvi_bands());
    CHECK(p.bands == std::vector<std::string>{"B02", "B03", "B04", "B8A", "B11", "B12"});
    const std::size_t plane = 16;
    for (std::size_t c = 0; c < p.bands.size(); ++c) {
        std::size_t src = std::find(s.bands.begin(), s.bands.end(), p.bands[c]) - s.bands.begin();
        for (std::size_t i = 0; i < plane; ++i) CHECK(p.image[c * plane + i] == s.image[src * plane + i]);
    }
    // Sample order wins over the order of `keep`.
    auto rev = subset_bands(s, {"B12", "B02"});
    CHECK(rev.bands == std::vector<std::string>{"B02", "B12"});
    CHECK_THROWS(subset_bands(s, {"B99"}));
}

TEST_CASE("backbone on a band subset equals the mean-imputed full input") {
    Rng rng(5);
    auto cfg = testing::tiny_backbone(10, 16, 8);
    ViTBackbone net(cfg, rng);
    auto full = make_sample(cfg.band_ids, 16, 16, rng);
    BandStatsMap stats;
    for (const auto& b : full.bands) stats[b] = {rng.normal(), rng.uniform(0.5, 2.0)};
    const std::vector<std::string> keep = {"B02", "B04", "B06", "B08", "B8A", "B12"};
    auto sub = normalize(subset_bands(full, keep), stats);
    auto imputed = mean_impute(sub, cfg.band_ids);
    CHECK(imputed.bands == cfg.band_ids);
    auto a = net.forward(Tensor::from_data({1, sub.channels(), 16, 16}, sub.image), sub.bands).tokens;
    auto b = net.forward(Tensor::from_data({1, imputed.channels(), 16, 16}, imputed.image), imputed.bands).tokens;
    CHECK(testing::max_abs_diff(a, b) <= 1e-6);
}

TEST_CASE("reflect_pad_to") {
    Sample row;
    row.bands = {"B02"};
    row.height = 1;
    row.width = 3;
    row.image = {1, 2, 3};
    row.mask = {0, 1, 0};
    // A 1-row image cannot reflect vertically; pad width only.
    auto p = reflect_pad_to(row, 1, 5);
    CHECK(p.image == std::vector<float>{2, 1, 2, 3, 2});
    CHECK(p.mask == std::vector<std::uint8_t>{kIgnoreLabel, 0, 1, 0, kIgnoreLabel});

    Rng rng(6);
    auto s = make_sample(prithvi_bands(), 120, 120, rng);
    auto big = reflect_pad_to(s, 128, 128);
    CHECK(big.height == 128);
    CHECK(big.width == 128);
    std::size_t ignored = std::count(big.mask.begin(), big.mask.end(), kIgnoreLabel);
    CHECK(ignored == 128 * 128 - 120 * 120);
    // Interior is unchanged at offset 4.
    CHECK(big.image[(4 * 128) + 4] == s.image[0]);
    // Mirror without repeating the edge: column 3 reflects column 1 of the source.
    CHECK(big.image[4 * 128 + 3] == s.image[1]);

    auto same = reflect_pad_to(s, 120, 120);
    CHECK(same.image == s.image);
    CHECK(same.mask == s.mask);
    CHECK_THROWS(reflect_pad_to(s, 119, 128));
}

TEST_CASE("sample storage round trip is bit exact") {
    Rng rng(7);
    auto dir = scratch("storage");
    auto s = make_sample(prithvi_bands(), 5, 7, rng);
    s.id = "chip_1";
    s.lat = 47.25;
    s.lon = -3.5;
    s.day_of_year = 200;
    s.year = 2021;
    s.region = "north";
    write_sample(dir, s);
    auto r = read_sample(dir, "chip_1");
    CHECK(r.image == s.image);
    CHECK(r.mask == s.mask);
    CHECK(r.bands == s.bands);
    CHECK(r.lat == s.lat);
    CHECK(r.lon == s.lon);
    CHECK(r.day_of_year == 200);
    CHECK(r.year == 2021);
    CHECK(r.region == "north");
    CHECK_THROWS(read_sample(dir, "missing"));
}

TEST_CASE("synthetic manifest stats match a recomputation on train") {
    auto dir = scratch("synthetic_stats");
    auto cfg = small_synthetic(11);
    auto manifest = generate_synthetic(cfg, dir);
    manifest.validate();
    std::vector<Sample> train;
    for (const auto& id : manifest.ids(Split::Train)) train.push_back(read_sample(dir, id));
    REQUIRE(!train.empty());
    auto stats = compute_band_stats(train);
    for (const auto& b : cfg.bands) {
        CHECK(std::abs(stats.at(b).mean - manifest.stats.at(b).mean) <= 1e-4);
        CHECK(std::abs(stats.at(b).std - manifest.stats.at(b).std) <= 1e-4);
    }
    auto loaded = load_manifest(dir);
    CHECK(loaded.splits == manifest.splits);
    CHECK(loaded.num_classes == manifest.num_classes);
}

TEST_CASE("synthetic generation is bit identical for a seed") {
    auto a = scratch("synthetic_a");
    auto b = scratch("synthetic_b");
    auto cfg = small_synthetic(12);
    generate_synthetic(cfg, a);
    generate_synthetic(cfg, b);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        CHECK(read_all(e.path()) == read_all(b / e.path().filename()));
        ++files;
    }
    CHECK(files == 3 * 3 * cfg.samples_per_region + 1);
}

TEST_CASE("noiseless synthetic data is separable by nearest signature") {
    auto cfg = small_synthetic(13);
    cfg.noise = 0;
    const auto world = make_world(cfg);
    ConfusionMatrix cm(cfg.num_classes);
    for (const auto& ss : synthesize(cfg)) {
        if (ss.split != Split::Train) continue;
        const auto& s = ss.sample;
        const std::size_t plane = s.height * s.width;
        std::vector<std::vector<double>> sig;
        for (std::size_t k = 0; k < cfg.num_classes; ++k) sig.push_back(world.spectrum(ss.region, ss.position, k));
        std::vector<std::uint8_t> pred(plane);
        for (std::size_t p = 0; p < plane; ++p) {
            double best = INFINITY;
            for (std::size_t k = 0; k < sig.size(); ++k) {
                double d = 0;
                for (std::size_t c = 0; c < s.channels(); ++c) d += std::pow(s.image[c * plane + p] - sig[k][c], 2);
                if (d < best) {
                    best = d;
                    pred[p] = static_cast<std::uint8_t>(k);
                }
            }
        }
        cm.add(s.mask, pred);
    }
    CHECK(miou(cm) == 100.0);
}

TEST_CASE("GHOS chips lie farther from train than test chips in input space") {
    auto cfg = default_synthetic_config();
    cfg.height = cfg.width = 32;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        cfg.seed = seed;
        std::vector<std::vector<double>> train;
        std::map<Split, std::vector<std::vector<double>>> eval;
        for (const auto& ss : synthesize(cfg)) {
            // Chip-level input vector: the mean spectrum.
            const auto& s = ss.sample;
            const std::size_t plane = s.height * s.width;
            std::vector<double> v(s.channels(), 0.0);
            for (std::size_t c = 0; c < v.size(); ++c) {
                for (std::size_t p = 0; p < plane; ++p) v[c] += s.image[c * plane + p];
                v[c] /= static_cast<double>(plane);
            }
            (ss.split == Split::Train ? train : eval[ss.split]).push_back(v);
        }
        auto mean_min = [&](const std::vector<std::vector<double>>& q) {
            double sum = 0;
            for (const auto& a : q) {
                double best = INFINITY;
                for (const auto& b : train) {
                    double d = 0;
                    for (std::size_t c = 0; c < a.size(); ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
                    best = std::min(best, std::sqrt(d));
                }
                sum += best;
            }
            return sum / static_cast<double>(q.size());
        };
        CHECK(mean_min(eval[Split::Ghos]) > mean_min(eval[Split::Test]));
    }
}

TEST_CASE("load_dataset normalises and subsets") {
    auto dir = scratch("load");
    auto cfg = small_synthetic(14);
    generate_synthetic(cfg, dir);
    auto all = load_dataset(dir);
    CHECK(all.bands == cfg.bands);
    CHECK(all.split(Split::Train).size() == 12);
    CHECK(all.split(Split::Ghos).size() == 10);
    auto sub = load_dataset(dir, {"B12", "B02", "B04"});
    CHECK(sub.bands == std::vector<std::string>{"B02", "B04", "B12"});
    CHECK(sub.split(Split::Val).front().channels() == 3);
    CHECK_THROWS(load_dataset(dir, {"B05"}));
}

// ------------------------------------------------------------------ splits

TEST_CASE("haversine") {
    CHECK(haversine_km(0, 0, 0, 0) == 0.0);
    // One degree of latitude on the mean sphere.
    CHECK(haversine_km(0, 0, 1, 0) == doctest::Approx(111.1950802).epsilon(1e-9));
    CHECK(haversine_km(10, 20, 30, 40) == doctest::Approx(haversine_km(30, 40, 10, 20)));
}

TEST_CASE("class-balanced splits: single class") {
    std::vector<PoolEntry> pool;
    for (int i = 0; i < 10; ++i) pool.push_back({"c" + std::to_string(i), "r", {0}, 0, 0, ""});
    auto m = build_class_balanced_splits(pool, {3, 1, 1, 0}, {}, 1);
    CHECK(m.count(Split::Train) <= 3);
    CHECK(m.count(Split::Val) <= 1);
    CHECK(m.count(Split::Test) <= 1);
    CHECK(m.count(Split::Train) + m.count(Split::Val) + m.count(Split::Test) + m.unassigned.size() == 10);
    auto audit = audit_splits(pool, m);
    CHECK(audit.disjoint);
}

namespace {

std::vector<PoolEntry> multilabel_pool(std::uint64_t seed, std::size_t n, std::size_t classes,
                                       const std::vector<std::string>& regions) {
    Rng rng(seed);
    std::vector<PoolEntry> pool;
    for (std::size_t i = 0; i < n; ++i) {
        PoolEntry e;
        e.id = "p" + std::to_string(i);
        e.region = regions[rng.index(regions.size())];
        std::set<int> labels;
        const std::size_t count = 1 + rng.index(3);
        while (labels.size() < count) labels.insert(static_cast<int>(rng.index(classes)));
        e.labels.assign(labels.begin(), labels.end());
        e.lat = rng.uniform(35, 65);
        e.lon = rng.uniform(-10, 30);
        pool.push_back(e);
    }
    return pool;
}

}  // namespace

TEST_CASE("class-balanced splits: quotas, GHOS exclusivity, determinism") {
    const std::vector<std::string> regions = {"AT", "IE", "DE", "FR", "PT", "FI"};
    auto pool = multilabel_pool(21, 3000, 19, regions);
    BalancedQuotas q{40, 8, 8, 8};
    auto m = build_class_balanced_splits(pool, q, {"AT", "IE"}, 5);
    auto audit = audit_splits(pool, m);
    CHECK(audit.disjoint);
    std::map<std::string, const PoolEntry*> by_id;
    for (const auto& e : pool) by_id[e.id] = &e;
    for (const auto& [id, s] : m.assignment) {
        const bool excluded = by_id[id]->region == "AT" || by_id[id]->region == "IE";
        CHECK(excluded == (s == Split::Ghos));
    }
    const std::map<Split, std::size_t> quota = {{Split::Train, 40}, {Split::Val, 8}, {Split::Test, 8}, {Split::Ghos, 8}};
    for (const auto& [s, counts] : audit.class_counts)
        for (const auto& [cls, n] : counts) CHECK(n <= quota.at(s));
    CHECK(m.count(Split::Ghos) > 0);
    auto again = build_class_balanced_splits(pool, q, {"AT", "IE"}, 5);
    CHECK(again.to_json() == m.to_json());
    CHECK(SplitMap::from_json(m.to_json()).to_json() == m.to_json());
}

TEST_CASE("class-balanced splits record shortfall instead of failing") {
    std::vector<PoolEntry> pool;
    for (int i = 0; i < 4; ++i) pool.push_back({"x" + std::to_string(i), i < 2 ? "A" : "B", {0}, 0, 0, ""});
    auto m = build_class_balanced_splits(pool, {5, 5, 5, 5}, {"B"}, 0);
    CHECK(!m.shortfall.empty());
    CHECK(m.warnings.empty());
    // A class with no candidate at all is a warning, not an error.
    pool.push_back({"y", "A", {1}, 0, 0, ""});
    auto w = build_class_balanced_splits(pool, {5, 5, 5, 5}, {"B"}, 0);
    CHECK(!w.warnings.empty());
    CHECK(m.count(Split::Ghos) == 2);
}

TEST_CASE("buffered splits: far apart samples follow the ratios") {
    std::vector<PoolEntry> pool;
    for (int i = 0; i < 10; ++i) pool.push_back({"f" + std::to_string(i), "r", {0}, 40.0 + i, 10.0, ""});
    auto m = build_buffered_spatial_splits(pool, 5, {0.6, 0.2, 0.2}, 3);
    CHECK(m.count(Split::Train) == 6);
    CHECK(m.count(Split::Val) == 2);
    CHECK(m.count(Split::Test) == 2);
}

TEST_CASE("buffered splits: nearby samples share a split and the audit holds") {
    Rng rng(8);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::vector<PoolEntry> pool;
        // Clumps of chips around random centres; pairs 1 km apart.
        for (int c = 0; c < 30; ++c) {
            const double lat = rng.uniform(40, 50), lon = rng.uniform(0, 20);
            const int n = 1 + static_cast<int>(rng.index(4));
            for (int i = 0; i < n; ++i) {
                pool.push_back({"c" + std::to_string(c) + "_" + std::to_string(i), "r", {0}, lat + i * 0.009, lon, ""});
            }
        }
        auto m = build_buffered_spatial_splits(pool, 5, {}, seed);
        auto audit = audit_splits(pool, m);
        CHECK(audit.min_cross_split_km >= 5.0);
        CHECK(audit.min_train_eval_km >= 5.0);
        for (std::size_t i = 1; i < pool.size(); ++i) {
            if (haversine_km(pool[i].lat, pool[i].lon, pool[i - 1].lat, pool[i - 1].lon) < 1.01) {
                CHECK(m.assignment.at(pool[i].id) == m.assignment.at(pool[i - 1].id));
            }
        }
        CHECK(build_buffered_spatial_splits(pool, 5, {}, seed).to_json() == m.to_json());
    }
}

TEST_CASE("buffered splits reject a single spanning cluster") {
    std::vector<PoolEntry> pool;
    for (int i = 0; i < 5; ++i) pool.push_back({"a" + std::to_string(i), "r", {0}, 45 + i * 0.01, 5, ""});
    CHECK_THROWS(build_buffered_spatial_splits(pool, 5, {}, 0));
}
