#include "geopeft/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace geopeft {

void SyntheticConfig::validate() const {
    if (regions.size() < 2) throw std::invalid_argument("synthetic: at least 2 regions required");
    if (std::none_of(regions.begin(), regions.end(), [&](const RegionSpec& r) { return r.name == ghos_region; })) {
        throw std::invalid_argument("synthetic: GHOS region '" + ghos_region + "' is not among the regions");
    }
    if (samples_per_region < 5) throw std::invalid_argument("synthetic: need >= 5 samples per region for 3 splits");
    if (bands.empty() || height == 0 || width == 0) throw std::invalid_argument("synthetic: empty extent or band list");
    if (num_classes < 2 || num_classes > 254) throw std::invalid_argument("synthetic: num_classes must be in [2, 254]");
    if (noise < 0 || region_offset < 0 || ghos_offset < 0 || drift < 0) throw std::invalid_argument("synthetic: negative scale");
    if (layout_cells == 0) throw std::invalid_argument("synthetic: layout_cells must be positive");
    for (const auto& r : regions) {
        if (!r.class_weights.empty() && r.class_weights.size() != num_classes) {
            throw std::invalid_argument("synthetic: region '" + r.name + "' class weights do not match num_classes");
        }
    }
}

SyntheticConfig default_synthetic_config() {
    SyntheticConfig c;
    c.regions = {{"alpine", 47.0, 11.0, {}}, {"lowland", 52.0, 5.0, {}}, {"island", 53.0, -8.0, {}}};
    c.ghos_region = "island";
    return c;
}

std::vector<double> SyntheticWorld::spectrum(std::size_t region, double t, std::size_t cls) const {
    std::vector<double> s = class_spectra.at(cls);
    for (std::size_t b = 0; b < s.size(); ++b) s[b] += region_offsets[region][b] + t * region_drift[region][b];
    return s;
}

SyntheticWorld make_world(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Rng spectra_rng = rng.fork(1);
    const std::size_t nb = cfg.bands.size();
    SyntheticWorld w;
    // Class spectra: a random base and per-class steps of 0.15-0.35 with a
    // random sign per band, so classes stay well apart in every band.
    std::vector<double> base(nb);
    for (auto& v : base) v = spectra_rng.uniform(0.2, 0.5);
    w.class_spectra.push_back(base);
    for (std::size_t k = 1; k < cfg.num_classes; ++k) {
        auto next = w.class_spectra.back();
        for (auto& v : next) v += (spectra_rng.uniform() < 0.5 ? -1 : 1) * spectra_rng.uniform(0.15, 0.35);
        w.class_spectra.push_back(next);
    }
    for (const auto& r : cfg.regions) {
        const double scale = r.name == cfg.ghos_region ? cfg.ghos_offset : cfg.region_offset;
        std::vector<double> off(nb), drift(nb);
        // Fixed magnitude per band, random sign: every region sits at the
        // same spectral distance from the class base, whatever the seed.
        for (auto& v : off) v = (spectra_rng.uniform() < 0.5 ? -1 : 1) * scale;
        for (auto& v : drift) v = (spectra_rng.uniform() < 0.5 ? -1 : 1) * cfg.drift;
        w.region_offsets.push_back(off);
        w.region_drift.push_back(drift);
    }
    return w;
}

namespace {

Split transect_split(std::size_t index, std::size_t count) {
    const double q = static_cast<double>(index) / static_cast<double>(count);
    if (q < 0.6) return Split::Train;
    if (q < 0.8) return Split::Val;
    return Split::Test;
}

std::size_t weighted_class(const RegionSpec& r, std::size_t k, Rng& rng) {
    if (r.class_weights.empty()) return rng.index(k);
    double total = 0;
    for (double w : r.class_weights) total += w;
    double u = rng.uniform() * total;
    for (std::size_t c = 0; c < k; ++c) {
        if (u < r.class_weights[c]) return c;
        u -= r.class_weights[c];
    }
    return k - 1;
}

}  // namespace

std::vector<SyntheticSample> synthesize(const SyntheticConfig& cfg) {
    const auto world = make_world(cfg);
    Rng rng(cfg.seed);
    Rng layout_rng = rng.fork(2);
    Rng noise_rng = rng.fork(3);
    const std::size_t nb = cfg.bands.size(), h = cfg.height, wd = cfg.width, plane = h * wd;
    std::vector<SyntheticSample> out;
    for (std::size_t r = 0; r < cfg.regions.size(); ++r) {
        const auto& spec = cfg.regions[r];
        const bool ghos = spec.name == cfg.ghos_region;
        for (std::size_t i = 0; i < cfg.samples_per_region; ++i) {
            const double t = cfg.samples_per_region > 1 ? static_cast<double>(i) / (cfg.samples_per_region - 1) : 0.0;
            SyntheticSample ss;
            ss.region = r;
            ss.position = t;
            ss.split = ghos ? Split::Ghos : transect_split(i, cfg.samples_per_region);
            Sample& s = ss.sample;
            s.id = spec.name + "_" + std::to_string(i);
            s.bands = cfg.bands;
            s.height = h;
            s.width = wd;
            s.region = spec.name;
            s.lat = std::clamp(spec.lat + t * cfg.transect_deg, -90.0, 90.0);
            s.lon = spec.lon;
            s.day_of_year = 1 + static_cast<int>(layout_rng.index(365));
            s.year = 2019 + static_cast<int>(layout_rng.index(4));
            // Voronoi layout.
            std::vector<std::pair<double, double>> seeds(cfg.layout_cells);
            std::vector<std::size_t> cls(cfg.layout_cells);
            for (std::size_t c = 0; c < cfg.layout_cells; ++c) {
                seeds[c] = {layout_rng.uniform(0, h), layout_rng.uniform(0, wd)};
                cls[c] = weighted_class(spec, cfg.num_classes, layout_rng);
            }
            s.mask.resize(plane);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < wd; ++x) {
                    std::size_t best = 0;
                    double bd = INFINITY;
                    for (std::size_t c = 0; c < cfg.layout_cells; ++c) {
                        const double dy = seeds[c].first - (y + 0.5), dx = seeds[c].second - (x + 0.5);
                        const double d = dy * dy + dx * dx;
                        if (d < bd) {
                            bd = d;
                            best = c;
                        }
                    }
                    s.mask[y * wd + x] = static_cast<std::uint8_t>(cls[best]);
                }
            std::vector<std::vector<double>> spectra(cfg.num_classes);
            for (std::size_t k = 0; k < cfg.num_classes; ++k) spectra[k] = world.spectrum(r, t, k);
            s.image.resize(nb * plane);
            for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t p = 0; p < plane; ++p) {
                    const double v = spectra[s.mask[p]][b] + (cfg.noise > 0 ? noise_rng.normal(0, cfg.noise) : 0.0);
                    s.image[b * plane + p] = static_cast<float>(v);
                }
            out.push_back(std::move(ss));
        }
    }
    return out;
}

DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& root) {
    const auto samples = synthesize(cfg);
    DatasetManifest m;
    m.root = root;
    m.bands = cfg.bands;
    m.num_classes = cfg.num_classes;
    for (std::size_t k = 0; k < cfg.num_classes; ++k) m.class_names.push_back("class" + std::to_string(k));
    m.height = cfg.height;
    m.width = cfg.width;
    std::vector<Sample> train;
    for (const auto& ss : samples) {
        write_sample(root, ss.sample);
        m.splits[ss.sample.id] = ss.split;
        m.regions[ss.sample.id] = ss.sample.region;
        m.tags[ss.sample.id] = ss.sample.labels();
        if (ss.split == Split::Train) train.push_back(ss.sample);
    }
    m.stats = compute_band_stats(train);
    save_manifest(m);
    return m;
}

}  // namespace geopeft
