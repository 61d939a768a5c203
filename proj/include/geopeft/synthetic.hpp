#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "geopeft/data.hpp"

namespace geopeft {

struct RegionSpec {
    std::string name;
    double lat = 0.0;
    double lon = 0.0;
    /// Relative class frequencies of the layout seeds (empty = uniform).
    std::vector<double> class_weights;
};

/// Region-shifted multispectral chips. Every class has a base spectrum;
/// each region adds its own offset (the GHOS region a larger one), and the
/// samples of a region lie along a transect whose spectrum drifts with
/// position. Train, val and test take the first 60/20/20 % of each
/// transect, so test lies farther from train than val.
struct SyntheticConfig {
    std::size_t samples_per_region = 20;
    std::vector<RegionSpec> regions;
    /// Name of the held-out region (must be one of `regions`).
    std::string ghos_region;
    std::vector<std::string> bands = prithvi_bands();
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t num_classes = 2;
    double noise = 0.05;
    double region_offset = 0.05;
    double ghos_offset = 0.3;
    double drift = 0.15;
    /// Voronoi seeds per chip.
    std::size_t layout_cells = 6;
    /// Transect length in degrees of latitude.
    double transect_deg = 2.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Default three-region setup: two training regions plus one GHOS region.
SyntheticConfig default_synthetic_config();

/// Deterministic world model derived from the config.
struct SyntheticWorld {
    std::vector<std::vector<double>> class_spectra;   // [K][C]
    std::vector<std::vector<double>> region_offsets;  // [R][C]
    std::vector<std::vector<double>> region_drift;    // [R][C]

    /// Noise-free spectrum of a class in region r at transect position t.
    std::vector<double> spectrum(std::size_t region, double t, std::size_t cls) const;
};

struct SyntheticSample {
    Sample sample;
    Split split = Split::Train;
    std::size_t region = 0;
    double position = 0.0;
};

SyntheticWorld make_world(const SyntheticConfig& cfg);
std::vector<SyntheticSample> synthesize(const SyntheticConfig& cfg);

/// Writes samples and a manifest whose band statistics come from train.
DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& root);

}  // namespace geopeft
