#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "geopeft/random.hpp"
#include "geopeft/vit.hpp"

namespace geopeft {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Sentinel-2 L1C band ids in product order.
const std::vector<std::string>& sentinel2_bands();
/// Blue, Green, Red, Narrow NIR, SWIR 1, SWIR 2.
const std::vector<std::string>& prithvi_bands();

enum class Split { Train, Val, Test, Ghos };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Sample {
    std::string id;
    std::vector<std::string> bands;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> image;         // C x H x W
    std::vector<std::uint8_t> mask;   // H x W, kIgnoreLabel = unlabelled
    double lat = 0.0;
    double lon = 0.0;
    int day_of_year = 1;
    int year = 2020;
    std::string region;

    std::size_t channels() const { return bands.size(); }
    Metadata metadata() const { return {lat, lon, day_of_year, year}; }
    /// Classes present in the mask (multi-label tags).
    std::vector<int> labels() const;
    void validate(std::size_t num_classes) const;
};

struct BandStats {
    double mean = 0.0;
    double std = 1.0;
};

using BandStatsMap = std::map<std::string, BandStats>;

/// Population mean/std per band over all pixels of the given samples.
BandStatsMap compute_band_stats(const std::vector<Sample>& samples);

Sample normalize(const Sample& s, const BandStatsMap& stats);
Sample denormalize(const Sample& s, const BandStatsMap& stats);

/// Keeps the listed bands in the sample's own order.
Sample subset_bands(const Sample& s, const std::vector<std::string>& keep);

/// Normalised sample expanded to `bands`, with absent bands set to their
/// normalised mean (zero).
Sample mean_impute(const Sample& normalized, const std::vector<std::string>& bands);

/// Reflect-pads image and mask (centred; the extra pixel of an odd margin
/// goes bottom/right). Padded mask pixels are set to kIgnoreLabel.
Sample reflect_pad_to(const Sample& s, std::size_t height, std::size_t width);

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<std::string> bands;
    BandStatsMap stats;
    std::size_t num_classes = 2;
    std::vector<std::string> class_names;
    std::size_t height = 0;
    std::size_t width = 0;
    std::map<std::string, Split> splits;
    std::map<std::string, std::vector<int>> tags;
    std::map<std::string, std::string> regions;

    std::vector<std::string> ids(Split split) const;
    bool has_split(Split split) const { return !ids(split).empty(); }
    /// Checks disjointness (by construction), files present, std > 0.
    void validate() const;
};

// Storage. Each sample is <id>.img (f32 little-endian, C x H x W),
// <id>.mask (u8, H x W) and <id>.json (bands, extent, lat, lon, timestamp,
// region); the manifest is manifest.json in the dataset root.
void write_sample(const std::filesystem::path& dir, const Sample& s);
Sample read_sample(const std::filesystem::path& dir, const std::string& id);
void save_manifest(const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& root);

/// Normalised, band-filtered samples of a dataset held in memory.
struct Dataset {
    DatasetManifest manifest;
    std::vector<std::string> bands;  // channel order of every loaded sample
    std::map<Split, std::vector<Sample>> splits;

    const std::vector<Sample>& split(Split s) const;
    bool has(Split s) const;
};

/// Loads and normalises every split; `bands` empty keeps all bands.
Dataset load_dataset(const std::filesystem::path& root, const std::vector<std::string>& bands = {});
/// Same, from an in-memory manifest whose root holds the sample files.
Dataset load_dataset(const DatasetManifest& manifest, const std::vector<std::string>& bands = {});

}  // namespace geopeft
