#include "geopeft/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace geopeft {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& sentinel2_bands() {
    static const std::vector<std::string> bands = {"B01", "B02", "B03", "B04", "B05", "B06", "B07",
                                                   "B08", "B8A", "B09", "B10", "B11", "B12"};
    return bands;
}

const std::vector<std::string>& prithvi_bands() {
    static const std::vector<std::string> bands = {"B02", "B03", "B04", "B8A", "B11", "B12"};
    return bands;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Ghos: return "ghos";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "ghos") return Split::Ghos;
    throw std::invalid_argument("unknown split '" + s + "'");
}

// ------------------------------------------------------------------ sample

std::vector<int> Sample::labels() const {
    std::set<int> present;
    for (auto v : mask) {
        if (v != kIgnoreLabel) present.insert(v);
    }
    return {present.begin(), present.end()};
}

void Sample::validate(std::size_t num_classes) const {
    if (image.size() != bands.size() * height * width) {
        throw std::invalid_argument("sample " + id + ": image holds " + std::to_string(image.size()) + " values, expected " +
                                    std::to_string(bands.size() * height * width));
    }
    if (mask.size() != height * width) throw std::invalid_argument("sample " + id + ": mask extent differs from image");
    for (auto v : mask) {
        if (v != kIgnoreLabel && v >= num_classes) {
            throw std::invalid_argument("sample " + id + ": class id " + std::to_string(v) + " >= " + std::to_string(num_classes));
        }
    }
}

BandStatsMap compute_band_stats(const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("compute_band_stats: no samples");
    std::map<std::string, std::pair<double, std::size_t>> sums;
    for (const auto& s : samples) {
        const std::size_t plane = s.height * s.width;
        for (std::size_t c = 0; c < s.channels(); ++c) {
            auto& [sum, n] = sums[s.bands[c]];
            for (std::size_t i = 0; i < plane; ++i) sum += s.image[c * plane + i];
            n += plane;
        }
    }
    std::map<std::string, double> sq;
    for (const auto& s : samples) {
        const std::size_t plane = s.height * s.width;
        for (std::size_t c = 0; c < s.channels(); ++c) {
            const double mean = sums[s.bands[c]].first / static_cast<double>(sums[s.bands[c]].second);
            double acc = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                const double dv = s.image[c * plane + i] - mean;
                acc += dv * dv;
            }
            sq[s.bands[c]] += acc;
        }
    }
    BandStatsMap out;
    for (const auto& [band, sn] : sums) {
        const double n = static_cast<double>(sn.second);
        out[band] = {sn.first / n, std::sqrt(sq[band] / n)};
    }
    return out;
}

namespace {

const BandStats& stats_for(const BandStatsMap& stats, const std::string& band) {
    auto it = stats.find(band);
    if (it == stats.end()) throw std::invalid_argument("no normalisation statistics for band '" + band + "'");
    if (!(it->second.std > 0)) throw std::invalid_argument("band '" + band + "' has non-positive std");
    return it->second;
}

}  // namespace

Sample normalize(const Sample& s, const BandStatsMap& stats) {
    Sample out = s;
    const std::size_t plane = s.height * s.width;
    for (std::size_t c = 0; c < s.channels(); ++c) {
        const auto& st = stats_for(stats, s.bands[c]);
        for (std::size_t i = 0; i < plane; ++i) {
            out.image[c * plane + i] = static_cast<float>((s.image[c * plane + i] - st.mean) / st.std);
        }
    }
    return out;
}

Sample denormalize(const Sample& s, const BandStatsMap& stats) {
    Sample out = s;
    const std::size_t plane = s.height * s.width;
    for (std::size_t c = 0; c < s.channels(); ++c) {
        const auto& st = stats_for(stats, s.bands[c]);
        for (std::size_t i = 0; i < plane; ++i) {
            out.image[c * plane + i] = static_cast<float>(s.image[c * plane + i] * st.std + st.mean);
        }
    }
    return out;
}

Sample subset_bands(const Sample& s, const std::vector<std::string>& keep) {
    const std::set<std::string> wanted(keep.begin(), keep.end());
    for (const auto& k : keep) {
        if (std::find(s.bands.begin(), s.bands.end(), k) == s.bands.end()) {
            throw std::invalid_argument("subset_bands: sample " + s.id + " has no band '" + k + "'");
        }
    }
    Sample out = s;
    out.bands.clear();
    out.image.clear();
    const std::size_t plane = s.height * s.width;
    for (std::size_t c = 0; c < s.channels(); ++c) {
        if (!wanted.count(s.bands[c])) continue;
        out.bands.push_back(s.bands[c]);
        out.image.insert(out.image.end(), s.image.begin() + c * plane, s.image.begin() + (c + 1) * plane);
    }
    return out;
}

Sample mean_impute(const Sample& normalized, const std::vector<std::string>& bands) {
    Sample out = normalized;
    const std::size_t plane = normalized.height * normalized.width;
    out.bands = bands;
    out.image.assign(bands.size() * plane, 0.0f);
    for (std::size_t c = 0; c < bands.size(); ++c) {
        auto it = std::find(normalized.bands.begin(), normalized.bands.end(), bands[c]);
        if (it == normalized.bands.end()) continue;
        const std::size_t src = static_cast<std::size_t>(it - normalized.bands.begin());
        std::copy_n(normalized.image.begin() + src * plane, plane, out.image.begin() + c * plane);
    }
    return out;
}

Sample reflect_pad_to(const Sample& s, std::size_t height, std::size_t width) {
    if (height < s.height || width < s.width) {
        throw std::invalid_argument("reflect_pad_to: target " + std::to_string(height) + "x" + std::to_string(width) +
                                    " smaller than sample " + std::to_string(s.height) + "x" + std::to_string(s.width));
    }
    const std::size_t top = (height - s.height) / 2, left = (width - s.width) / 2;
    const std::size_t bottom = height - s.height - top, right = width - s.width - left;
    if (bottom >= s.height || right >= s.width) {
        throw std::invalid_argument("reflect_pad_to: padding must be smaller than the sample extent");
    }
    auto src_index = [](long i, std::size_t n) {
        // Mirror without repeating the edge.
        if (i < 0) i = -i;
        if (i >= static_cast<long>(n)) i = 2 * static_cast<long>(n) - 2 - i;
        return static_cast<std::size_t>(i);
    };
    Sample out = s;
    out.height = height;
    out.width = width;
    out.image.assign(s.channels() * height * width, 0.0f);
    out.mask.assign(height * width, kIgnoreLabel);
    for (std::size_t y = 0; y < height; ++y) {
        const long sy = static_cast<long>(y) - static_cast<long>(top);
        const std::size_t ry = src_index(sy, s.height);
        for (std::size_t x = 0; x < width; ++x) {
            const long sx = static_cast<long>(x) - static_cast<long>(left);
            const std::size_t rx = src_index(sx, s.width);
            for (std::size_t c = 0; c < s.channels(); ++c) {
                out.image[(c * height + y) * width + x] = s.image[(c * s.height + ry) * s.width + rx];
            }
            const bool inside = sy >= 0 && sy < static_cast<long>(s.height) && sx >= 0 && sx < static_cast<long>(s.width);
            if (inside) out.mask[y * width + x] = s.mask[ry * s.width + rx];
        }
    }
    return out;
}

// ---------------------------------------------------------------- manifest

std::vector<std::string> DatasetManifest::ids(Split split) const {
    std::vector<std::string> out;
    for (const auto& [id, s] : splits) {
        if (s == split) out.push_back(id);
    }
    return out;
}

void DatasetManifest::validate() const {
    if (bands.empty()) throw std::invalid_argument("manifest: no bands");
    for (const auto& b : bands) stats_for(stats, b);
    if (num_classes < 2) throw std::invalid_argument("manifest: num_classes must be >= 2");
    for (const auto& [id, split] : splits) {
        (void)split;
        for (const char* ext : {".img", ".mask", ".json"}) {
            if (!fs::exists(root / (id + ext))) throw std::runtime_error("manifest: missing file " + (root / (id + ext)).string());
        }
    }
}

namespace {

void write_le_floats(std::ostream& os, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
}

std::vector<char> read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_sample(const fs::path& dir, const Sample& s) {
    fs::create_directories(dir);
    {
        std::ofstream img(dir / (s.id + ".img"), std::ios::binary | std::ios::trunc);
        write_le_floats(img, s.image);
    }
    {
        std::ofstream mask(dir / (s.id + ".mask"), std::ios::binary | std::ios::trunc);
        mask.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
    }
    json side = {{"id", s.id},         {"bands", s.bands}, {"height", s.height},
                 {"width", s.width},   {"lat", s.lat},     {"lon", s.lon},
                 {"day_of_year", s.day_of_year}, {"year", s.year}, {"region", s.region}};
    std::ofstream(dir / (s.id + ".json")) << side.dump(2) << '\n';
}

Sample read_sample(const fs::path& dir, const std::string& id) {
    std::ifstream side_in(dir / (id + ".json"));
    if (!side_in) throw std::runtime_error("missing sidecar " + (dir / (id + ".json")).string());
    const auto side = json::parse(side_in);
    Sample s;
    s.id = side.at("id").get<std::string>();
    s.bands = side.at("bands").get<std::vector<std::string>>();
    s.height = side.at("height").get<std::size_t>();
    s.width = side.at("width").get<std::size_t>();
    s.lat = side.at("lat").get<double>();
    s.lon = side.at("lon").get<double>();
    s.day_of_year = side.at("day_of_year").get<int>();
    s.year = side.at("year").get<int>();
    s.region = side.at("region").get<std::string>();
    const auto img = read_all(dir / (id + ".img"));
    const std::size_t n = s.bands.size() * s.height * s.width;
    if (img.size() != n * 4) throw std::runtime_error("sample " + id + ": image blob has wrong size");
    s.image.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, img.data() + 4 * i, 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        s.image[i] = std::bit_cast<float>(bits);
    }
    const auto mask = read_all(dir / (id + ".mask"));
    if (mask.size() != s.height * s.width) throw std::runtime_error("sample " + id + ": mask blob has wrong size");
    s.mask.assign(mask.begin(), mask.end());
    return s;
}

void save_manifest(const DatasetManifest& m) {
    json j;
    j["format"] = "geopeft-dataset";
    j["version"] = 1;
    j["bands"] = m.bands;
    json stats = json::object();
    for (const auto& b : m.bands) stats[b] = {{"mean", m.stats.at(b).mean}, {"std", m.stats.at(b).std}};
    j["stats"] = stats;
    j["num_classes"] = m.num_classes;
    j["class_names"] = m.class_names;
    j["extent"] = {m.height, m.width};
    json samples = json::array();
    for (const auto& [id, split] : m.splits) {
        json e = {{"id", id}, {"split", to_string(split)}};
        if (auto it = m.regions.find(id); it != m.regions.end()) e["region"] = it->second;
        if (auto it = m.tags.find(id); it != m.tags.end()) e["tags"] = it->second;
        samples.push_back(e);
    }
    j["samples"] = samples;
    fs::create_directories(m.root);
    std::ofstream(m.root / "manifest.json") << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& root) {
    std::ifstream in(root / "manifest.json");
    if (!in) throw std::runtime_error("missing dataset manifest in " + root.string());
    const auto j = json::parse(in);
    if (j.value("format", "") != "geopeft-dataset") throw std::runtime_error("not a dataset manifest: " + root.string());
    DatasetManifest m;
    m.root = root;
    m.bands = j.at("bands").get<std::vector<std::string>>();
    for (const auto& [band, st] : j.at("stats").items()) m.stats[band] = {st.at("mean").get<double>(), st.at("std").get<double>()};
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.height = j.at("extent").at(0).get<std::size_t>();
    m.width = j.at("extent").at(1).get<std::size_t>();
    for (const auto& e : j.at("samples")) {
        const auto id = e.at("id").get<std::string>();
        if (m.splits.count(id)) throw std::runtime_error("manifest lists sample '" + id + "' twice");
        m.splits[id] = parse_split(e.at("split").get<std::string>());
        if (e.contains("region")) m.regions[id] = e.at("region").get<std::string>();
        if (e.contains("tags")) m.tags[id] = e.at("tags").get<std::vector<int>>();
    }
    return m;
}

const std::vector<Sample>& Dataset::split(Split s) const {
    auto it = splits.find(s);
    if (it == splits.end() || it->second.empty()) throw std::invalid_argument("dataset has no " + to_string(s) + " split");
    return it->second;
}

bool Dataset::has(Split s) const {
    auto it = splits.find(s);
    return it != splits.end() && !it->second.empty();
}

Dataset load_dataset(const fs::path& root, const std::vector<std::string>& bands) {
    return load_dataset(load_manifest(root), bands);
}

Dataset load_dataset(const DatasetManifest& manifest, const std::vector<std::string>& bands) {
    Dataset d;
    d.manifest = manifest;
    d.manifest.validate();
    const auto& root = d.manifest.root;
    if (bands.empty()) {
        d.bands = d.manifest.bands;
    } else {
        for (const auto& b : bands) {
            if (std::find(d.manifest.bands.begin(), d.manifest.bands.end(), b) == d.manifest.bands.end()) {
                throw std::invalid_argument("dataset has no band '" + b + "'");
            }
        }
        for (const auto& b : d.manifest.bands) {
            if (std::find(bands.begin(), bands.end(), b) != bands.end()) d.bands.push_back(b);
        }
    }
    for (const auto& [id, split] : d.manifest.splits) {
        auto s = read_sample(root, id);
        s.validate(d.manifest.num_classes);
        auto n = normalize(s, d.manifest.stats);
        d.splits[split].push_back(bands.empty() ? std::move(n) : subset_bands(n, bands));
    }
    return d;
}

}  // namespace geopeft
