#include "geopeft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace geopeft {

namespace {

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const std::vector<CheckpointEntry>& entries) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "geopeft-checkpoint";
    manifest["version"] = 1;
    auto& list = manifest["entries"] = nlohmann::json::array();
    std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + (dir / "weights.bin").string());
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        if (shape_numel(e.shape) != e.values.size()) {
            throw std::invalid_argument("checkpoint entry '" + e.name + "' has inconsistent shape");
        }
        const std::uint64_t length = e.values.size() * sizeof(float);
        list.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", "f32"}, {"offset", offset}, {"length", length}});
        for (float v : e.values) {
            const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(v));
            bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
        offset += length;
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

void save_checkpoint(const std::filesystem::path& dir, const ParameterList& params) {
    save_checkpoint(dir, snapshot(params));
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("missing checkpoint manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(mf);
    std::ifstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("missing weights.bin in " + dir.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    std::vector<CheckpointEntry> out;
    for (const auto& item : manifest.at("entries")) {
        if (item.at("dtype").get<std::string>() != "f32") {
            throw std::runtime_error("unsupported dtype for " + item.at("name").get<std::string>());
        }
        CheckpointEntry e;
        e.name = item.at("name").get<std::string>();
        e.shape = item.at("shape").get<Shape>();
        const auto offset = item.at("offset").get<std::uint64_t>();
        const auto length = item.at("length").get<std::uint64_t>();
        if (length != shape_numel(e.shape) * sizeof(float) || offset + length > blob.size()) {
            throw std::runtime_error("corrupt checkpoint entry '" + e.name + "'");
        }
        e.values.resize(shape_numel(e.shape));
        for (std::size_t i = 0; i < e.values.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, blob.data() + offset + i * sizeof bits, sizeof bits);
            e.values[i] = std::bit_cast<float>(to_little(bits));
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::size_t restore_parameters(ParameterList& params, const std::vector<CheckpointEntry>& entries, bool allow_missing) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    std::size_t loaded = 0;
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            if (!allow_missing) throw std::runtime_error("checkpoint lacks parameter '" + p.name + "'");
            continue;
        }
        if (it->second->shape != p.tensor.shape()) {
            throw std::runtime_error("shape mismatch for '" + p.name + "': checkpoint " + shape_str(it->second->shape) +
                                     ", model " + shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
        by_name.erase(it);
        ++loaded;
    }
    if (!allow_missing && !by_name.empty()) {
        throw std::runtime_error("checkpoint entry '" + by_name.begin()->first + "' has no matching parameter");
    }
    return loaded;
}

std::vector<CheckpointEntry> snapshot(const ParameterList& params) {
    std::vector<CheckpointEntry> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back({p.name, p.tensor.shape(), p.tensor.to_vector()});
    return out;
}

}  // namespace geopeft
