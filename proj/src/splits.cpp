#include "geopeft/splits.hpp"

#include <algorithm>
#include <fstream>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace geopeft {

using nlohmann::json;

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
    constexpr double r = 6371.0088;
    const double rad = std::numbers::pi / 180.0;
    const double dlat = (lat2 - lat1) * rad, dlon = (lon2 - lon1) * rad;
    const double a = std::pow(std::sin(dlat / 2), 2) + std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::pow(std::sin(dlon / 2), 2);
    return 2 * r * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<PoolEntry> pool_from_manifest(const DatasetManifest& m) {
    std::vector<PoolEntry> pool;
    for (const auto& [id, split] : m.splits) {
        PoolEntry e;
        e.id = id;
        if (auto it = m.regions.find(id); it != m.regions.end()) e.region = it->second;
        if (auto it = m.tags.find(id); it != m.tags.end()) e.labels = it->second;
        std::ifstream side(m.root / (id + ".json"));
        if (side) {
            const auto j = json::parse(side);
            e.lat = j.at("lat").get<double>();
            e.lon = j.at("lon").get<double>();
        }
        pool.push_back(std::move(e));
    }
    return pool;
}

std::size_t SplitMap::count(Split s) const {
    return static_cast<std::size_t>(std::count_if(assignment.begin(), assignment.end(), [s](const auto& kv) { return kv.second == s; }));
}

std::string SplitMap::to_json() const {
    json j;
    json a = json::object();
    for (const auto& [id, s] : assignment) a[id] = to_string(s);
    j["assignment"] = a;
    j["unassigned"] = unassigned;
    json sf = json::object();
    for (const auto& [s, per] : shortfall) {
        json row = json::object();
        for (const auto& [c, n] : per) row[std::to_string(c)] = n;
        sf[to_string(s)] = row;
    }
    j["shortfall"] = sf;
    j["warnings"] = warnings;
    return j.dump(2) + "\n";
}

SplitMap SplitMap::from_json(const std::string& text) {
    const auto j = json::parse(text);
    SplitMap m;
    for (const auto& [id, s] : j.at("assignment").items()) m.assignment[id] = parse_split(s.get<std::string>());
    m.unassigned = j.value("unassigned", std::vector<std::string>{});
    if (j.contains("shortfall")) {
        for (const auto& [s, per] : j.at("shortfall").items()) {
            for (const auto& [c, n] : per.items()) m.shortfall[parse_split(s)][std::stoi(c)] = n.get<std::size_t>();
        }
    }
    m.warnings = j.value("warnings", std::vector<std::string>{});
    return m;
}

namespace {

bool official_ok(const PoolEntry& e, Split s) {
    if (e.official.empty()) return true;
    switch (s) {
        case Split::Train: return e.official == "train";
        case Split::Val: return e.official == "val";
        case Split::Test:
        case Split::Ghos: return e.official == "test";
    }
    return false;
}

void fill_quota(const std::vector<PoolEntry>& pool, const std::vector<std::size_t>& eligible,
                const std::vector<int>& class_order, const std::vector<std::pair<Split, std::size_t>>& quotas, Rng& rng,
                SplitMap& out) {
    std::map<Split, std::map<int, std::size_t>> counts;
    std::set<std::size_t> taken;
    for (int cls : class_order) {
        for (const auto& [split, quota] : quotas) {
            std::vector<std::size_t> cand;
            for (auto i : eligible) {
                const auto& e = pool[i];
                if (!taken.count(i) && official_ok(e, split) &&
                    std::find(e.labels.begin(), e.labels.end(), cls) != e.labels.end()) {
                    cand.push_back(i);
                }
            }
            rng.shuffle(cand);
            for (auto i : cand) {
                if (counts[split][cls] >= quota) break;
                const auto& labels = pool[i].labels;
                const bool fits = std::all_of(labels.begin(), labels.end(), [&](int l) { return counts[split][l] < quota; });
                if (!fits) continue;
                taken.insert(i);
                out.assignment[pool[i].id] = split;
                for (int l : labels) ++counts[split][l];
            }
        }
    }
    for (int cls : class_order) {
        for (const auto& [split, quota] : quotas) {
            const auto have = counts[split][cls];
            if (have < quota) out.shortfall[split][cls] = quota - have;
        }
    }
}

}  // namespace

SplitMap build_class_balanced_splits(const std::vector<PoolEntry>& pool, const BalancedQuotas& quotas,
                                     const std::vector<std::string>& excluded_regions, std::uint64_t seed) {
    std::set<std::string> seen;
    for (const auto& e : pool) {
        if (!seen.insert(e.id).second) throw std::invalid_argument("pool lists sample '" + e.id + "' twice");
    }
    const std::set<std::string> excluded(excluded_regions.begin(), excluded_regions.end());
    std::vector<std::size_t> inside, outside;
    std::map<int, std::size_t> freq_in, freq_out;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const bool ex = excluded.count(pool[i].region) != 0;
        (ex ? outside : inside).push_back(i);
        for (int l : pool[i].labels) ++(ex ? freq_out : freq_in)[l];
    }
    std::set<int> classes;
    for (const auto& e : pool) classes.insert(e.labels.begin(), e.labels.end());
    auto by_frequency = [&](const std::map<int, std::size_t>& freq) {
        std::vector<int> order(classes.begin(), classes.end());
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            const auto fa = freq.count(a) ? freq.at(a) : 0, fb = freq.count(b) ? freq.at(b) : 0;
            return fa < fb;
        });
        return order;
    };
    SplitMap out;
    Rng rng(seed);
    fill_quota(pool, inside, by_frequency(freq_in),
               {{Split::Train, quotas.train}, {Split::Val, quotas.val}, {Split::Test, quotas.test}}, rng, out);
    if (!excluded.empty()) fill_quota(pool, outside, by_frequency(freq_out), {{Split::Ghos, quotas.ghos}}, rng, out);
    for (int c : classes) {
        if (!freq_in.count(c)) out.warnings.push_back("class " + std::to_string(c) + " has no candidates outside excluded regions");
        if (!excluded.empty() && !freq_out.count(c)) {
            out.warnings.push_back("class " + std::to_string(c) + " has no candidates in excluded regions");
        }
    }
    for (const auto& e : pool) {
        if (!out.assignment.count(e.id)) out.unassigned.push_back(e.id);
    }
    return out;
}

SplitMap build_buffered_spatial_splits(const std::vector<PoolEntry>& pool, double buffer_km, const SplitRatios& ratios,
                                       std::uint64_t seed) {
    if (!(buffer_km >= 0)) throw std::invalid_argument("buffer_km must be non-negative");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test <= 0) {
        throw std::invalid_argument("split ratios must be non-negative and not all zero");
    }
    for (const auto& e : pool) {
        if (e.lat < -90 || e.lat > 90 || e.lon < -180 || e.lon > 180) {
            throw std::invalid_argument("sample '" + e.id + "' has an invalid centroid");
        }
    }
    const std::size_t n = pool.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (haversine_km(pool[i].lat, pool[i].lon, pool[j].lat, pool[j].lon) < buffer_km) parent[find(i)] = find(j);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[find(i)].push_back(i);
    std::vector<std::vector<std::size_t>> clusters;
    for (auto& [root, members] : groups) clusters.push_back(std::move(members));
    if (n > 1 && clusters.size() == 1) {
        throw std::invalid_argument("buffered split impossible: all " + std::to_string(n) +
                                    " samples form one cluster at buffer " + std::to_string(buffer_km) + " km");
    }
    Rng rng(seed);
    rng.shuffle(clusters);
    std::stable_sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });

    const double total = ratios.train + ratios.val + ratios.test;
    const std::pair<Split, double> targets[3] = {{Split::Train, ratios.train / total * n},
                                                 {Split::Val, ratios.val / total * n},
                                                 {Split::Test, ratios.test / total * n}};
    double assigned[3] = {0, 0, 0};
    SplitMap out;
    for (const auto& c : clusters) {
        std::size_t best = 0;
        double best_deficit = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < 3; ++s) {
            const double deficit = targets[s].second - assigned[s];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        assigned[best] += static_cast<double>(c.size());
        for (auto i : c) out.assignment[pool[i].id] = targets[best].first;
    }
    return out;
}

SplitAudit audit_splits(const std::vector<PoolEntry>& pool, const SplitMap& map) {
    SplitAudit a;
    a.min_cross_split_km = std::numeric_limits<double>::infinity();
    a.min_train_eval_km = std::numeric_limits<double>::infinity();
    std::set<std::string> ids;
    std::vector<std::pair<const PoolEntry*, Split>> placed;
    for (const auto& e : pool) {
        if (!ids.insert(e.id).second) a.disjoint = false;
        auto it = map.assignment.find(e.id);
        if (it == map.assignment.end()) {
            a.unassigned.push_back(e.id);
            continue;
        }
        ++a.sizes[it->second];
        for (int l : e.labels) ++a.class_counts[it->second][l];
        placed.emplace_back(&e, it->second);
    }
    for (std::size_t i = 0; i < placed.size(); ++i) {
        for (std::size_t j = i + 1; j < placed.size(); ++j) {
            if (placed[i].second == placed[j].second) continue;
            const double d = haversine_km(placed[i].first->lat, placed[i].first->lon, placed[j].first->lat, placed[j].first->lon);
            a.min_cross_split_km = std::min(a.min_cross_split_km, d);
            const bool train_eval =
                (placed[i].second == Split::Train && (placed[j].second == Split::Val || placed[j].second == Split::Test)) ||
                (placed[j].second == Split::Train && (placed[i].second == Split::Val || placed[i].second == Split::Test));
            if (train_eval) a.min_train_eval_km = std::min(a.min_train_eval_km, d);
        }
    }
    return a;
}

std::string SplitAudit::to_csv() const {
    std::ostringstream os;
    os << "key,value\n";
    for (const auto& [s, n] : sizes) os << "size_" << to_string(s) << ',' << n << '\n';
    os << "min_cross_split_km," << min_cross_split_km << '\n';
    os << "min_train_eval_km," << min_train_eval_km << '\n';
    os << "disjoint," << (disjoint ? "true" : "false") << '\n';
    os << "unassigned," << unassigned.size() << '\n';
    for (const auto& [s, per] : class_counts)
        for (const auto& [c, n] : per) os << "class_" << c << '_' << to_string(s) << ',' << n << '\n';
    return os.str();
}

DatasetManifest apply_split_map(const DatasetManifest& manifest, const SplitMap& map) {
    DatasetManifest m = manifest;
    m.splits.clear();
    for (const auto& [id, split] : map.assignment) {
        if (!manifest.splits.count(id)) throw std::invalid_argument("split map names unknown sample '" + id + "'");
        m.splits[id] = split;
    }
    std::vector<Sample> train;
    for (const auto& id : m.ids(Split::Train)) train.push_back(read_sample(m.root, id));
    if (train.empty()) throw std::invalid_argument("split map assigns no train samples");
    m.stats = compute_band_stats(train);
    return m;
}

}  // namespace geopeft
