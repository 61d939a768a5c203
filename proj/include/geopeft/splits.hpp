#pragma once

#include <map>
#include <string>
#include <vector>

#include "geopeft/data.hpp"

namespace geopeft {

/// Great-circle distance in km (mean Earth radius 6371.0088 km).
double haversine_km(double lat1, double lon1, double lat2, double lon2);

struct PoolEntry {
    std::string id;
    std::string region;
    std::vector<int> labels;
    double lat = 0.0;
    double lon = 0.0;
    /// Official split the entry comes from; empty means unrestricted. When
    /// set, train draws use "train", val draws "val", test and GHOS "test".
    std::string official;
};

std::vector<PoolEntry> pool_from_manifest(const DatasetManifest& m);

struct SplitMap {
    std::map<std::string, Split> assignment;
    std::vector<std::string> unassigned;
    /// Per split, per class: quota minus achieved count (only when > 0).
    std::map<Split, std::map<int, std::size_t>> shortfall;
    std::vector<std::string> warnings;

    std::size_t count(Split s) const;
    std::string to_json() const;
    static SplitMap from_json(const std::string& text);
};

struct BalancedQuotas {
    std::size_t train = 250;
    std::size_t val = 50;
    std::size_t test = 50;
    std::size_t ghos = 50;
};

/// Per-class quota sampling. Classes are visited by ascending frequency;
/// for each class the splits are filled in train, val, test order from a
/// seeded shuffle of unassigned candidates, and a candidate is accepted
/// only if every class it carries is still below that split's quota.
/// GHOS is drawn the same way, exclusively from excluded regions.
SplitMap build_class_balanced_splits(const std::vector<PoolEntry>& pool, const BalancedQuotas& quotas,
                                     const std::vector<std::string>& excluded_regions, std::uint64_t seed);

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

/// Single-linkage clusters (haversine < buffer_km) assigned whole, largest
/// first (ties broken by a seeded shuffle), each to the split with the
/// largest remaining deficit (ties to the earlier split).
SplitMap build_buffered_spatial_splits(const std::vector<PoolEntry>& pool, double buffer_km, const SplitRatios& ratios,
                                       std::uint64_t seed);

struct SplitAudit {
    std::map<Split, std::size_t> sizes;
    /// Min haversine distance between any two samples in different splits.
    double min_cross_split_km = 0.0;
    /// Min distance between train and val/test samples.
    double min_train_eval_km = 0.0;
    bool disjoint = true;
    std::vector<std::string> unassigned;
    /// Per split, per class counts.
    std::map<Split, std::map<int, std::size_t>> class_counts;

    std::string to_csv() const;
};

/// Manifest whose split assignment is replaced by `map` (unassigned
/// samples are dropped) and whose band statistics are recomputed on the new
/// train split.
DatasetManifest apply_split_map(const DatasetManifest& manifest, const SplitMap& map);

SplitAudit audit_splits(const std::vector<PoolEntry>& pool, const SplitMap& map);

}  // namespace geopeft
