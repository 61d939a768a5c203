#pragma once

#include <map>
#include <string>
#include <vector>

#include "geopeft/train.hpp"

namespace geopeft {

struct EmbeddingRow {
    std::string id;
    std::string region;
    std::vector<double> values;
};

/// Mean final-layer patch token per sample of a split.
std::vector<EmbeddingRow> export_embeddings(const SegmentationModel& model, const Dataset& data, Split split,
                                            std::size_t batch_size = 8);
/// "sample_id,region,e0,...,e{d-1}" rows.
std::string embeddings_csv(const std::vector<EmbeddingRow>& rows);

/// Exhaustive nearest neighbour: for each query, the minimum Euclidean
/// distance to any reference vector, accumulated in double.
std::vector<double> min_distances(const std::vector<std::vector<double>>& queries,
                                  const std::vector<std::vector<double>>& reference);

struct DistanceRow {
    double mean = 0;
    std::size_t count = 0;
    std::vector<double> per_sample;
};

struct DistanceReport {
    std::map<Split, DistanceRow> rows;  // val, test and (when present) ghos
    /// "split,mean_min_distance,samples" rows.
    std::string to_csv() const;
};

DistanceReport distance_report(const std::vector<std::vector<double>>& train,
                               const std::map<Split, std::vector<std::vector<double>>>& eval);
/// Embeds train and the evaluation splits with the model's encoder.
DistanceReport distance_report(const SegmentationModel& model, const Dataset& data, std::size_t batch_size = 8);

/// Trainable-state footprint of one fine-tuning method on a model.
struct MethodFootprint {
    std::string method;
    std::size_t peft = 0;                 // added PEFT parameters
    std::size_t trainable = 0;
    double trainable_pct = 0;             // of all parameters
    std::size_t gradient_elements = 0;
    std::size_t optimizer_elements = 0;   // AdamW keeps two moments
    std::size_t activation_elements = 0;  // differentiable nodes x batch
};

struct ParameterMemoryReport {
    std::string method;
    std::size_t encoder = 0;
    std::size_t peft = 0;
    double peft_pct = 0;  // of the encoder, rounded to 2 decimals
    std::size_t neck = 0;
    std::size_t decoder = 0;
    std::size_t total = 0;
    std::size_t trainable = 0;
    double trainable_pct = 0;
    std::size_t batch_size = 0;
    std::size_t activation_elements = 0;
    std::size_t optimizer_elements = 0;
    std::vector<MethodFootprint> methods;  // full, linear-probe and the configured method

    std::string to_text() const;
    std::string to_csv() const;
};

/// Exact counts and analytic activation/optimizer element counts, computed
/// shape-only so full-size backbones cost no memory.
ParameterMemoryReport parameter_memory_report(const RunConfig& cfg);

/// "0.9M" style display used by the report (one decimal, millions).
std::string millions(std::size_t n);
double round2(double v);

}  // namespace geopeft
