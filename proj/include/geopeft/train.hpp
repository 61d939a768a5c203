#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "geopeft/data.hpp"
#include "geopeft/model.hpp"

namespace geopeft {

/// K x K counts, rows = reference class, columns = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes = 2);

    std::size_t num_classes() const { return k_; }
    std::uint64_t at(std::size_t ref, std::size_t pred) const { return counts_[ref * k_ + pred]; }
    std::uint64_t total() const;

    /// Pixels whose reference is kIgnoreLabel are skipped.
    void add(const std::vector<std::uint8_t>& reference, const std::vector<std::uint8_t>& prediction);
    void add(std::size_t ref, std::size_t pred);
    void merge(const ConfusionMatrix& other);

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

/// IoU per class; NaN for classes with zero union.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);
/// Mean IoU over classes with non-zero union, in percent.
double miou(const ConfusionMatrix& cm);
double pixel_accuracy(const ConfusionMatrix& cm);

/// AdamW with decoupled weight decay over the parameters that require grad.
class AdamW {
public:
    AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double weight_decay = 0.05, double eps = 1e-8);

    void step(ParameterList& params);
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::size_t steps() const { return t_; }
    /// Elements of optimizer state held (two moments per trainable value).
    std::size_t state_elements() const;

private:
    double lr_, beta1_, beta2_, weight_decay_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments_;
};

/// Reduce-on-plateau for a maximised metric: after `patience` consecutive
/// epochs without strict improvement the rate is multiplied by `factor`
/// and the counter restarts.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, std::size_t patience = 4, double factor = 0.5);

    /// Feeds one epoch's metric; returns true when the rate was reduced.
    bool step(double metric);
    double lr() const { return lr_; }
    std::size_t bad_epochs() const { return bad_; }

private:
    double lr_;
    std::size_t patience_;
    double factor_;
    double best_;
    std::size_t bad_ = 0;
};

/// Stops after `patience` consecutive epochs without strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience = 15);
    /// Returns true when training should stop after this epoch.
    bool step(double metric);
    bool improved() const { return improved_; }

private:
    std::size_t patience_;
    double best_;
    std::size_t bad_ = 0;
    bool improved_ = false;
};

struct RunConfig {
    ModelConfig model;
    FreezePolicy policy = FreezePolicy::Full;
    FreezeOptions freeze;
    double lr = 1e-3;
    std::size_t batch_size = 8;
    std::size_t max_epochs = 100;
    std::size_t early_stop_patience = 15;
    std::size_t plateau_patience = 4;
    double plateau_factor = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    /// Optional checkpoint imported before training (e.g. converted
    /// pre-trained encoder weights); entries are matched by name.
    std::filesystem::path init_checkpoint;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_miou = 0;
    double lr = 0;
    double seconds = 0;
};

struct SplitMetrics {
    double miou = 0;
    std::vector<double> per_class_iou;
    double pixel_accuracy = 0;
    double loss = 0;
    ConfusionMatrix confusion;
};

struct RunResult {
    SegmentationModel model;  // best-val weights loaded
    std::vector<CheckpointEntry> best_checkpoint;
    std::size_t best_epoch = 0;
    double best_val_miou = 0;
    std::vector<EpochRecord> history;
    std::map<Split, SplitMetrics> metrics;
    double seconds = 0;
    ParameterReport parameters;
    std::set<std::string> trainable;
};

/// Builds the model for a run and applies its freeze policy.
SegmentationModel build_model(const RunConfig& cfg, const Dataset& data);

/// Fine-tunes on the train split, selecting on val mIoU. Deterministic
/// given cfg.seed. Throws on a non-finite loss or an empty train split.
RunResult train(const RunConfig& cfg, const Dataset& data);

/// Confusion matrix accumulated over the whole split in evaluation mode.
SplitMetrics evaluate(SegmentationModel& model, const std::vector<Sample>& samples, const std::vector<std::string>& bands,
                      std::size_t num_classes, std::size_t batch_size = 8);

/// Per-pixel argmax of [B, K, H, W] logits.
std::vector<std::vector<std::uint8_t>> predict(const Tensor& logits);

struct LrTrial {
    double lr = 0;
    double val_miou = 0;
};

struct LrSearchResult {
    double best_lr = 0;
    std::vector<LrTrial> trials;
};

/// Log-uniform random search; every trial is a `budget_epochs` run.
LrSearchResult lr_search(const RunConfig& cfg, const Dataset& data, std::size_t trials = 16, double lr_min = 1e-5,
                         double lr_max = 1e-2, std::size_t budget_epochs = 10);

struct Aggregate {
    double mean = 0;
    double std = 0;  // unbiased
    std::size_t n = 0;
};

/// Mean and unbiased std; values are sorted first so the result does not
/// depend on their order.
Aggregate aggregate(std::vector<double> values);

struct ReplicateResult {
    std::vector<std::uint64_t> seeds;
    std::vector<RunResult> runs;
    std::map<std::string, Aggregate> summary;  // "test_miou", "val_miou", ...
};

ReplicateResult run_replicates(const RunConfig& cfg, const Dataset& data, const std::vector<std::uint64_t>& seeds);

// Exports. The history holds only deterministic columns; wall-clock
// seconds go to a separate timing table so reruns compare byte for byte.
std::string history_csv(const std::vector<EpochRecord>& history);
std::string timing_csv(const std::vector<EpochRecord>& history);
std::string metrics_json(const RunResult& r);
/// "label,metric,mean,std,n" rows.
std::string aggregate_csv(const std::string& label, const ReplicateResult& r);

/// Stacks samples into [B, C, H, W] images and [B, H, W] targets.
std::pair<Tensor, Tensor> make_batch(const std::vector<const Sample*>& batch);

}  // namespace geopeft
