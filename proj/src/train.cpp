#include "geopeft/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace geopeft {

// -------------------------------------------------------------- confusion

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

void ConfusionMatrix::add(std::size_t ref, std::size_t pred) {
    if (ref >= k_ || pred >= k_) {
        throw std::invalid_argument("class id out of range for a " + std::to_string(k_) + "-class confusion matrix");
    }
    ++counts_[ref * k_ + pred];
}

void ConfusionMatrix::add(const std::vector<std::uint8_t>& reference, const std::vector<std::uint8_t>& prediction) {
    if (reference.size() != prediction.size()) throw std::invalid_argument("reference and prediction differ in size");
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (reference[i] != kIgnoreLabel) add(reference[i], prediction[i]);
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw std::invalid_argument("cannot merge confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
    const std::size_t k = cm.num_classes();
    std::vector<double> iou(k, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t uni = row + col - cm.at(c, c);
        if (uni) iou[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(uni);
    }
    return iou;
}

double miou(const ConfusionMatrix& cm) {
    double sum = 0;
    std::size_t n = 0;
    for (double v : per_class_iou(cm)) {
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
    }
    if (!n) throw std::invalid_argument("miou: empty evaluation (every class has zero union)");
    return 100.0 * sum / static_cast<double>(n);
}

double pixel_accuracy(const ConfusionMatrix& cm) {
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
    const auto t = cm.total();
    return t ? 100.0 * static_cast<double>(diag) / static_cast<double>(t) : 0.0;
}

// ---------------------------------------------------------------- AdamW

AdamW::AdamW(double lr, double beta1, double beta2, double weight_decay, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

void AdamW::step(ParameterList& params) {
    ++t_;
    const double bc1 = 1 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& p : params) {
        if (p.buffer || !p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        auto w = p.tensor.mutable_data();
        const auto g = p.tensor.grad();
        auto& [m, v] = moments_[p.name];
        if (m.empty()) {
            m.assign(w.size(), 0.0f);
            v.assign(w.size(), 0.0f);
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = static_cast<float>(beta1_ * m[i] + (1 - beta1_) * g[i]);
            v[i] = static_cast<float>(beta2_ * v[i] + (1 - beta2_) * g[i] * g[i]);
            const double mhat = m[i] / bc1, vhat = v[i] / bc2;
            const double decayed = w[i] * (1 - lr_ * weight_decay_);
            w[i] = static_cast<float>(decayed - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

std::size_t AdamW::state_elements() const {
    std::size_t n = 0;
    for (const auto& [name, mv] : moments_) n += mv.first.size() + mv.second.size();
    return n;
}

// ------------------------------------------------------ schedule/stopping

PlateauScheduler::PlateauScheduler(double lr, std::size_t patience, double factor)
    : lr_(lr), patience_(patience), factor_(factor), best_(-std::numeric_limits<double>::infinity()) {
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
    if (!(factor > 0 && factor < 1)) throw std::invalid_argument("plateau factor must lie in (0, 1)");
}

bool PlateauScheduler::step(double metric) {
    if (metric > best_) {
        best_ = metric;
        bad_ = 0;
        return false;
    }
    if (++bad_ >= patience_) {
        lr_ *= factor_;
        bad_ = 0;
        return true;
    }
    return false;
}

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience), best_(-std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw std::invalid_argument("early-stop patience must be >= 1");
}

bool EarlyStopping::step(double metric) {
    improved_ = metric > best_;
    if (improved_) {
        best_ = metric;
        bad_ = 0;
        return false;
    }
    return ++bad_ >= patience_;
}

// -------------------------------------------------------------- training

void RunConfig::validate() const {
    if (!(lr > 0)) throw std::invalid_argument("run: learning rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("run: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("run: max_epochs must be >= 1");
    if (early_stop_patience < 1 || plateau_patience < 1) throw std::invalid_argument("run: patience values must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1)) throw std::invalid_argument("run: plateau factor must lie in (0, 1)");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("run: betas must lie in [0, 1)");
    if (weight_decay < 0) throw std::invalid_argument("run: weight decay must be non-negative");
}

std::pair<Tensor, Tensor> make_batch(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw std::invalid_argument("make_batch: empty batch");
    const auto& first = *batch.front();
    const std::size_t c = first.channels(), h = first.height, w = first.width;
    std::vector<float> images;
    std::vector<float> targets;
    images.reserve(batch.size() * c * h * w);
    targets.reserve(batch.size() * h * w);
    for (const auto* s : batch) {
        if (s->channels() != c || s->height != h || s->width != w || s->bands != first.bands) {
            throw std::invalid_argument("make_batch: sample " + s->id + " differs in bands or extent");
        }
        images.insert(images.end(), s->image.begin(), s->image.end());
        for (auto m : s->mask) targets.push_back(static_cast<float>(m));
    }
    return {Tensor::from_data({batch.size(), c, h, w}, std::move(images)),
            Tensor::from_data({batch.size(), h, w}, std::move(targets))};
}

std::vector<std::vector<std::uint8_t>> predict(const Tensor& logits) {
    const std::size_t b = logits.size(0), k = logits.size(1), plane = logits.size(2) * logits.size(3);
    const auto v = logits.data();
    std::vector<std::vector<std::uint8_t>> out(b, std::vector<std::uint8_t>(plane));
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (v[(n * k + c) * plane + p] > v[(n * k + best) * plane + p]) best = c;
            }
            out[n][p] = static_cast<std::uint8_t>(best);
        }
    return out;
}

namespace {

std::vector<Metadata> batch_metadata(const std::vector<const Sample*>& batch) {
    std::vector<Metadata> m;
    for (const auto* s : batch) m.push_back(s->metadata());
    return m;
}

std::size_t valid_pixels(const Sample& s) {
    return static_cast<std::size_t>(std::count_if(s.mask.begin(), s.mask.end(), [](auto v) { return v != kIgnoreLabel; }));
}

}  // namespace

SplitMetrics evaluate(SegmentationModel& model, const std::vector<Sample>& samples, const std::vector<std::string>& bands,
                      std::size_t num_classes, std::size_t batch_size) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
    if (model.config().decoder.num_classes != num_classes) {
        throw std::invalid_argument("evaluate: model predicts " + std::to_string(model.config().decoder.num_classes) +
                                    " classes but the dataset has " + std::to_string(num_classes));
    }
    SplitMetrics m;
    m.confusion = ConfusionMatrix(num_classes);
    double loss_sum = 0;
    std::size_t loss_pixels = 0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<const Sample*> batch;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
        auto [images, targets] = make_batch(batch);
        const auto meta = batch_metadata(batch);
        auto logits = model.forward(images, bands, &meta, false);
        std::size_t valid = 0;
        for (const auto* s : batch) valid += valid_pixels(*s);
        if (valid) {
            loss_sum += ops::cross_entropy(logits.detach(), targets).item() * static_cast<double>(valid);
            loss_pixels += valid;
        }
        const auto pred = predict(logits);
        for (std::size_t i = 0; i < batch.size(); ++i) m.confusion.add(batch[i]->mask, pred[i]);
    }
    m.per_class_iou = per_class_iou(m.confusion);
    m.miou = miou(m.confusion);
    m.pixel_accuracy = pixel_accuracy(m.confusion);
    m.loss = loss_pixels ? loss_sum / static_cast<double>(loss_pixels) : 0.0;
    return m;
}

SegmentationModel build_model(const RunConfig& cfg, const Dataset& data) {
    auto mc = cfg.model;
    if (mc.backbone.band_ids.empty()) mc.backbone.band_ids = data.manifest.bands;
    if (mc.decoder.num_classes != data.manifest.num_classes) {
        throw std::invalid_argument("decoder predicts " + std::to_string(mc.decoder.num_classes) +
                                    " classes but the dataset has " + std::to_string(data.manifest.num_classes));
    }
    SegmentationModel model(mc, cfg.seed);
    if (!cfg.init_checkpoint.empty()) {
        auto params = model.parameters();
        restore_parameters(params, load_checkpoint(cfg.init_checkpoint), true);
    }
    return model;
}

RunResult train(const RunConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (!data.has(Split::Train)) throw std::invalid_argument("train: empty train split");
    if (!data.has(Split::Val)) throw std::invalid_argument("train: a validation split is required");
    const auto clock_start = std::chrono::steady_clock::now();
    RunResult result;
    result.model = build_model(cfg, data);
    auto& model = result.model;
    auto params = model.parameters();
    result.trainable = apply_freeze_policy(params, cfg.policy, cfg.freeze);
    result.parameters = count_parameters(params);

    const auto& train_set = data.split(Split::Train);
    const auto& val_set = data.split(Split::Val);
    AdamW opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    PlateauScheduler plateau(cfg.lr, cfg.plateau_patience, cfg.plateau_factor);
    EarlyStopping stopper(cfg.early_stop_patience);
    Rng order_rng = Rng(cfg.seed).fork(7);

    result.best_val_miou = -1;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr();
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        double loss_sum = 0;
        std::size_t loss_pixels = 0;
        for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch_size, ++b) {
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
            std::size_t valid = 0;
            for (const auto* s : batch) valid += valid_pixels(*s);
            if (!valid) continue;
            auto [images, targets] = make_batch(batch);
            const auto meta = batch_metadata(batch);
            for (auto& p : params) p.tensor.zero_grad();
            auto loss = ops::cross_entropy(model.forward(images, data.bands, &meta, true), targets);
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
            }
            backward(loss);
            opt.step(params);
            loss_sum += lv * static_cast<double>(valid);
            loss_pixels += valid;
        }
        rec.train_loss = loss_pixels ? loss_sum / static_cast<double>(loss_pixels) : 0.0;
        const auto val = evaluate(model, val_set, data.bands, data.manifest.num_classes, cfg.batch_size);
        rec.val_loss = val.loss;
        rec.val_miou = val.miou;
        const bool stop = stopper.step(val.miou);
        if (stopper.improved()) {
            result.best_val_miou = val.miou;
            result.best_epoch = epoch;
            result.best_checkpoint = snapshot(params);
        }
        plateau.step(val.miou);
        opt.set_lr(plateau.lr());
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (stop) break;
    }
    restore_parameters(params, result.best_checkpoint);
    for (auto s : {Split::Train, Split::Val, Split::Test, Split::Ghos}) {
        if (data.has(s)) result.metrics[s] = evaluate(model, data.split(s), data.bands, data.manifest.num_classes, cfg.batch_size);
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    return result;
}

LrSearchResult lr_search(const RunConfig& cfg, const Dataset& data, std::size_t trials, double lr_min, double lr_max,
                         std::size_t budget_epochs) {
    if (trials < 1) throw std::invalid_argument("lr_search: trials must be >= 1");
    if (!(lr_min > 0 && lr_max >= lr_min)) throw std::invalid_argument("lr_search: invalid learning-rate range");
    Rng rng = Rng(cfg.seed).fork(11);
    LrSearchResult out;
    double best = -1;
    for (std::size_t i = 0; i < trials; ++i) {
        auto trial = cfg;
        trial.lr = std::exp(rng.uniform(std::log(lr_min), std::log(lr_max)));
        trial.max_epochs = budget_epochs;
        const auto r = train(trial, data);
        out.trials.push_back({trial.lr, r.best_val_miou});
        if (r.best_val_miou > best) {
            best = r.best_val_miou;
            out.best_lr = trial.lr;
        }
    }
    return out;
}

Aggregate aggregate(std::vector<double> values) {
    Aggregate a;
    a.n = values.size();
    if (values.empty()) return a;
    std::sort(values.begin(), values.end());
    if (values.front() == values.back()) {
        a.mean = values.front();
        return a;
    }
    double sum = 0;
    for (double v : values) sum += v;
    a.mean = sum / static_cast<double>(a.n);
    if (a.n > 1) {
        double sq = 0;
        for (double v : values) sq += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(sq / static_cast<double>(a.n - 1));
    }
    return a;
}

ReplicateResult run_replicates(const RunConfig& cfg, const Dataset& data, const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw std::invalid_argument("run_replicates: no seeds");
    ReplicateResult out;
    out.seeds = seeds;
    std::map<std::string, std::vector<double>> values;
    for (auto seed : seeds) {
        auto run = cfg;
        run.seed = seed;
        out.runs.push_back(train(run, data));
        const auto& r = out.runs.back();
        for (const auto& [split, m] : r.metrics) values[to_string(split) + "_miou"].push_back(m.miou);
        values["best_epoch"].push_back(static_cast<double>(r.best_epoch));
        values["seconds"].push_back(r.seconds);
    }
    for (auto& [k, v] : values) out.summary[k] = aggregate(v);
    return out;
}

// ---------------------------------------------------------------- exports

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << std::setprecision(9) << "epoch,train_loss,val_loss,val_miou,lr\n";
    for (const auto& r : history) os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_miou << ',' << r.lr << '\n';
    return os.str();
}

std::string timing_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << "epoch,seconds\n";
    for (const auto& r : history) os << r.epoch << ',' << r.seconds << '\n';
    return os.str();
}

std::string metrics_json(const RunResult& r) {
    nlohmann::json j;
    j["best_epoch"] = r.best_epoch;
    j["best_val_miou"] = r.best_val_miou;
    j["epochs_run"] = r.history.size();
    j["seconds"] = r.seconds;
    j["parameters"] = {{"total", r.parameters.total},
                       {"trainable", r.parameters.trainable},
                       {"encoder", r.parameters.encoder},
                       {"trainable_fraction", r.parameters.trainable_fraction},
                       {"groups", r.parameters.per_group}};
    nlohmann::json splits = nlohmann::json::object();
    for (const auto& [s, m] : r.metrics) {
        nlohmann::json iou = nlohmann::json::array();
        for (double v : m.per_class_iou) iou.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(100.0 * v));
        splits[to_string(s)] = {{"miou", m.miou}, {"per_class_iou", iou}, {"pixel_accuracy", m.pixel_accuracy}, {"loss", m.loss}};
    }
    j["splits"] = splits;
    return j.dump(2) + "\n";
}

std::string aggregate_csv(const std::string& label, const ReplicateResult& r) {
    std::ostringstream os;
    os << std::setprecision(9) << "label,metric,mean,std,n\n";
    for (const auto& [k, a] : r.summary) os << label << ',' << k << ',' << a.mean << ',' << a.std << ',' << a.n << '\n';
    return os.str();
}

}  // namespace geopeft
