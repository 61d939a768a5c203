#include "geopeft/diagnostics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace geopeft {

std::vector<EmbeddingRow> export_embeddings(const SegmentationModel& model, const Dataset& data, Split split,
                                            std::size_t batch_size) {
    if (!data.has(split)) throw std::invalid_argument("dataset has no " + to_string(split) + " split");
    const auto& samples = data.split(split);
    std::vector<EmbeddingRow> rows;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<const Sample*> batch;
        std::vector<Metadata> meta;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) {
            batch.push_back(&samples[i]);
            meta.push_back(samples[i].metadata());
        }
        const auto images = make_batch(batch).first;
        const auto emb = model.backbone.image_embedding(images, data.bands, &meta);
        const std::size_t d = emb.size(1);
        const auto v = emb.data();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            rows.push_back({batch[i]->id, batch[i]->region, {v.begin() + i * d, v.begin() + (i + 1) * d}});
        }
    }
    return rows;
}

std::string embeddings_csv(const std::vector<EmbeddingRow>& rows) {
    std::ostringstream os;
    os << std::setprecision(9) << "sample_id,region";
    const std::size_t d = rows.empty() ? 0 : rows.front().values.size();
    for (std::size_t j = 0; j < d; ++j) os << ",e" << j;
    os << '\n';
    for (const auto& r : rows) {
        os << r.id << ',' << r.region;
        for (double v : r.values) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

std::vector<double> min_distances(const std::vector<std::vector<double>>& queries,
                                  const std::vector<std::vector<double>>& reference) {
    if (reference.empty()) throw std::invalid_argument("distance: empty reference (train) set");
    std::vector<double> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& r : reference) {
            if (r.size() != q.size()) throw std::invalid_argument("distance: embedding widths differ");
            double s = 0;
            for (std::size_t j = 0; j < q.size(); ++j) s += (q[j] - r[j]) * (q[j] - r[j]);
            best = std::min(best, s);
        }
        out.push_back(std::sqrt(best));
    }
    return out;
}

std::string DistanceReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(9) << "split,mean_min_distance,samples\n";
    for (const auto& [s, r] : rows) os << to_string(s) << ',' << r.mean << ',' << r.count << '\n';
    return os.str();
}

DistanceReport distance_report(const std::vector<std::vector<double>>& train,
                               const std::map<Split, std::vector<std::vector<double>>>& eval) {
    if (train.empty()) throw std::invalid_argument("distance_report: empty train split");
    DistanceReport rep;
    for (const auto& [split, q] : eval) {
        if (q.empty()) continue;
        DistanceRow row;
        row.per_sample = min_distances(q, train);
        row.count = q.size();
        double sum = 0;
        for (double v : row.per_sample) sum += v;
        row.mean = sum / static_cast<double>(row.count);
        rep.rows[split] = std::move(row);
    }
    return rep;
}

DistanceReport distance_report(const SegmentationModel& model, const Dataset& data, std::size_t batch_size) {
    if (!data.has(Split::Train)) throw std::invalid_argument("distance_report: empty train split");
    auto vectors = [&](Split s) {
        std::vector<std::vector<double>> v;
        for (auto& r : export_embeddings(model, data, s, batch_size)) v.push_back(std::move(r.values));
        return v;
    };
    const auto train = vectors(Split::Train);
    std::map<Split, std::vector<std::vector<double>>> eval;
    for (auto s : {Split::Val, Split::Test, Split::Ghos}) {
        if (data.has(s)) eval[s] = vectors(s);
    }
    return distance_report(train, eval);
}

// ------------------------------------------------------ parameter report

double round2(double v) { return std::round(v * 100.0) / 100.0; }

std::string millions(std::size_t n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << static_cast<double>(n) / 1e6 << "M";
    return os.str();
}

namespace {

std::string method_name(const RunConfig& cfg) { return to_string(cfg.policy); }

RunConfig with_policy(const RunConfig& base, FreezePolicy p) {
    RunConfig r = base;
    r.policy = p;
    r.model.lora.reset();
    r.model.vpt.reset();
    r.model.adapter.reset();
    if (p == FreezePolicy::Lora) r.model.lora = base.model.lora.value_or(LoraConfig{});
    if (p == FreezePolicy::Vpt) r.model.vpt = base.model.vpt.value_or(VptConfig{});
    if (p == FreezePolicy::VitAdapter) r.model.adapter = base.model.adapter.value_or(VitAdapterConfig{});
    return r;
}

struct Measured {
    ParameterReport params;
    std::size_t activations = 0;  // per sample
};

Measured measure(const RunConfig& cfg) {
    MetaScope scope;
    auto mc = cfg.model;
    if (mc.backbone.band_ids.empty()) mc.backbone.band_ids = prithvi_bands();
    SegmentationModel model(mc, cfg.seed);
    auto params = model.parameters();
    apply_freeze_policy(params, cfg.policy, cfg.freeze);
    Measured m;
    m.params = count_parameters(params);
    const auto& b = mc.backbone;
    auto images = Tensor::zeros({1, b.band_ids.size(), b.image_h, b.image_w});
    std::vector<Metadata> meta(1);
    auto logits = model.forward(images, b.band_ids, &meta, false);
    for (const auto* node : topological_order(logits)) {
        if (node->op != "leaf") m.activations += shape_numel(node->shape);
    }
    return m;
}

std::size_t peft_of(const ParameterReport& r) { return r.group("lora") + r.group("vpt") + r.group("adapter"); }

}  // namespace

ParameterMemoryReport parameter_memory_report(const RunConfig& cfg) {
    cfg.validate();
    ParameterMemoryReport rep;
    rep.method = method_name(cfg);
    rep.batch_size = cfg.batch_size;
    std::vector<FreezePolicy> policies = {FreezePolicy::Full, FreezePolicy::LinearProbe};
    if (cfg.policy != FreezePolicy::Full && cfg.policy != FreezePolicy::LinearProbe) policies.push_back(cfg.policy);
    for (auto p : policies) {
        const auto m = measure(p == cfg.policy ? cfg : with_policy(cfg, p));
        MethodFootprint f;
        f.method = to_string(p);
        f.peft = peft_of(m.params);
        f.trainable = m.params.trainable;
        f.trainable_pct = round2(100.0 * m.params.trainable_fraction);
        f.gradient_elements = m.params.trainable;
        f.optimizer_elements = 2 * m.params.trainable;
        f.activation_elements = m.activations * cfg.batch_size;
        rep.methods.push_back(f);
        if (p == cfg.policy) {
            rep.encoder = m.params.encoder;
            rep.peft = f.peft;
            rep.peft_pct = rep.encoder ? round2(100.0 * static_cast<double>(f.peft) / static_cast<double>(rep.encoder)) : 0;
            rep.neck = m.params.group("neck");
            rep.decoder = m.params.group("decoder");
            rep.total = m.params.total;
            rep.trainable = f.trainable;
            rep.trainable_pct = f.trainable_pct;
            rep.activation_elements = f.activation_elements;
            rep.optimizer_elements = f.optimizer_elements;
        }
    }
    return rep;
}

std::string ParameterMemoryReport::to_text() const {
    std::ostringstream os;
    os << "method: " << method << "\n"
       << "encoder parameters: " << encoder << " (" << millions(encoder) << ")\n"
       << "peft parameters: " << peft << " (" << millions(peft) << ", " << std::fixed << std::setprecision(2) << peft_pct
       << "% of encoder)\n"
       << "neck parameters: " << neck << "\n"
       << "decoder parameters: " << decoder << "\n"
       << "total parameters: " << total << "\n"
       << "trainable parameters: " << trainable << " (" << trainable_pct << "%)\n"
       << "activation elements (batch " << batch_size << "): " << activation_elements << "\n"
       << "optimizer state elements: " << optimizer_elements << "\n";
    return os.str();
}

std::string ParameterMemoryReport::to_csv() const {
    std::ostringstream os;
    os << "method,peft,trainable,trainable_pct,gradient_elements,optimizer_elements,activation_elements\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& m : methods) {
        os << m.method << ',' << m.peft << ',' << m.trainable << ',' << m.trainable_pct << ',' << m.gradient_elements << ','
           << m.optimizer_elements << ',' << m.activation_elements << '\n';
    }
    return os.str();
}

}  // namespace geopeft
