#include "geopeft/peft.hpp"

#include <stdexcept>

namespace geopeft {

std::string to_string(LoraTarget t) {
    switch (t) {
        case LoraTarget::Query: return "q";
        case LoraTarget::Value: return "v";
        case LoraTarget::Fc1: return "fc1";
        case LoraTarget::Fc2: return "fc2";
    }
    return "?";
}

LoraTarget parse_lora_target(const std::string& s) {
    if (s == "q" || s == "query") return LoraTarget::Query;
    if (s == "v" || s == "value") return LoraTarget::Value;
    if (s == "fc1") return LoraTarget::Fc1;
    if (s == "fc2") return LoraTarget::Fc2;
    throw std::invalid_argument("unknown LoRA target '" + s + "' (expected q, v, fc1, fc2)");
}

namespace {

nn::Linear& target_of(Block& blk, LoraTarget t) {
    switch (t) {
        case LoraTarget::Query: return blk.q;
        case LoraTarget::Value: return blk.v;
        case LoraTarget::Fc1: return blk.fc1;
        case LoraTarget::Fc2: return blk.fc2;
    }
    throw std::invalid_argument("bad LoRA target");
}

void merge_into(nn::Linear& l) {
    if (!l.has_lora()) return;
    if (!l.weight.is_meta()) {
        const std::size_t out = l.out_features(), in = l.in_features(), r = l.lora_a.size(0);
        auto w = l.weight.mutable_data();
        const auto a = l.lora_a.data();
        const auto b = l.lora_b.data();
        for (std::size_t i = 0; i < out; ++i) {
            for (std::size_t j = 0; j < in; ++j) {
                double acc = 0;
                for (std::size_t k = 0; k < r; ++k) acc += static_cast<double>(b[i * r + k]) * a[k * in + j];
                w[i * in + j] += static_cast<float>(l.lora_scaling * acc);
            }
        }
    }
    l.lora_a = Tensor();
    l.lora_b = Tensor();
}

}  // namespace

void attach_lora(ViTBackbone& backbone, const LoraConfig& cfg, Rng& rng) {
    if (cfg.rank < 1) throw std::invalid_argument("attach_lora: rank must be >= 1");
    if (cfg.targets.empty()) throw std::invalid_argument("attach_lora: no targets");
    if (backbone.blocks.empty()) throw std::invalid_argument("attach_lora: backbone has no transformer blocks");
    for (auto& blk : backbone.blocks) {
        for (auto t : cfg.targets) {
            auto& l = target_of(blk, t);
            if (!l.weight.defined()) throw std::invalid_argument("attach_lora: target " + to_string(t) + " absent");
            if (l.has_lora()) throw std::invalid_argument("attach_lora: target " + to_string(t) + " already wrapped");
            l.lora_a = nn::normal_param({cfg.rank, l.in_features()}, cfg.init_std, rng);
            l.lora_b = nn::constant_param({l.out_features(), cfg.rank}, 0.0f);
            l.lora_scaling = cfg.scaling;
        }
    }
}

ViTBackbone merge_lora(const ViTBackbone& backbone) {
    auto merged = backbone.clone();
    for (auto& blk : merged.blocks) {
        for (auto* l : {&blk.q, &blk.k, &blk.v, &blk.proj, &blk.fc1, &blk.fc2}) merge_into(*l);
    }
    return merged;
}

void attach_vpt(ViTBackbone& backbone, const VptConfig& cfg, Rng& rng) {
    if (cfg.prompts_per_layer == 0) throw std::invalid_argument("attach_vpt: prompts_per_layer must be positive");
    if (!backbone.prompts.empty()) throw std::invalid_argument("attach_vpt: prompts already attached");
    const std::size_t d = backbone.config().embed_dim;
    for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
        backbone.prompts.push_back(nn::uniform_param({cfg.prompts_per_layer, d}, -cfg.init_range, cfg.init_range, rng));
    }
}

void attach_vit_adapter(ViTBackbone& backbone, const VitAdapterConfig& cfg, Rng& rng) {
    if (backbone.adapter) throw std::invalid_argument("attach_vit_adapter: adapter already attached");
    backbone.adapter = std::make_shared<VitAdapter>(VitAdapter::make(backbone.config(), cfg, rng));
}

std::string to_string(FreezePolicy p) {
    switch (p) {
        case FreezePolicy::Full: return "full";
        case FreezePolicy::LinearProbe: return "linear-probe";
        case FreezePolicy::Lora: return "lora";
        case FreezePolicy::Vpt: return "vpt";
        case FreezePolicy::VitAdapter: return "vit-adapter";
    }
    return "?";
}

FreezePolicy parse_freeze_policy(const std::string& s) {
    if (s == "full" || s == "full-fine-tune") return FreezePolicy::Full;
    if (s == "linear-probe") return FreezePolicy::LinearProbe;
    if (s == "lora") return FreezePolicy::Lora;
    if (s == "vpt") return FreezePolicy::Vpt;
    if (s == "vit-adapter") return FreezePolicy::VitAdapter;
    throw std::invalid_argument("unknown freeze policy '" + s + "'");
}

std::string parameter_group(const std::string& name) {
    const auto dot = name.find('.');
    const auto g = name.substr(0, dot);
    for (const char* known : {"encoder", "lora", "vpt", "adapter", "neck", "decoder"}) {
        if (g == known) return g;
    }
    throw std::invalid_argument("parameter '" + name + "' has no recognised group prefix");
}

std::set<std::string> apply_freeze_policy(ParameterList& params, FreezePolicy policy, FreezeOptions opts) {
    std::set<std::string> present;
    for (const auto& p : params) {
        if (!p.buffer) present.insert(parameter_group(p.name));
    }
    const std::map<FreezePolicy, std::string> needs = {
        {FreezePolicy::Lora, "lora"}, {FreezePolicy::Vpt, "vpt"}, {FreezePolicy::VitAdapter, "adapter"}};
    for (const char* attachment : {"lora", "vpt", "adapter"}) {
        auto it = needs.find(policy);
        const bool wanted = it != needs.end() && it->second == attachment;
        if (present.count(attachment) && !wanted) {
            throw std::invalid_argument("freeze policy " + to_string(policy) + " incompatible with attached " + attachment);
        }
        if (!present.count(attachment) && wanted) {
            throw std::invalid_argument("freeze policy " + to_string(policy) + " requires an attached " + attachment);
        }
    }
    std::set<std::string> trainable;
    for (auto& p : params) {
        if (p.buffer) {
            p.tensor.set_requires_grad(false);
            continue;
        }
        const auto g = parameter_group(p.name);
        bool train = g == "neck" || g == "decoder" || (g != "encoder" && policy != FreezePolicy::LinearProbe);
        if (g == "encoder" && policy == FreezePolicy::Full) {
            train = !(opts.freeze_patch_embedding && p.name.rfind("encoder.patch_embed.", 0) == 0);
        }
        p.tensor.set_requires_grad(train);
        if (train) trainable.insert(p.name);
    }
    return trainable;
}

ParameterReport count_parameters(const ParameterList& params) {
    ParameterReport r;
    for (const auto& p : params) {
        if (p.buffer) continue;
        const auto n = p.tensor.numel();
        r.total += n;
        if (p.tensor.requires_grad()) r.trainable += n;
        r.per_group[parameter_group(p.name)] += n;
    }
    r.encoder = r.group("encoder");
    r.trainable_fraction = r.total ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
    return r;
}

std::size_t lora_parameter_count(const BackboneConfig& cfg, const LoraConfig& lora) {
    const std::size_t d = cfg.embed_dim, m = cfg.mlp_dim();
    std::size_t per_layer = 0;
    for (auto t : lora.targets) {
        // A: r x in, B: out x r.
        switch (t) {
            case LoraTarget::Query:
            case LoraTarget::Value: per_layer += lora.rank * (d + d); break;
            case LoraTarget::Fc1:
            case LoraTarget::Fc2: per_layer += lora.rank * (d + m); break;
        }
    }
    return cfg.depth * per_layer;
}

std::size_t vpt_parameter_count(const BackboneConfig& cfg, const VptConfig& vpt) {
    return cfg.depth * vpt.prompts_per_layer * cfg.embed_dim;
}

std::size_t encoder_parameter_count(const BackboneConfig& cfg) {
    const std::size_t d = cfg.embed_dim, m = cfg.mlp_dim(), p = cfg.patch_size;
    std::size_t n = cfg.band_ids.size() * d * p * p + d + cfg.num_tokens() * d;
    if (cfg.metadata_enabled) n += 7 * d + d;
    const std::size_t block = 2 * 2 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d);
    return n + cfg.depth * block + 2 * d;
}

}  // namespace geopeft
