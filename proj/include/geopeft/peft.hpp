#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "geopeft/vit.hpp"

namespace geopeft {

enum class LoraTarget { Query, Value, Fc1, Fc2 };

std::string to_string(LoraTarget t);
LoraTarget parse_lora_target(const std::string& s);

struct LoraConfig {
    std::size_t rank = 16;
    std::vector<LoraTarget> targets = {LoraTarget::Query, LoraTarget::Value, LoraTarget::Fc1, LoraTarget::Fc2};
    float scaling = 1.0f;
    double init_std = 0.02;
};

struct VptConfig {
    std::size_t prompts_per_layer = 100;
    double init_range = 0.1;
};

/// Wraps each targeted linear map of every block with A ~ N(0, init_std),
/// B = 0, so the adapted forward equals the base forward at attachment.
void attach_lora(ViTBackbone& backbone, const LoraConfig& cfg, Rng& rng);

/// Copy of the backbone with W + scaling * B A folded into every wrapped
/// weight and the low-rank pairs removed.
ViTBackbone merge_lora(const ViTBackbone& backbone);

/// VPT-Deep: a fresh [P, d] prompt block for every layer, U(-r, r).
void attach_vpt(ViTBackbone& backbone, const VptConfig& cfg, Rng& rng);

void attach_vit_adapter(ViTBackbone& backbone, const VitAdapterConfig& cfg, Rng& rng);

enum class FreezePolicy { Full, LinearProbe, Lora, Vpt, VitAdapter };

std::string to_string(FreezePolicy p);
FreezePolicy parse_freeze_policy(const std::string& s);

struct FreezeOptions {
    /// Keep the band slabs and patch bias fixed even under full fine-tuning.
    bool freeze_patch_embedding = false;
};

/// Marks requires_grad on every non-buffer parameter according to the
/// policy and returns the trainable names. Parameter groups are recognised
/// by name prefix: encoder., lora., vpt., adapter., neck., decoder.
std::set<std::string> apply_freeze_policy(ParameterList& params, FreezePolicy policy, FreezeOptions opts = {});

/// Attachment group of a parameter name ("encoder", "lora", "vpt",
/// "adapter", "neck", "decoder").
std::string parameter_group(const std::string& name);

struct ParameterReport {
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t encoder = 0;
    std::map<std::string, std::size_t> per_group;
    double trainable_fraction = 0.0;

    std::size_t group(const std::string& g) const {
        auto it = per_group.find(g);
        return it == per_group.end() ? 0 : it->second;
    }
};

/// Exact element counts; buffers (running statistics) are not parameters.
ParameterReport count_parameters(const ParameterList& params);

// Closed forms.
std::size_t lora_parameter_count(const BackboneConfig& cfg, const LoraConfig& lora);
std::size_t vpt_parameter_count(const BackboneConfig& cfg, const VptConfig& vpt);
std::size_t encoder_parameter_count(const BackboneConfig& cfg);

}  // namespace geopeft
