#include "geopeft/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace geopeft {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (item.empty()) throw std::invalid_argument("empty list element");
        out.push_back(item);
    }
    return out;
}

template <typename T>
T parse_number(const std::string& s) {
    T v{};
    const auto t = trim(s);
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
        throw std::invalid_argument("'" + s + "' is not a valid number");
    }
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::invalid_argument("'" + s + "' is not a boolean (true/false)");
}

std::string fmt(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <typename T>
std::string fmt_int(T v) {
    return std::to_string(v);
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
    return out;
}

template <typename T, typename F>
std::string join_map(const std::vector<T>& v, F f) {
    std::vector<std::string> s;
    for (const auto& x : v) s.push_back(f(x));
    return join(s);
}

template <typename T>
std::vector<T> parse_numbers(const std::string& s) {
    std::vector<T> out;
    for (const auto& item : split_list(s)) out.push_back(parse_number<T>(item));
    return out;
}

std::string fmt_region(const RegionSpec& r) {
    std::string s = r.name + ":" + fmt(r.lat) + ":" + fmt(r.lon);
    for (std::size_t i = 0; i < r.class_weights.size(); ++i) s += (i ? "/" : ":") + fmt(r.class_weights[i]);
    return s;
}

RegionSpec parse_region(const std::string& s) {
    const auto parts = split_list(s, ':');
    if (parts.size() < 3 || parts.size() > 4) throw std::invalid_argument("region '" + s + "' is not name:lat:lon[:w0/w1/...]");
    RegionSpec r{parts[0], parse_number<double>(parts[1]), parse_number<double>(parts[2]), {}};
    if (parts.size() == 4) {
        for (const auto& w : split_list(parts[3], '/')) r.class_weights.push_back(parse_number<double>(w));
    }
    return r;
}

struct Key {
    std::string section;
    std::string name;
    std::function<void(ProjectConfig&, const std::string&)> set;
    std::function<std::string(const ProjectConfig&)> get;
};

#define GEOPEFT_SIZE(sec, key, field)                                                              \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = parse_number<std::size_t>(v); }, \
            [](const ProjectConfig& c) { return fmt_int(c.field); }                                \
    }
#define GEOPEFT_U64(sec, key, field)                                                               \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = parse_number<std::uint64_t>(v); }, \
            [](const ProjectConfig& c) { return fmt_int(c.field); }                                \
    }
#define GEOPEFT_REAL(sec, key, field)                                                              \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = parse_number<double>(v); }, \
            [](const ProjectConfig& c) { return fmt(c.field); }                                    \
    }
#define GEOPEFT_BOOL(sec, key, field)                                                              \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = parse_bool(v); },        \
            [](const ProjectConfig& c) { return std::string(c.field ? "true" : "false"); }         \
    }
#define GEOPEFT_STRINGS(sec, key, field)                                                           \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = split_list(v); },        \
            [](const ProjectConfig& c) { return join(c.field); }                                   \
    }
#define GEOPEFT_SIZES(sec, key, field)                                                             \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = parse_numbers<std::size_t>(v); }, \
            [](const ProjectConfig& c) { return join_map(c.field, fmt_int<std::size_t>); }         \
    }
#define GEOPEFT_PATH(sec, key, field)                                                              \
    Key {                                                                                          \
        sec, key, [](ProjectConfig& c, const std::string& v) { c.field = v; },                    \
            [](const ProjectConfig& c) { return c.field.string(); }                                \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        GEOPEFT_SIZE("model", "embed_dim", run.model.backbone.embed_dim),
        GEOPEFT_SIZE("model", "depth", run.model.backbone.depth),
        GEOPEFT_SIZE("model", "heads", run.model.backbone.heads),
        GEOPEFT_SIZE("model", "patch_size", run.model.backbone.patch_size),
        GEOPEFT_REAL("model", "mlp_ratio", run.model.backbone.mlp_ratio),
        GEOPEFT_SIZE("model", "image_height", run.model.backbone.image_h),
        GEOPEFT_SIZE("model", "image_width", run.model.backbone.image_w),
        GEOPEFT_STRINGS("model", "bands", run.model.backbone.band_ids),
        GEOPEFT_SIZES("model", "tap_layers", run.model.backbone.tap_layers),
        GEOPEFT_BOOL("model", "metadata", run.model.backbone.metadata_enabled),
        GEOPEFT_U64("model", "backbone_seed", run.model.backbone_seed),

        Key{"decoder", "kind", [](ProjectConfig& c, const std::string& v) { c.run.model.decoder.kind = parse_decoder_kind(v); },
            [](const ProjectConfig& c) { return to_string(c.run.model.decoder.kind); }},
        GEOPEFT_SIZE("decoder", "num_classes", run.model.decoder.num_classes),
        GEOPEFT_SIZE("decoder", "fcn_hidden", run.model.decoder.fcn_hidden),
        GEOPEFT_SIZE("decoder", "upernet_channels", run.model.decoder.upernet_channels),
        GEOPEFT_SIZES("decoder", "ppm_scales", run.model.decoder.ppm_scales),
        GEOPEFT_SIZES("decoder", "unet_widths", run.model.decoder.unet_widths),

        Key{"peft", "method", [](ProjectConfig& c, const std::string& v) { c.method = parse_peft_method(v); },
            [](const ProjectConfig& c) { return to_string(c.method); }},
        GEOPEFT_BOOL("peft", "freeze_patch_embedding", run.freeze.freeze_patch_embedding),
        GEOPEFT_SIZE("peft", "lora_rank", lora.rank),
        Key{"peft", "lora_targets",
            [](ProjectConfig& c, const std::string& v) {
                c.lora.targets.clear();
                for (const auto& t : split_list(v)) c.lora.targets.push_back(parse_lora_target(t));
            },
            [](const ProjectConfig& c) { return join_map(c.lora.targets, [](LoraTarget t) { return to_string(t); }); }},
        Key{"peft", "lora_scaling", [](ProjectConfig& c, const std::string& v) { c.lora.scaling = parse_number<float>(v); },
            [](const ProjectConfig& c) { return fmt(c.lora.scaling); }},
        GEOPEFT_REAL("peft", "lora_init_std", lora.init_std),
        GEOPEFT_SIZE("peft", "vpt_prompts", vpt.prompts_per_layer),
        GEOPEFT_REAL("peft", "vpt_init_range", vpt.init_range),
        GEOPEFT_SIZE("peft", "adapter_stem_width", adapter.stem_width),
        GEOPEFT_SIZES("peft", "adapter_injection_layers", adapter.injection_layers),

        GEOPEFT_REAL("train", "lr", run.lr),
        GEOPEFT_SIZE("train", "batch_size", run.batch_size),
        GEOPEFT_SIZE("train", "max_epochs", run.max_epochs),
        GEOPEFT_SIZE("train", "early_stop_patience", run.early_stop_patience),
        GEOPEFT_SIZE("train", "plateau_patience", run.plateau_patience),
        GEOPEFT_REAL("train", "plateau_factor", run.plateau_factor),
        GEOPEFT_REAL("train", "beta1", run.beta1),
        GEOPEFT_REAL("train", "beta2", run.beta2),
        GEOPEFT_REAL("train", "weight_decay", run.weight_decay),
        GEOPEFT_U64("train", "seed", run.seed),
        GEOPEFT_PATH("train", "init_checkpoint", run.init_checkpoint),

        GEOPEFT_PATH("data", "root", dataset),
        GEOPEFT_STRINGS("data", "bands", bands),
        GEOPEFT_PATH("data", "split_map", split_map),

        GEOPEFT_SIZE("synthetic", "samples_per_region", synthetic.samples_per_region),
        Key{"synthetic", "regions",
            [](ProjectConfig& c, const std::string& v) {
                c.synthetic.regions.clear();
                for (const auto& r : split_list(v)) c.synthetic.regions.push_back(parse_region(r));
            },
            [](const ProjectConfig& c) { return join_map(c.synthetic.regions, fmt_region); }},
        Key{"synthetic", "ghos_region", [](ProjectConfig& c, const std::string& v) { c.synthetic.ghos_region = v; },
            [](const ProjectConfig& c) { return c.synthetic.ghos_region; }},
        GEOPEFT_STRINGS("synthetic", "bands", synthetic.bands),
        GEOPEFT_SIZE("synthetic", "height", synthetic.height),
        GEOPEFT_SIZE("synthetic", "width", synthetic.width),
        GEOPEFT_SIZE("synthetic", "num_classes", synthetic.num_classes),
        GEOPEFT_REAL("synthetic", "noise", synthetic.noise),
        GEOPEFT_REAL("synthetic", "region_offset", synthetic.region_offset),
        GEOPEFT_REAL("synthetic", "ghos_offset", synthetic.ghos_offset),
        GEOPEFT_REAL("synthetic", "drift", synthetic.drift),
        GEOPEFT_SIZE("synthetic", "layout_cells", synthetic.layout_cells),
        GEOPEFT_REAL("synthetic", "transect_deg", synthetic.transect_deg),
        GEOPEFT_U64("synthetic", "seed", synthetic.seed),

        Key{"split", "method",
            [](ProjectConfig& c, const std::string& v) {
                if (v != "buffered" && v != "balanced") throw std::invalid_argument("split method must be buffered or balanced");
                c.split.method = v;
            },
            [](const ProjectConfig& c) { return c.split.method; }},
        GEOPEFT_REAL("split", "buffer_km", split.buffer_km),
        Key{"split", "ratios",
            [](ProjectConfig& c, const std::string& v) {
                const auto r = parse_numbers<double>(v);
                if (r.size() != 3) throw std::invalid_argument("ratios need 3 values (train, val, test)");
                c.split.ratios = {r[0], r[1], r[2]};
            },
            [](const ProjectConfig& c) {
                return join({fmt(c.split.ratios.train), fmt(c.split.ratios.val), fmt(c.split.ratios.test)});
            }},
        Key{"split", "quotas",
            [](ProjectConfig& c, const std::string& v) {
                const auto q = parse_numbers<std::size_t>(v);
                if (q.size() != 4) throw std::invalid_argument("quotas need 4 values (train, val, test, ghos)");
                c.split.quotas = {q[0], q[1], q[2], q[3]};
            },
            [](const ProjectConfig& c) {
                const auto& q = c.split.quotas;
                return join_map(std::vector<std::size_t>{q.train, q.val, q.test, q.ghos}, fmt_int<std::size_t>);
            }},
        GEOPEFT_STRINGS("split", "excluded_regions", split.excluded_regions),
        GEOPEFT_U64("split", "seed", split.seed),

        GEOPEFT_SIZE("sweep", "trials", sweep.trials),
        GEOPEFT_REAL("sweep", "lr_min", sweep.lr_min),
        GEOPEFT_REAL("sweep", "lr_max", sweep.lr_max),
        GEOPEFT_SIZE("sweep", "budget_epochs", sweep.budget_epochs),

        Key{"replicate", "seeds", [](ProjectConfig& c, const std::string& v) { c.seeds = parse_numbers<std::uint64_t>(v); },
            [](const ProjectConfig& c) { return join_map(c.seeds, fmt_int<std::uint64_t>); }},

        GEOPEFT_PATH("eval", "checkpoint", checkpoint),
        Key{"eval", "splits",
            [](ProjectConfig& c, const std::string& v) {
                c.eval_splits.clear();
                for (const auto& s : split_list(v)) c.eval_splits.push_back(parse_split(s));
            },
            [](const ProjectConfig& c) { return join_map(c.eval_splits, [](Split s) { return to_string(s); }); }},
    };
    return table;
}

#undef GEOPEFT_SIZE
#undef GEOPEFT_U64
#undef GEOPEFT_REAL
#undef GEOPEFT_BOOL
#undef GEOPEFT_STRINGS
#undef GEOPEFT_SIZES
#undef GEOPEFT_PATH

}  // namespace

ConfigError::ConfigError(const std::string& origin, std::size_t line, const std::string& what)
    : std::runtime_error(origin + ":" + std::to_string(line) + ": " + what), line_(line) {}

std::string to_string(PeftMethod m) {
    switch (m) {
        case PeftMethod::Full: return "full";
        case PeftMethod::LinearProbe: return "linear-probe";
        case PeftMethod::Lora: return "lora";
        case PeftMethod::Vpt: return "vpt";
        case PeftMethod::VitAdapter: return "vit-adapter";
    }
    return "?";
}

PeftMethod parse_peft_method(const std::string& s) {
    for (auto m : {PeftMethod::Full, PeftMethod::LinearProbe, PeftMethod::Lora, PeftMethod::Vpt, PeftMethod::VitAdapter}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown PEFT method '" + s + "' (full, linear-probe, lora, vpt, vit-adapter)");
}

RunConfig ProjectConfig::resolved_run() const {
    RunConfig r = run;
    r.model.lora.reset();
    r.model.vpt.reset();
    r.model.adapter.reset();
    switch (method) {
        case PeftMethod::Full: r.policy = FreezePolicy::Full; break;
        case PeftMethod::LinearProbe: r.policy = FreezePolicy::LinearProbe; break;
        case PeftMethod::Lora:
            r.policy = FreezePolicy::Lora;
            r.model.lora = lora;
            break;
        case PeftMethod::Vpt:
            r.policy = FreezePolicy::Vpt;
            r.model.vpt = vpt;
            break;
        case PeftMethod::VitAdapter:
            r.policy = FreezePolicy::VitAdapter;
            r.model.adapter = adapter;
            break;
    }
    return r;
}

ProjectConfig parse_config(const std::string& text, const std::string& origin) {
    std::map<std::string, std::map<std::string, const Key*>> index;
    for (const auto& k : keys()) index[k.section][k.name] = &k;
    ProjectConfig cfg;
    std::string section;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(origin, line_no, "malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (!index.count(section)) throw ConfigError(origin, line_no, "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(origin, line_no, "expected key = value, got '" + line + "'");
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(origin, line_no, "key '" + key + "' appears before any [section]");
        const auto it = index[section].find(key);
        if (it == index[section].end()) throw ConfigError(origin, line_no, "unknown key '" + key + "' in [" + section + "]");
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(origin, line_no, "duplicate key '" + key + "' in [" + section + "]");
        }
        try {
            it->second->set(cfg, value);
        } catch (const std::exception& e) {
            throw ConfigError(origin, line_no, section + "." + key + ": " + e.what());
        }
    }
    try {
        cfg.resolved_run().validate();
        cfg.run.model.decoder.validate();
    } catch (const std::exception& e) {
        throw ConfigError(origin, line_no, std::string("invalid configuration: ") + e.what());
    }
    return cfg;
}

ProjectConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    auto cfg = parse_config(ss.str(), path.string());
    // Relative input paths are taken relative to the config file.
    const auto base = std::filesystem::absolute(path).parent_path();
    for (auto* p : {&cfg.dataset, &cfg.split_map, &cfg.checkpoint, &cfg.run.init_checkpoint}) {
        if (!p->empty() && p->is_relative()) *p = (base / *p).lexically_normal();
    }
    return cfg;
}

std::string write_config(const ProjectConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const auto& k : keys()) {
        if (k.section != section) {
            os << (section.empty() ? "" : "\n") << "[" << k.section << "]\n";
            section = k.section;
        }
        os << k.name << " = " << k.get(cfg) << "\n";
    }
    return os.str();
}

}  // namespace geopeft
