#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "geopeft/splits.hpp"
#include "geopeft/synthetic.hpp"
#include "geopeft/train.hpp"

namespace geopeft {

/// Config file grammar:
///   file    := line*
///   line    := blank | comment | section | entry
///   comment := '#' anything            (also allowed after a value)
///   section := '[' name ']'
///   entry   := key '=' value
/// Keys live in sections; lists are comma separated. Unknown sections or
/// keys, duplicates and malformed values are errors that name the line.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& origin, std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

enum class PeftMethod { Full, LinearProbe, Lora, Vpt, VitAdapter };
std::string to_string(PeftMethod m);
PeftMethod parse_peft_method(const std::string& s);

struct SplitSettings {
    std::string method = "buffered";  // buffered | balanced
    double buffer_km = 5.0;
    SplitRatios ratios;
    BalancedQuotas quotas;
    std::vector<std::string> excluded_regions;
    std::uint64_t seed = 0;
};

struct SweepSettings {
    std::size_t trials = 16;
    double lr_min = 1e-5;
    double lr_max = 1e-2;
    std::size_t budget_epochs = 10;
};

struct ProjectConfig {
    // [model], [decoder], [peft], [train]
    RunConfig run;
    PeftMethod method = PeftMethod::Full;
    LoraConfig lora;
    VptConfig vpt;
    VitAdapterConfig adapter;

    // [data]
    std::filesystem::path dataset;
    std::vector<std::string> bands;      // empty = every dataset band
    std::filesystem::path split_map;     // optional override of the manifest splits

    SyntheticConfig synthetic = default_synthetic_config();  // [synthetic]
    SplitSettings split;                 // [split]
    SweepSettings sweep;                 // [sweep]
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};  // [replicate]

    // [eval]
    std::filesystem::path checkpoint;
    std::vector<Split> eval_splits = {Split::Val, Split::Test, Split::Ghos};

    /// RunConfig with the PEFT attachment and freeze policy of `method`.
    RunConfig resolved_run() const;
};

ProjectConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ProjectConfig load_config(const std::filesystem::path& path);
/// Every key with its effective value; parse_config(write_config(c))
/// reproduces c.
std::string write_config(const ProjectConfig& cfg);

}  // namespace geopeft
