#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fx/engine.hpp"
#include "fx/model.hpp"
#include "fx/synthdata.hpp"

namespace fx {

/// Invalid configuration. The message carries the field path (e.g.
/// "train.lr_loc") or the parse location.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FinetuneSection {
    SynthDatasetSpec dataset;
    FinetuneConfig options;
};

struct RunConfig {
    std::vector<SynthDatasetSpec> datasets;
    ArchConfig arch;
    TrainConfig train;
    std::string output_dir = "runs/default";
    std::uint64_t split_seed = 0;
    std::optional<FinetuneSection> finetune;

    void validate() const;
};

nlohmann::json dataset_spec_to_json(const SynthDatasetSpec& spec);
/// Strict: unknown keys and wrong types raise ConfigError naming `path`.
SynthDatasetSpec dataset_spec_from_json(const nlohmann::json& j, const std::string& path);

nlohmann::json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j, const std::string& path);

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Normalized form with every default filled in; stable key order.
std::string canonical_config(const RunConfig& config);
std::uint64_t config_hash(const RunConfig& config);

/// Built-in experiment presets: "table3", "smoke", "ablation-loc", "finetune-loc".
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace fx
