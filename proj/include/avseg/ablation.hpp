#pragma once

// Ablation presets: each preset is a list of named configuration variants
// trained once per seed and summarized as min / median / max over seeds.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avseg/config.hpp"

namespace avseg {

struct AblationVariant {
    std::string setting;  // row label
    std::function<void(RunConfig&)> apply;
};

std::vector<std::string> ablation_presets();
// Throws ConfigError for an unknown preset.
std::vector<AblationVariant> preset_variants(const std::string& preset);

struct Spread {
    double min = 0, median = 0, max = 0;
};
Spread spread_of(std::vector<double> values);

struct AblationRow {
    std::string setting;
    std::vector<std::uint64_t> seeds;
    std::vector<double> miou, fscore, audio_share;
    std::vector<std::size_t> steps;
};

// Whether the bidirectional row's median mIoU is at least that of each
// unidirectional row. Informational only.
struct DirectionCheck {
    double bidirectional_median = 0;
    std::vector<std::pair<std::string, double>> unidirectional_medians;
    bool holds = false;
};

struct AblationTable {
    std::string preset;
    std::string split;  // "held_out" or "train"
    std::vector<AblationRow> rows;
    std::optional<DirectionCheck> direction;
};

// Trains every variant of `preset` on top of `base` once per seed. A seed sets
// both the model initialization and the clip order; the data split is shared.
AblationTable run_ablation(const std::string& preset, const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                           const std::function<void(const std::string&)>& progress = {});

nlohmann::json to_json(const AblationTable& table);
std::string to_markdown(const AblationTable& table);
// Writes <dir>/<preset>.json and <dir>/<preset>.md.
void write_ablation(const AblationTable& table, const std::filesystem::path& dir);

}  // namespace avseg
