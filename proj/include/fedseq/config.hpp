#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fedseq/attacks.hpp"
#include "fedseq/data.hpp"
#include "fedseq/defense.hpp"
#include "fedseq/eval.hpp"
#include "fedseq/fedsim.hpp"
#include "fedseq/model.hpp"

namespace fedseq {

enum class DataSource { synthetic, file };

DataSource parse_data_source(std::string_view name);
std::string_view to_string(DataSource s);

struct DataSpec {
    DataSource source = DataSource::synthetic;
    std::string path;
    InputFormat format = InputFormat::ml1m;
    std::size_t synthetic_users = 200;
    std::size_t synthetic_items = 50;
    std::size_t synthetic_seq_len = 10;
};

/// Everything needed to reproduce one run. Shape fields other than
/// num_items come from the config; num_items is filled in from the data.
struct ExperimentSpec {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    DataSpec data;
    ModelShape shape;
    FederationConfig federation;
    AttackConfig attack;
    /// Resolve attack.target_items to the least popular item after loading.
    bool auto_target = true;
    /// Multiplier presets apply to their malicious-fraction levels.
    double desk_scale = 1.0;
    DefenseConfig defense;
    EvalConfig eval;

    /// Pushes `seed` into every seeded sub-config.
    void propagate_seed();
    void validate() const;
};

/// Parses flat `key = value` text. Blank lines and `#` comments are ignored.
/// `seed` and `data.source` are required; unknown keys, duplicate keys,
/// malformed values and unknown enum names are errors.
ExperimentSpec parse_config(std::string_view text);
ExperimentSpec parse_config_file(const std::filesystem::path& path);

/// Every effective setting, one `key = value` per line, in a fixed order.
std::string serialize_config(const ExperimentSpec& spec);

/// Documented keys with defaults and meanings, for --help.
std::string config_reference();

}  // namespace fedseq
