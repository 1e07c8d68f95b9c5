#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fedseq/config.hpp"
#include "fedseq/data.hpp"
#include "fedseq/fedsim.hpp"

namespace fedseq {

struct LoadedData {
    InteractionLog log;
    std::vector<ClientDataset> clients;
};

LoadedData load_data(const ExperimentSpec& spec);

/// Item with the fewest interactions, lowest id on ties.
ItemId least_popular_item(const InteractionLog& log);

/// Fills in num_items and, when requested, the automatic target.
ExperimentSpec resolve_spec(const ExperimentSpec& spec, const LoadedData& data);

struct RunOutcome {
    ExperimentSpec resolved;
    TrainingResult result;
};

/// Trains and writes rounds.jsonl, summary.csv, checkpoint.bin and
/// spec.resolved into spec.output_dir. Progress lines go to `log` if given.
RunOutcome run_experiment(const ExperimentSpec& spec, std::ostream* log = nullptr);

/// `round,metric,K,value` rows for every evaluated round of a rounds.jsonl.
std::string derive_summary(std::string_view rounds_jsonl);

/// Re-derives summary.csv from rounds.jsonl in `dir`; returns the CSV text.
std::string rewrite_summary(const std::filesystem::path& dir);

enum class Preset { attack_table, ablation, defense_table, ratio_sweep };

Preset parse_preset(std::string_view name);
std::string_view to_string(Preset p);

struct PresetRun {
    std::string label;
    ExperimentSpec spec;
};

/// Expands a base spec into the runs of a preset. Malicious fractions are
/// multiplied by base.desk_scale; each run writes under
/// <base.output_dir>/<preset>/<label>.
std::vector<PresetRun> expand_preset(Preset preset, const ExperimentSpec& base);

/// Runs every expanded spec and writes <base.output_dir>/<preset>/<preset>.csv
/// comparing final metrics. Returns the CSV path.
std::filesystem::path run_preset(Preset preset, const ExperimentSpec& base, std::ostream* log = nullptr);

}  // namespace fedseq
