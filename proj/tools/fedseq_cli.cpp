#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedseq/config.hpp"
#include "fedseq/data.hpp"
#include "fedseq/error.hpp"
#include "fedseq/harness.hpp"
#include "fedseq/parallel.hpp"

namespace {

std::string error_kind(const std::exception& e) {
    using namespace fedseq;
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const ParseError*>(&e)) return "parse";
    if (dynamic_cast<const EmptyCorpusError*>(&e)) return "empty-corpus";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const AggregationError*>(&e)) return "aggregation";
    if (dynamic_cast<const SamplingError*>(&e)) return "sampling";
    if (dynamic_cast<const MetricError*>(&e)) return "metric";
    if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
    if (dynamic_cast<const IndexError*>(&e)) return "index";
    return "runtime";
}

fedseq::ExperimentSpec load_spec(const std::string& path, std::optional<std::uint64_t> seed,
                                 const std::string& out) {
    auto spec = fedseq::parse_config_file(path);
    if (seed) {
        spec.seed = *seed;
        spec.propagate_seed();
    }
    if (!out.empty()) spec.output_dir = out;
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated sequential recommendation poisoning simulator"};
    app.require_subcommand(1);
    app.footer("\n" + fedseq::config_reference() +
               "\nFEDSEQ_THREADS caps worker threads (default: hardware concurrency).");

    std::size_t threads = 0;
    app.add_option("--threads", threads, "Worker threads, overriding FEDSEQ_THREADS");

    auto* ingest = app.add_subcommand("ingest", "Parse a corpus, print statistics and optionally export id maps");
    std::string ingest_path;
    std::string ingest_format = "ml1m";
    std::string ingest_out;
    ingest->add_option("path", ingest_path, "Corpus file")->required();
    ingest->add_option("--format", ingest_format, "ml1m | steam | tsv")->capture_default_str();
    ingest->add_option("--out", ingest_out, "Directory for user_map.tsv, item_map.tsv and interactions.tsv");

    auto* run = app.add_subcommand("run", "Run one experiment from a config file");
    std::string run_config;
    std::optional<std::uint64_t> run_seed;
    std::string run_out;
    run->add_option("config", run_config, "Config file")->required();
    run->add_option("--seed", run_seed, "Override the config seed");
    run->add_option("--out", run_out, "Override output_dir");

    auto* preset = app.add_subcommand("preset", "Run a preset expansion of a base config");
    std::string preset_name;
    std::string preset_config;
    std::string preset_out;
    preset->add_option("name", preset_name, "attack_table | ablation | defense_table | ratio_sweep")->required();
    preset->add_option("config", preset_config, "Base config file")->required();
    preset->add_option("--out", preset_out, "Override output_dir");

    auto* report = app.add_subcommand("report", "Re-derive summary.csv from rounds.jsonl");
    std::string report_dir;
    report->add_option("dir", report_dir, "Run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) fedseq::set_worker_threads(threads);
        if (*ingest) {
            const auto log = fedseq::load_interactions(ingest_path, fedseq::parse_input_format(ingest_format));
            std::cout << "users " << log.num_users << "\nitems " << log.num_items << "\ninteractions "
                      << log.num_interactions() << "\nparsed_rows " << log.raw_interactions << '\n';
            if (!ingest_out.empty()) {
                std::filesystem::create_directories(ingest_out);
                fedseq::write_id_maps(log, ingest_out);
                fedseq::write_tsv(log, std::filesystem::path(ingest_out) / "interactions.tsv");
            }
        } else if (*run) {
            const auto spec = load_spec(run_config, run_seed, run_out);
            const auto outcome = fedseq::run_experiment(spec, &std::cerr);
            std::cout << "wrote " << outcome.resolved.output_dir << '\n';
        } else if (*preset) {
            const auto which = fedseq::parse_preset(preset_name);
            const auto spec = load_spec(preset_config, std::nullopt, preset_out);
            std::cout << "malicious fractions scaled by desk_scale = " << spec.desk_scale << '\n';
            const auto csv = fedseq::run_preset(which, spec, &std::cerr);
            std::cout << "wrote " << csv.string() << '\n';
        } else if (*report) {
            std::cout << fedseq::rewrite_summary(report_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << error_kind(e) << ": " << e.what() << '\n';
        return 1;
    }
    return 0;
}
