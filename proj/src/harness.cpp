#include "fedseq/harness.hpp"

#include <charconv>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fedseq/checkpoint.hpp"
#include "fedseq/error.hpp"

namespace fedseq {
namespace {

namespace fs = std::filesystem;

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

const MetricsReport& final_metrics(const RunOutcome& run) {
    for (auto it = run.result.reports.rbegin(); it != run.result.reports.rend(); ++it)
        if (it->metrics) return *it->metrics;
    throw MetricError("run produced no metrics");
}

std::string metric_cell(const std::map<std::size_t, double>& values, std::size_t k) {
    auto it = values.find(k);
    return it == values.end() ? std::string() : format_real(it->second);
}

}  // namespace

LoadedData load_data(const ExperimentSpec& spec) {
    LoadedData d;
    if (spec.data.source == DataSource::synthetic)
        d.log = generate_synthetic(spec.data.synthetic_users, spec.data.synthetic_items, spec.data.synthetic_seq_len,
                                   spec.seed);
    else
        d.log = load_interactions(spec.data.path, spec.data.format);
    d.clients = leave_one_out_split(d.log, spec.shape.max_len);
    return d;
}

ItemId least_popular_item(const InteractionLog& log) {
    if (log.num_items == 0) throw EmptyCorpusError("corpus has no items");
    std::vector<std::size_t> count(log.num_items + 1, 0);
    for (const auto& events : log.events)
        for (const Event& e : events) ++count[e.item];
    ItemId best = 1;
    for (ItemId i = 2; i <= log.num_items; ++i)
        if (count[i] < count[best]) best = i;
    return best;
}

ExperimentSpec resolve_spec(const ExperimentSpec& spec, const LoadedData& data) {
    ExperimentSpec out = spec;
    out.shape.num_items = data.log.num_items;
    if (out.auto_target) {
        out.attack.target_items = {least_popular_item(data.log)};
        out.auto_target = false;
    }
    for (ItemId t : out.attack.target_items)
        if (t == kPaddingItem || t > out.shape.num_items)
            throw ConfigError("target item " + std::to_string(t) + " is outside [1, " +
                              std::to_string(out.shape.num_items) + "]");
    out.validate();
    return out;
}

RunOutcome run_experiment(const ExperimentSpec& spec, std::ostream* log) {
    const LoadedData data = load_data(spec);
    RunOutcome run;
    run.resolved = resolve_spec(spec, data);
    const ExperimentSpec& r = run.resolved;

    const fs::path dir = r.output_dir;
    fs::create_directories(dir);
    write_text(dir / "spec.resolved", serialize_config(r));

    TrainingSetup setup;
    setup.shape = r.shape;
    setup.federation = r.federation;
    setup.attack = r.attack;
    setup.defense = r.defense;
    setup.eval = r.eval;

    std::ofstream rounds(dir / "rounds.jsonl", std::ios::binary | std::ios::trunc);
    if (!rounds) throw Error("cannot open " + (dir / "rounds.jsonl").string());
    run.result = run_training(data.clients, setup, [&](const RoundReport& report) {
        rounds << to_jsonl(report) << '\n';
        rounds.flush();
        if (!log) return;
        *log << "round " << report.round << "/" << r.federation.rounds << " loss " << report.train_loss_mean
             << " malicious " << report.num_malicious_selected;
        if (report.metrics) {
            for (const auto& [k, v] : report.metrics->hr) *log << " HR@" << k << " " << v;
            for (const auto& [k, v] : report.metrics->er) *log << " ER@" << k << " " << v;
        }
        *log << '\n';
    });
    rounds.close();

    write_checkpoint(run.result.params, dir / "checkpoint.bin");
    rewrite_summary(dir);
    return run;
}

std::string derive_summary(std::string_view rounds_jsonl) {
    std::string out = "round,metric,K,value\n";
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < rounds_jsonl.size()) {
        auto nl = rounds_jsonl.find('\n', pos);
        if (nl == std::string_view::npos) nl = rounds_jsonl.size();
        const std::string_view line = rounds_jsonl.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        RoundReport report;
        try {
            report = round_report_from_json(line);
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad round record: ") + e.what(), line_no);
        }
        if (!report.metrics) continue;
        const auto emit = [&](std::string_view name, const std::map<std::size_t, double>& values) {
            for (const auto& [k, v] : values)
                out += std::to_string(report.round) + "," + std::string(name) + "," + std::to_string(k) + "," +
                       format_real(v) + "\n";
        };
        emit("HR", report.metrics->hr);
        emit("NDCG", report.metrics->ndcg);
        emit("ER", report.metrics->er);
    }
    return out;
}

std::string rewrite_summary(const fs::path& dir) {
    const std::string csv = derive_summary(read_text(dir / "rounds.jsonl"));
    write_text(dir / "summary.csv", csv);
    return csv;
}

Preset parse_preset(std::string_view name) {
    if (name == "attack_table") return Preset::attack_table;
    if (name == "ablation") return Preset::ablation;
    if (name == "defense_table") return Preset::defense_table;
    if (name == "ratio_sweep") return Preset::ratio_sweep;
    throw ConfigError("unknown preset '" + std::string(name) +
                      "' (valid: attack_table, ablation, defense_table, ratio_sweep)");
}

std::string_view to_string(Preset p) {
    switch (p) {
        case Preset::attack_table: return "attack_table";
        case Preset::ablation: return "ablation";
        case Preset::defense_table: return "defense_table";
        case Preset::ratio_sweep: return "ratio_sweep";
    }
    return "?";
}

std::vector<PresetRun> expand_preset(Preset preset, const ExperimentSpec& base) {
    const fs::path root = fs::path(base.output_dir) / std::string(to_string(preset));
    std::vector<PresetRun> runs;
    auto add = [&](std::string label, ExperimentSpec spec) {
        spec.output_dir = (root / label).string();
        runs.push_back({std::move(label), std::move(spec)});
    };
    const AttackMethod attack = base.attack.method == AttackMethod::none ? AttackMethod::darts : base.attack.method;
    switch (preset) {
        case Preset::attack_table:
            for (AttackMethod m :
                 {AttackMethod::none, AttackMethod::ra, AttackMethod::eb, AttackMethod::ara, AttackMethod::darts}) {
                ExperimentSpec s = base;
                s.attack.method = m;
                s.attack.malicious_fraction = base.attack.malicious_fraction * base.desk_scale;
                add(std::string(to_string(m)), s);
            }
            break;
        case Preset::ablation:
            for (AttackMethod m : {AttackMethod::c_fsr, AttackMethod::s_fsr, AttackMethod::darts}) {
                ExperimentSpec s = base;
                s.attack.method = m;
                s.attack.malicious_fraction = base.attack.malicious_fraction * base.desk_scale;
                add(std::string(to_string(m)), s);
            }
            break;
        case Preset::defense_table:
            for (AggregationRule rule : {AggregationRule::fedavg, AggregationRule::mixed_rfa}) {
                for (double m : {0.0005, 0.001, 0.002}) {
                    ExperimentSpec s = base;
                    s.attack.method = attack;
                    s.defense.rule = rule;
                    s.attack.malicious_fraction = m * base.desk_scale;
                    add(std::string(to_string(rule)) + "_m" + format_real(m), s);
                }
            }
            break;
        case Preset::ratio_sweep:
            for (double m : {0.001, 0.002, 0.003, 0.004, 0.005, 0.01}) {
                ExperimentSpec s = base;
                s.attack.method = attack;
                s.attack.malicious_fraction = m * base.desk_scale;
                add("m" + format_real(m), s);
            }
            break;
    }
    return runs;
}

fs::path run_preset(Preset preset, const ExperimentSpec& base, std::ostream* log) {
    const auto runs = expand_preset(preset, base);
    if (log)
        *log << "preset " << to_string(preset) << ": " << runs.size()
             << " runs, malicious fractions scaled by desk_scale = " << format_real(base.desk_scale) << '\n';
    std::vector<RunOutcome> outcomes;
    for (const auto& run : runs) {
        if (log) *log << "== " << run.label << " -> " << run.spec.output_dir << '\n';
        outcomes.push_back(run_experiment(run.spec, log));
    }

    std::ostringstream csv;
    if (preset == Preset::ablation) {
        csv << "variant,malicious_fraction,desk_scale,attack";
        for (std::size_t k : base.eval.er_ks) csv << ",ER@" << k;
        csv << '\n';
        for (const auto& o : outcomes) {
            const auto& m = final_metrics(o);
            csv << to_string(o.resolved.shape.variant) << ',' << format_real(o.resolved.attack.malicious_fraction) << ','
                << format_real(base.desk_scale) << ',' << to_string(o.resolved.attack.method);
            for (std::size_t k : base.eval.er_ks) csv << ',' << metric_cell(m.er, k);
            csv << '\n';
        }
    } else {
        csv << "run,variant,attack,defense,malicious_fraction,desk_scale,malicious_clients";
        for (std::size_t k : base.eval.hr_ks) csv << ",HR@" << k << ",NDCG@" << k;
        for (std::size_t k : base.eval.er_ks) csv << ",ER@" << k;
        csv << '\n';
        for (std::size_t i = 0; i < outcomes.size(); ++i) {
            const auto& o = outcomes[i];
            const auto& m = final_metrics(o);
            csv << runs[i].label << ',' << to_string(o.resolved.shape.variant) << ','
                << to_string(o.resolved.attack.method) << ',' << to_string(o.resolved.defense.rule) << ','
                << format_real(o.resolved.attack.malicious_fraction) << ',' << format_real(base.desk_scale) << ','
                << o.result.malicious.users.size();
            for (std::size_t k : base.eval.hr_ks) csv << ',' << metric_cell(m.hr, k) << ',' << metric_cell(m.ndcg, k);
            for (std::size_t k : base.eval.er_ks) csv << ',' << metric_cell(m.er, k);
            csv << '\n';
        }
    }
    const fs::path root = fs::path(base.output_dir) / std::string(to_string(preset));
    fs::create_directories(root);
    const fs::path out = root / (std::string(to_string(preset)) + ".csv");
    write_text(out, csv.str());
    return out;
}

}  // namespace fedseq
