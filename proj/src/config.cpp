#include "fedseq/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "fedseq/error.hpp"

namespace fedseq {
namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError("'" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
    return out;
}

std::size_t parse_size(std::string_view key, std::string_view v) { return parse_number<std::size_t>(key, v); }
double parse_real(std::string_view key, std::string_view v) { return parse_number<double>(key, v); }

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view v) {
    std::vector<std::size_t> out;
    while (true) {
        const auto comma = v.find(',');
        out.push_back(parse_size(key, trim(v.substr(0, comma))));
        if (comma == std::string_view::npos) break;
        v.remove_prefix(comma + 1);
    }
    return out;
}

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_list(const std::vector<std::size_t>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(values[i]);
    }
    return out;
}

template <typename F>
auto enum_value(std::string_view key, F parse, std::string_view v) {
    try {
        return parse(v);
    } catch (const Error& e) {
        throw ConfigError("'" + std::string(key) + "': " + e.what());
    }
}

struct Key {
    std::string name;
    std::string help;
    std::function<void(ExperimentSpec&, std::string_view)> set;
    std::function<std::string(const ExperimentSpec&)> get;
};

#define SIZE_KEY(name, field, help)                                                                      \
    Key {                                                                                                \
        name, help, [](ExperimentSpec& s, std::string_view v) { s.field = parse_size(name, v); },        \
            [](const ExperimentSpec& s) { return std::to_string(s.field); }                              \
    }
#define REAL_KEY(name, field, help)                                                                      \
    Key {                                                                                                \
        name, help, [](ExperimentSpec& s, std::string_view v) { s.field = parse_real(name, v); },        \
            [](const ExperimentSpec& s) { return format_real(s.field); }                                 \
    }
#define ENUM_KEY(name, field, parser, help)                                                              \
    Key {                                                                                                \
        name, help, [](ExperimentSpec& s, std::string_view v) { s.field = enum_value(name, parser, v); }, \
            [](const ExperimentSpec& s) { return std::string(to_string(s.field)); }                      \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        Key{"seed", "master seed for data, initialisation, sampling and evaluation (required)",
            [](ExperimentSpec& s, std::string_view v) { s.seed = parse_number<std::uint64_t>("seed", v); },
            [](const ExperimentSpec& s) { return std::to_string(s.seed); }},
        Key{"output_dir", "directory receiving run outputs",
            [](ExperimentSpec& s, std::string_view v) { s.output_dir = std::string(v); },
            [](const ExperimentSpec& s) { return s.output_dir; }},
        ENUM_KEY("data.source", data.source, parse_data_source, "synthetic | file (required)"),
        Key{"data.path", "corpus path when data.source = file",
            [](ExperimentSpec& s, std::string_view v) { s.data.path = std::string(v); },
            [](const ExperimentSpec& s) { return s.data.path; }},
        ENUM_KEY("data.format", data.format, parse_input_format, "ml1m | steam | tsv"),
        SIZE_KEY("data.synthetic_users", data.synthetic_users, "users in the synthetic corpus"),
        SIZE_KEY("data.synthetic_items", data.synthetic_items, "items in the synthetic corpus"),
        SIZE_KEY("data.synthetic_seq_len", data.synthetic_seq_len, "events per synthetic user"),
        ENUM_KEY("model.variant", shape.variant, parse_variant, "causal | bidirectional"),
        SIZE_KEY("model.dim", shape.dim, "hidden size"),
        SIZE_KEY("model.ffn_dim", shape.ffn_dim, "feed-forward inner size"),
        SIZE_KEY("model.max_len", shape.max_len, "maximum sequence length"),
        REAL_KEY("model.dropout", federation.local.dropout, "dropout on attention and feed-forward outputs"),
        REAL_KEY("model.mask_prob", federation.local.mask_prob, "cloze masking probability (bidirectional)"),
        SIZE_KEY("fed.rounds", federation.rounds, "federated rounds"),
        SIZE_KEY("fed.clients_per_round", federation.clients_per_round,
                 "clients sampled per round (all users when larger than the population)"),
        REAL_KEY("fed.server_lr", federation.server_lr, "server SGD learning rate"),
        REAL_KEY("fed.weight_decay", federation.weight_decay, "server weight decay"),
        SIZE_KEY("fed.local_negatives", federation.local.negatives, "sampled negatives per positive in local BCE"),
        ENUM_KEY("attack.method", attack.method, parse_attack_method, "none | ra | eb | ara | darts | c_fsr | s_fsr"),
        Key{"attack.targets", "auto (least popular item) or comma-separated item ids",
            [](ExperimentSpec& s, std::string_view v) {
                if (v == "auto") {
                    s.auto_target = true;
                    s.attack.target_items.clear();
                } else {
                    s.auto_target = false;
                    s.attack.target_items = parse_size_list("attack.targets", v);
                }
            },
            [](const ExperimentSpec& s) {
                return s.auto_target ? std::string("auto") : format_list(s.attack.target_items);
            }},
        REAL_KEY("attack.malicious_fraction", attack.malicious_fraction, "share of users that are malicious"),
        SIZE_KEY("attack.search_time", attack.search_time, "candidates tried by the substitution search"),
        REAL_KEY("attack.tau", attack.similarity_threshold, "minimum cosine similarity of a substitute"),
        SIZE_KEY("attack.contrastive_negatives", attack.contrastive_negatives, "negatives in the contrastive loss"),
        REAL_KEY("attack.scale", attack.attack_scale, "multiplier on uploaded malicious gradients"),
        SIZE_KEY("attack.ara_negatives", attack.ara_negatives, "sampled negatives in the A-ra boosting loss"),
        SIZE_KEY("attack.fake_seq_len", attack.fake_seq_len, "RA fake sequence length, 0 = the user's own"),
        REAL_KEY("attack.desk_scale", desk_scale, "factor presets apply to their malicious-fraction levels"),
        ENUM_KEY("defense.rule", defense.rule, parse_aggregation_rule, "fedavg | mixed_rfa"),
        REAL_KEY("defense.lambda", defense.lambda, "weight of the mean in mixed_rfa"),
        REAL_KEY("defense.gm_tolerance", defense.gm_tolerance, "Weiszfeld relative stopping tolerance"),
        SIZE_KEY("defense.gm_max_iters", defense.gm_max_iters, "Weiszfeld iteration cap"),
        REAL_KEY("defense.gm_smoothing", defense.gm_smoothing, "Weiszfeld distance floor"),
        ENUM_KEY("defense.gm_granularity", defense.granularity, parse_gm_granularity, "per_tensor | full"),
        SIZE_KEY("eval.every", federation.eval_every, "evaluate every N rounds, 0 = final round only"),
        Key{"eval.hr_ks", "cutoffs for HR and NDCG",
            [](ExperimentSpec& s, std::string_view v) { s.eval.hr_ks = parse_size_list("eval.hr_ks", v); },
            [](const ExperimentSpec& s) { return format_list(s.eval.hr_ks); }},
        Key{"eval.er_ks", "cutoffs for ER",
            [](ExperimentSpec& s, std::string_view v) { s.eval.er_ks = parse_size_list("eval.er_ks", v); },
            [](const ExperimentSpec& s) { return format_list(s.eval.er_ks); }},
        SIZE_KEY("eval.negatives", eval.negatives, "sampled negatives per ranked item"),
    };
    return table;
}

#undef SIZE_KEY
#undef REAL_KEY
#undef ENUM_KEY

const Key* find_key(std::string_view name) {
    for (const auto& k : keys())
        if (k.name == name) return &k;
    return nullptr;
}

}  // namespace

DataSource parse_data_source(std::string_view name) {
    if (name == "synthetic") return DataSource::synthetic;
    if (name == "file") return DataSource::file;
    throw ConfigError("unknown data source '" + std::string(name) + "' (valid: synthetic, file)");
}

std::string_view to_string(DataSource s) { return s == DataSource::synthetic ? "synthetic" : "file"; }

void ExperimentSpec::propagate_seed() {
    federation.seed = seed;
    attack.seed = seed;
    eval.seed = seed;
}

void ExperimentSpec::validate() const {
    if (data.source == DataSource::file && data.path.empty()) throw ConfigError("data.path is required for file data");
    if (shape.dim == 0 || shape.ffn_dim == 0) throw ConfigError("model dimensions must be positive");
    if (shape.max_len < 2) throw ConfigError("model.max_len must be at least 2");
    federation.validate();
    AttackConfig a = attack;
    if (auto_target && a.target_items.empty()) a.target_items = {1};
    a.validate();
    defense.validate();
    if (!(desk_scale > 0.0)) throw ConfigError("attack.desk_scale must be positive");
    if (eval.hr_ks.empty() || eval.er_ks.empty()) throw ConfigError("eval cutoffs must not be empty");
    for (std::size_t k : eval.hr_ks)
        if (k == 0) throw ConfigError("eval.hr_ks entries must be positive");
    for (std::size_t k : eval.er_ks)
        if (k == 0) throw ConfigError("eval.er_ks entries must be positive");
    if (eval.negatives == 0) throw ConfigError("eval.negatives must be positive");
}

ExperimentSpec parse_config(std::string_view text) {
    ExperimentSpec spec;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line(raw);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key(trim(line.substr(0, eq)));
        const std::string_view value = trim(line.substr(eq + 1));
        const Key* k = find_key(key);
        if (!k) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        try {
            k->set(spec, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    for (const char* required : {"seed", "data.source"})
        if (!seen.count(required)) throw ConfigError(std::string("missing required key '") + required + "'");
    spec.propagate_seed();
    spec.validate();
    return spec;
}

ExperimentSpec parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::string serialize_config(const ExperimentSpec& spec) {
    std::string out;
    for (const auto& k : keys()) out += k.name + " = " + k.get(spec) + "\n";
    return out;
}

std::string config_reference() {
    const ExperimentSpec defaults;
    std::size_t width = 0;
    for (const auto& k : keys()) width = std::max(width, k.name.size());
    std::ostringstream out;
    out << "Config keys (key = value, '#' starts a comment):\n";
    for (const auto& k : keys()) {
        std::string def = k.get(defaults);
        if (def.empty()) def = "\"\"";
        out << "  " << k.name << std::string(width - k.name.size() + 2, ' ') << "[" << def << "] " << k.help << '\n';
    }
    return out.str();
}

}  // namespace fedseq
