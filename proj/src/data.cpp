#include "fedseq/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "fedseq/error.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {
namespace {

struct RawRow {
    std::string user;
    std::string item;
    std::int64_t timestamp;
};

std::vector<std::string_view> split(std::string_view line, std::string_view sep) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t next = line.find(sep, pos);
        if (next == std::string_view::npos) {
            out.push_back(line.substr(pos));
            return out;
        }
        out.push_back(line.substr(pos, next - pos));
        pos = next + sep.size();
    }
}

/// RFC-4180-style CSV split; quoted fields may contain commas and "".
std::vector<std::string> split_csv(std::string_view line, std::size_t line_no) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", line_no);
    out.push_back(std::move(field));
    return out;
}

std::int64_t parse_int(std::string_view s, std::size_t line_no, const char* what) {
    std::int64_t v = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc{} || ptr != end) throw ParseError(std::string("invalid ") + what + " '" + std::string(s) + "'", line_no);
    return v;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    return s;
}

std::vector<RawRow> read_rows(const std::filesystem::path& path, InputFormat format) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<RawRow> rows;
    std::string line;
    std::size_t line_no = 0;
    std::int64_t row_order = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view text = trim(line);
        if (text.empty()) continue;
        switch (format) {
            case InputFormat::ml1m: {
                const auto f = split(text, "::");
                if (f.size() != 4) throw ParseError("expected UserID::MovieID::Rating::Timestamp", line_no);
                parse_int(f[0], line_no, "user id");
                parse_int(f[1], line_no, "movie id");
                rows.push_back({std::string(f[0]), std::string(f[1]), parse_int(f[3], line_no, "timestamp")});
                break;
            }
            case InputFormat::steam: {
                const auto f = split_csv(text, line_no);
                if (f.size() < 4) throw ParseError("expected user,game,behavior,value", line_no);
                if (f[2] != "play") break;
                rows.push_back({f[0], f[1], row_order++});
                break;
            }
            case InputFormat::tsv: {
                const auto f = split(text, "\t");
                if (f.size() != 3) throw ParseError("expected user<TAB>item<TAB>timestamp", line_no);
                rows.push_back({std::string(f[0]), std::string(f[1]), parse_int(f[2], line_no, "timestamp")});
                break;
            }
        }
    }
    return rows;
}

InteractionLog build_log(const std::vector<RawRow>& rows) {
    // Group by user in order of first appearance.
    std::unordered_map<std::string, std::size_t> user_slot;
    std::vector<std::string> user_order;
    std::vector<std::vector<std::size_t>> rows_of_user;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto [it, inserted] = user_slot.try_emplace(rows[i].user, user_order.size());
        if (inserted) {
            user_order.push_back(rows[i].user);
            rows_of_user.emplace_back();
        }
        rows_of_user[it->second].push_back(i);
    }

    InteractionLog log;
    log.raw_interactions = rows.size();
    std::unordered_map<std::string, ItemId> item_ids;
    for (std::size_t u = 0; u < user_order.size(); ++u) {
        auto& idx = rows_of_user[u];
        if (idx.size() < kMinEventsPerUser) continue;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return rows[a].timestamp < rows[b].timestamp; });
        std::vector<Event> events;
        events.reserve(idx.size());
        for (std::size_t r : idx) {
            auto [it, inserted] = item_ids.try_emplace(rows[r].item, log.item_labels.size() + 1);
            if (inserted) log.item_labels.push_back(rows[r].item);
            events.push_back({it->second, rows[r].timestamp});
        }
        log.events.push_back(std::move(events));
        log.user_labels.push_back(user_order[u]);
    }
    log.num_users = log.events.size();
    log.num_items = log.item_labels.size();
    if (log.num_users == 0) throw EmptyCorpusError("no user has at least 3 interactions");
    return log;
}

}  // namespace

InputFormat parse_input_format(std::string_view name) {
    if (name == "ml1m") return InputFormat::ml1m;
    if (name == "steam") return InputFormat::steam;
    if (name == "tsv") return InputFormat::tsv;
    throw ConfigError("unknown format '" + std::string(name) + "' (expected ml1m, steam, tsv)");
}

std::string_view to_string(InputFormat f) {
    switch (f) {
        case InputFormat::ml1m: return "ml1m";
        case InputFormat::steam: return "steam";
        case InputFormat::tsv: return "tsv";
    }
    return "?";
}

std::size_t InteractionLog::num_interactions() const {
    return std::accumulate(events.begin(), events.end(), std::size_t{0},
                           [](std::size_t s, const auto& e) { return s + e.size(); });
}

InteractionLog load_interactions(const std::filesystem::path& path, InputFormat format) {
    return build_log(read_rows(path, format));
}

std::vector<ClientDataset> leave_one_out_split(const InteractionLog& log, std::size_t max_len) {
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    std::vector<ClientDataset> out;
    out.reserve(log.num_users);
    for (std::size_t u = 0; u < log.events.size(); ++u) {
        const auto& ev = log.events[u];
        ClientDataset c;
        c.user = u + 1;
        c.test_item = ev.back().item;
        const std::size_t n_train = ev.size() - 1;
        const std::size_t start = n_train > max_len ? n_train - max_len : 0;
        for (std::size_t i = start; i < n_train; ++i) c.train_seq.push_back(ev[i].item);
        out.push_back(std::move(c));
    }
    return out;
}

SyntheticLayout synthetic_layout(std::size_t n_users, std::size_t n_items, std::uint64_t seed) {
    SyntheticLayout layout;
    const std::size_t tail = std::max<std::size_t>(1, n_items / 10);
    const std::size_t pooled = n_items - tail;
    layout.num_clusters = std::max<std::size_t>(2, pooled / 9);
    layout.pools.resize(layout.num_clusters);
    // Pool membership is a seeded permutation of the non-tail items so
    // that cluster structure is not visible in the raw ids.
    Rng rng(derive_seed({seed, 0x9001}));
    const auto perm = rng.sample_without_replacement(pooled, pooled);
    for (std::size_t i = 0; i < pooled; ++i) layout.pools[i % layout.num_clusters].push_back(perm[i] + 1);
    layout.cluster_of_user.resize(n_users);
    for (std::size_t u = 0; u < n_users; ++u) layout.cluster_of_user[u] = u % layout.num_clusters;
    return layout;
}

InteractionLog generate_synthetic(std::size_t n_users, std::size_t n_items, std::size_t seq_len,
                                  std::uint64_t seed) {
    if (n_users < 10 || n_items < 10 || seq_len < 3)
        throw ConfigError("synthetic corpus needs n_users >= 10, n_items >= 10, seq_len >= 3");
    constexpr double kNoise = 0.05;
    constexpr double kFollow = 0.85;
    const SyntheticLayout layout = synthetic_layout(n_users, n_items, seed);

    InteractionLog log;
    log.events.resize(n_users);
    for (std::size_t u = 0; u < n_users; ++u) {
        Rng rng(derive_seed({seed, 0x5e9, u}));
        const auto& pool = layout.pools[layout.cluster_of_user[u]];
        std::size_t pos = rng.below(pool.size());
        for (std::size_t t = 0; t < seq_len; ++t) {
            ItemId item;
            if (rng.bernoulli(kNoise)) {
                item = rng.below(n_items) + 1;
            } else {
                item = pool[pos];
            }
            log.events[u].push_back({item, static_cast<std::int64_t>(t)});
            // Walk to the successor in the pool, occasionally jumping.
            pos = rng.bernoulli(kFollow) ? (pos + 1) % pool.size() : rng.below(pool.size());
        }
    }
    log.num_users = n_users;
    log.num_items = n_items;
    log.raw_interactions = n_users * seq_len;
    for (std::size_t u = 1; u <= n_users; ++u) log.user_labels.push_back(std::to_string(u));
    for (std::size_t i = 1; i <= n_items; ++i) log.item_labels.push_back(std::to_string(i));
    return log;
}

void write_id_maps(const InteractionLog& log, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto dump = [](const std::filesystem::path& p, const std::vector<std::string>& labels) {
        std::ofstream out(p, std::ios::binary);
        if (!out) throw Error("cannot write " + p.string());
        out << "original\tdense\n";
        for (std::size_t i = 0; i < labels.size(); ++i) out << labels[i] << '\t' << (i + 1) << '\n';
    };
    dump(dir / "user_map.tsv", log.user_labels);
    dump(dir / "item_map.tsv", log.item_labels);
}

void write_tsv(const InteractionLog& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    for (std::size_t u = 0; u < log.events.size(); ++u)
        for (const Event& e : log.events[u]) out << (u + 1) << '\t' << e.item << '\t' << e.timestamp << '\n';
}

}  // namespace fedseq
