#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fedseq {

/// 1-based item id; 0 is the padding item.
using ItemId = std::size_t;
/// 1-based dense user id.
using UserId = std::size_t;

inline constexpr ItemId kPaddingItem = 0;

enum class InputFormat { ml1m, steam, tsv };

InputFormat parse_input_format(std::string_view name);
std::string_view to_string(InputFormat f);

struct Event {
    ItemId item;
    std::int64_t timestamp;
};

/// Per-user interaction histories with densely re-indexed ids.
struct InteractionLog {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    /// events[u - 1] is the timestamp-ordered history of user u.
    std::vector<std::vector<Event>> events;
    /// Original identifiers, index i holds the original id of dense id i + 1.
    std::vector<std::string> user_labels;
    std::vector<std::string> item_labels;
    /// Parsed rows before the minimum-length filter.
    std::size_t raw_interactions = 0;

    std::size_t num_interactions() const;
};

struct ClientDataset {
    UserId user = 0;
    std::vector<ItemId> train_seq;
    ItemId test_item = kPaddingItem;

    friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

inline constexpr std::size_t kMinEventsPerUser = 3;

/// Parses a corpus file. Users with fewer than three events are dropped and
/// the surviving ids are densified in order of first appearance.
InteractionLog load_interactions(const std::filesystem::path& path, InputFormat format);

/// Last event is the test item; the rest, truncated to the most recent
/// max_len items, is the training sequence.
std::vector<ClientDataset> leave_one_out_split(const InteractionLog& log, std::size_t max_len);

/// Clustered synthetic corpus: each user follows a walk over one cluster's
/// item pool with a small chance of uniform noise. A tail of items belongs
/// to no pool and only appears through noise.
InteractionLog generate_synthetic(std::size_t n_users, std::size_t n_items, std::size_t seq_len,
                                  std::uint64_t seed);

/// Describes the pool layout generate_synthetic uses for a given size.
struct SyntheticLayout {
    std::size_t num_clusters;
    /// pools[k] lists the items of cluster k.
    std::vector<std::vector<ItemId>> pools;
    /// cluster_of_user[u - 1].
    std::vector<std::size_t> cluster_of_user;
};
SyntheticLayout synthetic_layout(std::size_t n_users, std::size_t n_items, std::uint64_t seed);

/// Writes `original<TAB>dense` rows for both id maps.
void write_id_maps(const InteractionLog& log, const std::filesystem::path& dir);
/// Writes the densified log as `user<TAB>item<TAB>timestamp` rows.
void write_tsv(const InteractionLog& log, const std::filesystem::path& path);

}  // namespace fedseq
