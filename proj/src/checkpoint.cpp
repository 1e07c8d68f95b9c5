#include "fedseq/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include "fedseq/error.hpp"

namespace fedseq {
namespace {

constexpr std::string_view kMagic = "FEDSEQ-CHECKPOINT v1";

struct Entry {
    std::string name;
    const Matrix* tensor;
};

std::vector<Entry> entries(const ModelParams& params) {
    std::vector<Entry> out{{std::string(kItemEmbName), &params.item_emb}};
    const auto names = dense_tensor_names(params.shape.variant);
    for (std::size_t t = 0; t < params.dense.size(); ++t) out.push_back({names[t], &params.dense[t]});
    return out;
}

void put_f32(std::string& out, double v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

double get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return static_cast<double>(std::bit_cast<float>(bits));
}

std::string next_line(std::string_view bytes, std::size_t& pos) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw CheckpointError("truncated checkpoint header");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
}

std::size_t keyed_value(std::string_view bytes, std::size_t& pos, std::string_view key) {
    std::istringstream in(next_line(bytes, pos));
    std::string k;
    std::size_t v = 0;
    if (!(in >> k >> v) || k != key) throw CheckpointError("expected header key '" + std::string(key) + "'");
    return v;
}

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
    std::ostringstream header;
    header << kMagic << '\n';
    header << "variant " << to_string(params.shape.variant) << '\n';
    header << "num_items " << params.shape.num_items << '\n';
    header << "max_len " << params.shape.max_len << '\n';
    header << "dim " << params.shape.dim << '\n';
    header << "ffn_dim " << params.shape.ffn_dim << '\n';
    const auto list = entries(params);
    header << "tensors " << list.size() << '\n';
    std::size_t offset = 0;
    for (const auto& e : list) {
        header << "tensor " << e.name << ' ' << e.tensor->rows() << ' ' << e.tensor->cols() << ' ' << offset << '\n';
        offset += e.tensor->values().size() * 4;
    }
    header << "end\n";
    std::string out = header.str();
    out.reserve(out.size() + offset);
    for (const auto& e : list)
        for (double v : e.tensor->values()) put_f32(out, v);
    return out;
}

ModelParams deserialize_checkpoint(std::string_view bytes) {
    std::size_t pos = 0;
    if (next_line(bytes, pos) != kMagic) throw CheckpointError("not a checkpoint file");
    ModelShape shape;
    {
        std::istringstream in(next_line(bytes, pos));
        std::string k, v;
        if (!(in >> k >> v) || k != "variant") throw CheckpointError("expected header key 'variant'");
        try {
            shape.variant = parse_variant(v);
        } catch (const Error& e) {
            throw CheckpointError(e.what());
        }
    }
    shape.num_items = keyed_value(bytes, pos, "num_items");
    shape.max_len = keyed_value(bytes, pos, "max_len");
    shape.dim = keyed_value(bytes, pos, "dim");
    shape.ffn_dim = keyed_value(bytes, pos, "ffn_dim");
    const std::size_t count = keyed_value(bytes, pos, "tensors");

    ModelParams params = init_params(shape, 0);
    const auto expected = entries(params);
    if (count != expected.size()) throw CheckpointError("unexpected tensor count");

    struct Slot {
        std::size_t rows, cols, offset;
    };
    std::vector<Slot> slots;
    for (const auto& e : expected) {
        std::istringstream in(next_line(bytes, pos));
        std::string tag, name;
        Slot s{};
        if (!(in >> tag >> name >> s.rows >> s.cols >> s.offset) || tag != "tensor")
            throw CheckpointError("malformed tensor line");
        if (name != e.name) throw CheckpointError("unexpected tensor '" + name + "', wanted '" + e.name + "'");
        if (s.rows != e.tensor->rows() || s.cols != e.tensor->cols())
            throw CheckpointError("shape mismatch for tensor " + name);
        slots.push_back(s);
    }
    if (next_line(bytes, pos) != "end") throw CheckpointError("missing header terminator");

    const std::string_view data = bytes.substr(pos);
    std::vector<Matrix*> targets{&params.item_emb};
    for (auto& m : params.dense) targets.push_back(&m);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto& values = targets[i]->values();
        const std::size_t nbytes = values.size() * 4;
        if (slots[i].offset > data.size() || data.size() - slots[i].offset < nbytes)
            throw CheckpointError("tensor data out of bounds for " + expected[i].name);
        const auto* p = reinterpret_cast<const unsigned char*>(data.data() + slots[i].offset);
        for (std::size_t j = 0; j < values.size(); ++j) values[j] = get_f32(p + 4 * j);
    }
    return params;
}

void write_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    const std::string bytes = serialize_checkpoint(params);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + path.string());
}

ModelParams read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace fedseq
