#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "fedseq/model.hpp"

namespace fedseq {

/// Text header (magic, shape, one `tensor name rows cols offset` line per
/// tensor, `end`) followed by little-endian float32 data. Offsets are byte
/// offsets into the data block.
std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::string_view bytes);

void write_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams read_checkpoint(const std::filesystem::path& path);

}  // namespace fedseq
