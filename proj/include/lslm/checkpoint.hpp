#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

#include "lslm/optim.hpp"

namespace lslm {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ParamStore params;
  nlohmann::json meta;  // free-form metadata echoed into the header
};

// Layout: 8-byte magic "LSLMCKPT", u64 little-endian header length, the JSON
// header ({format_version, meta, tensors: [{name, shape, offset, nbytes}]}),
// then raw little-endian float32 payloads in header order. Offsets are
// relative to the start of the payload section.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace lslm
