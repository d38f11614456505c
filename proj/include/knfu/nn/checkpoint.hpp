#pragma once

#include <filesystem>

#include "knfu/nn/model.hpp"

namespace knfu::nn {

/// Layout: "KNFU" | u32 id length | id bytes | u64 count | count x f32,
/// all little-endian.
void save_checkpoint(const Model& model, const std::filesystem::path& path);

/// Throws InputError if the stored spec id differs from `spec.id()`.
Model load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace knfu::nn
