#pragma once

#include <cstdint>
#include <filesystem>

#include "mobe/model.hpp"

namespace mobe {

/// Writes every parameter as an MBT1 file plus index.json (names, groups,
/// layers, subjects, shapes, config hash and seed).
void save_checkpoint(DecoderModel& model, const std::filesystem::path& dir,
                     const std::string& config_hash, std::uint64_t seed);

/// Loads values into an identically shaped model; throws on any mismatch.
void load_checkpoint(DecoderModel& model, const std::filesystem::path& dir);

/// Hash over all parameter values in declaration order.
std::uint64_t model_hash(DecoderModel& model);

}  // namespace mobe
