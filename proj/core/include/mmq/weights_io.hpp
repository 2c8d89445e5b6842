#pragma once

#include "mmq/pipeline.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mmq
{

/// Flat binary tensor container:
///   "MMQW", version u32, entry count u32, then per entry
///   name length u16, utf-8 name, dtype u8 (0 = f32), rank u8, dims u32×rank,
///   little-endian f32 payload.
/// Entries are written in name order; rank-1 tensors load as 1×n matrices.
inline constexpr std::uint32_t kWeightsVersion = 1;

std::vector<std::uint8_t> encode_tensors(const std::map<std::string, Matrix> &tensors);
std::map<std::string, Matrix> decode_tensors(std::span<const std::uint8_t> bytes);

void save_tensors(const std::map<std::string, Matrix> &tensors, const std::filesystem::path &path);
std::map<std::string, Matrix> load_tensors(const std::filesystem::path &path);

std::map<std::string, Matrix> model_tensors(const ModelWeights &w);
void save_weights(const ModelWeights &w, const std::filesystem::path &path);
/// Tensors must match the layout of `spec` exactly.
ModelWeights load_weights(const PipelineSpec &spec, const std::filesystem::path &path);

} // namespace mmq
