#pragma once

#include "mmq/experiments.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace mmq
{

inline constexpr std::string_view kResultsHeader =
    "run_id,method,task,vision_bits,connector_bits,language_bits,groups,layer_types,group_size,bpw,score,seed,wall_ms";

/// Rows in the given order; reals with 6 significant digits, sets as
/// `+`-joined tokens in canonical order ("none" when empty).
std::string results_to_csv(const std::vector<RunRecord> &rows);
/// Throws std::runtime_error naming the 1-based line of the first bad row.
std::vector<RunRecord> results_from_csv(std::string_view text);

/// Writes rows sorted by run_id. Failures are not part of the CSV.
void save_results(const ResultsTable &table, const std::filesystem::path &path);
ResultsTable load_results(const std::filesystem::path &path);

std::string format_groups(const std::set<BlockGroup> &groups);
std::string format_layer_types(const std::set<LayerType> &types);
std::set<BlockGroup> parse_groups(std::string_view field);
std::set<LayerType> parse_layer_types(std::string_view field);

} // namespace mmq
