#pragma once

#include "mmq/experiments.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace mmq
{

/// Lab configuration as read from JSON. Every section and key is optional;
/// unknown keys are rejected with their JSON path.
///
/// {
///   "model": "toy-blip2",
///   "pipeline": {"d_model": 64, "vision_blocks": 6, "connector_blocks": 3,
///                "language_blocks": 6, "heads": 4, "ffn_mult": 4,
///                "patch_count": 16, "patch_dim": 32, "vocab": 256,
///                "num_queries": 8, "max_positions": 64,
///                "connector_kind": "query_cross_attention", "seed": 7},
///   "grid": {"bits": [2,4,6,8], "sota_bits": [2,3,4,5,6,8],
///            "component_subsets": [["vision"], ["vision","language"]],
///            "group_subsets": [["front"]], "layer_type_subsets": [["attn","ff"]],
///            "tasks": ["retrieval","caption","vqa"], "seeds": [7],
///            "uniform_method": "uniform", "group_size": 128,
///            "record_wall_time": false},
///   "probes": {"eval": 32, "calibration": 128},
///   "output_dir": "out",
///   "workers": 1
/// }
struct Config
{
    std::string model = "toy";
    PipelineSpec pipeline;
    GridSpec grid;
    bool probes_configured = false;
    std::filesystem::path output_dir = ".";

    /// Canonical JSON of every resolved field; stable across key order and
    /// defaults spelled out or omitted.
    std::string canonical_json() const;
    std::string hash() const;
};

/// Throws std::invalid_argument("<path>: <problem>").
Config parse_config(std::string_view json_text);
Config load_config(const std::filesystem::path &path);

} // namespace mmq
