#pragma once

#include "mmq/pipeline.hpp"
#include "mmq/tasks.hpp"

#include <bit>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mmq
{

/// One grid cell scored on one task.
struct RunRecord
{
    std::string run_id;
    QuantMethod method = QuantMethod::Uniform;
    TaskKind task = TaskKind::Caption;
    int vision_bits = 16;
    int connector_bits = 16;
    int language_bits = 16;
    std::set<BlockGroup> groups;
    std::set<LayerType> layer_types;
    std::size_t group_size = 0; // 0 = per-tensor grids
    double bpw = 16.0;
    double score = 1.0;
    std::uint64_t seed = 0;
    std::uint64_t wall_ms = 0;

    int bits(ComponentId c) const noexcept;
    /// Number of components stored below 16 bits.
    std::size_t quantized_component_count() const noexcept;
    /// Whole pipeline at 8 or 16 bits with every group and layer type.
    bool is_full_pipeline_star() const noexcept;

    friend bool operator==(const RunRecord &, const RunRecord &) = default;
};

struct CellFailure
{
    std::string run_id;
    std::string description;
    std::string message;
};

struct ResultsTable
{
    std::vector<RunRecord> rows;
    std::vector<CellFailure> failures;

    void sort_by_run_id();
    std::vector<RunRecord> for_task(TaskKind task) const;
};

struct GridSpec
{
    std::vector<int> bits{2, 4, 6, 8};               // uniform grid
    std::vector<int> sota_bits{2, 3, 4, 5, 6, 8};     // per-component cross product, plus 16
    std::vector<std::set<ComponentId>> component_subsets; // empty: every non-empty subset of present components
    std::vector<std::set<BlockGroup>> group_subsets;       // empty: every non-empty subset
    std::vector<std::set<LayerType>> layer_type_subsets;   // empty: every non-empty subset
    std::vector<TaskKind> tasks{TaskKind::Retrieval, TaskKind::Caption, TaskKind::VQA};
    std::vector<std::uint64_t> seeds{7};
    QuantMethod uniform_method = QuantMethod::Uniform;
    std::size_t group_size = 128; // RTN / GPTQ / AWQ
    std::size_t eval_probes = 32;
    std::size_t calibration_probes = 128;
    std::size_t workers = 1;
    bool record_wall_time = false; // wall_ms stays 0 so outputs are byte-stable

    void validate() const;
};

/// Every non-empty subset of `items`, ordered by size then lexicographically.
template <class T>
std::vector<std::set<T>> nonempty_subsets(const std::vector<T> &items)
{
    std::vector<std::set<T>> out;
    const std::size_t n = items.size();
    for (std::size_t size = 1; size <= n; ++size)
        for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask)
        {
            if (static_cast<std::size_t>(std::popcount(mask)) != size)
                continue;
            std::set<T> s;
            for (std::size_t i = 0; i < n; ++i)
                if (mask & (std::size_t{1} << i))
                    s.insert(items[i]);
            out.push_back(std::move(s));
        }
    return out;
}

/// Components with at least one block.
std::vector<ComponentId> present_components(const PipelineSpec &spec);
/// Components swept independently by the SOTA grid; a bare linear projector
/// stays at full precision.
std::vector<ComponentId> sota_components(const PipelineSpec &spec);

/// Seed-derived inputs shared by every cell: model seed = seed, evaluation
/// and calibration probes from two disjoint streams of the same seed.
struct SeedContext
{
    std::uint64_t seed = 0;
    ModelWeights fp;
    ProbeSet eval_probes;
    std::optional<ProbeSet> calibration_probes;
    std::optional<CalibrationSet> calibration;
};

PipelineSpec spec_for_seed(const PipelineSpec &base, std::uint64_t seed);
std::uint64_t eval_probe_seed(std::uint64_t seed) noexcept;
std::uint64_t calibration_probe_seed(std::uint64_t seed) noexcept;
SeedContext prepare_seed(const PipelineSpec &base, const GridSpec &grid, std::uint64_t seed, bool with_calibration);

/// bits·n + 32·groups per quantized layer, 16·n for every other quantizable
/// layer, over the quantizable parameter count.
double compute_bpw(const QuantizationLedger &ledger, const ModelWeights &weights);

/// Pure hash of the cell configuration, spec and seed (16 hex digits).
std::string make_run_id(const PipelineSpec &spec, const GridSpec &grid, const RunRecord &cell);

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

/// Selector sweep: one k for a (components, groups, layer types)
/// selection. Cells selecting no layer collapse into one baseline row.
ResultsTable run_uniform_grid(const PipelineSpec &spec, const GridSpec &grid, const ProgressFn &progress = {});

/// Independent bits per component over sota_bits ∪ {16}, every group and
/// layer type, for each calibrated method.
ResultsTable run_sota_grid(const PipelineSpec &spec, const GridSpec &grid, const std::vector<QuantMethod> &methods,
                           const ProgressFn &progress = {});

/// Rows of one task not dominated in (lower bpw, higher score), by bpw.
std::vector<RunRecord> pareto_frontier(const std::vector<RunRecord> &rows, TaskKind task);

/// Rows with exactly `n` components below 16 bits (1: single-component
/// curves, 2: pairwise interactions).
std::vector<RunRecord> component_slice(const std::vector<RunRecord> &rows, std::size_t n);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions are
/// captured per index; the returned vector holds their messages.
std::vector<std::optional<std::string>> parallel_for(std::size_t n, std::size_t workers,
                                                     const std::function<void(std::size_t)> &fn,
                                                     const ProgressFn &progress = {});

} // namespace mmq
