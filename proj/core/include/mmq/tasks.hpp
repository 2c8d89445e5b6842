#pragma once

#include "mmq/pipeline.hpp"
#include "mmq/probes.hpp"

#include <cstdint>
#include <vector>

namespace mmq
{

struct ProbeShape
{
    std::size_t patch_count = 16;
    std::size_t patch_dim = 32;
    std::size_t vocab = 256;
    std::size_t text_len = 8;
    std::size_t question_len = 4;
    std::size_t latent_dim = 16;
    double noise = 0.5; // std of the per-modality noise added to the shared latent

    static ProbeShape from_spec(const PipelineSpec &spec);
};

/// Pair i draws a shared latent z; the image sees z + noise and the text and
/// question see z + independent noise. Images are a fixed linear map of their
/// latent; tokens are the argmax of fixed per-position random projections.
/// The fixed maps depend only on the shape, so probe sets with different
/// seeds come from the same distribution.
ProbeSet make_probe_set(std::uint64_t seed, std::size_t n_pairs, const ProbeShape &shape = {});

struct ScoreRecord
{
    TaskKind task = TaskKind::Caption;
    double score = 0.0;
    std::size_t n_probes = 0;
};

/// Everything a fidelity score needs from one model on one probe set.
struct TaskOutputs
{
    TaskKind task = TaskKind::Caption;
    std::size_t horizon = 0;
    std::vector<std::vector<std::int32_t>> tokens; // generation
    Matrix image_embeddings;                       // retrieval: n × d, unit rows
    Matrix text_embeddings;                        // retrieval: n × d, unit rows
};

/// Visual prefixes (connector outputs) for every probe.
std::vector<Matrix> compute_prefixes(const ModelWeights &w, const ProbeSet &probes);

/// Runs one task over the probes. When `prefixes` is given it must come from
/// compute_prefixes on weights with the same vision and connector layers.
TaskOutputs run_task(const ModelWeights &w, const ProbeSet &probes, TaskKind task, std::size_t horizon = 0,
                     const std::vector<Matrix> *prefixes = nullptr);

/// Agreement of `quantized` with `reference`: top-1 retrieval agreement
/// (text→image and image→text, averaged) or mean positionwise token match.
ScoreRecord score_outputs(const TaskOutputs &quantized, const TaskOutputs &reference);

ScoreRecord score_retrieval(const ModelWeights &q_weights, const ModelWeights &fp_weights, const ProbeSet &probes);
ScoreRecord score_generation(const ModelWeights &q_weights, const ModelWeights &fp_weights, const ProbeSet &probes,
                             TaskKind task, std::size_t horizon = 0);

/// Index of the row of `candidates` with the highest dot product with
/// `query`; ties go to the lower index.
std::size_t top1(std::span<const float> query, const Matrix &candidates);

} // namespace mmq
