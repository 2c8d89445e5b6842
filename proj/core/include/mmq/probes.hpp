#pragma once

#include "mmq/numerics.hpp"

#include <cstdint>
#include <vector>

namespace mmq
{

inline constexpr std::int32_t kBosToken = 0;
inline constexpr std::int32_t kSepToken = 1;
/// First id that synthetic text may use; 0 and 1 are reserved.
inline constexpr std::int32_t kFirstTextToken = 2;

/// One synthetic image/text pair. The raw latents are kept so the cross-modal
/// structure of a probe set can be inspected directly.
struct ProbePair
{
    Matrix image;                    // patch_count × patch_dim
    std::vector<std::int32_t> text_ids;
    std::vector<std::int32_t> question_ids;
    std::vector<float> image_latent;
    std::vector<float> text_latent;
};

struct ProbeSet
{
    std::uint64_t seed = 0;
    std::vector<ProbePair> pairs;

    std::size_t size() const noexcept { return pairs.size(); }
};

} // namespace mmq
