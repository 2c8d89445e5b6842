#pragma once

#include "mmq/numerics.hpp"
#include "mmq/probes.hpp"
#include "mmq/quantizers.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmq
{

enum class ComponentId
{
    Vision,
    Connector,
    Language,
};

enum class BlockGroup
{
    Front,
    Middle,
    End,
};

enum class LayerType
{
    Attn,
    FF,
};

enum class ConnectorKind
{
    QueryCrossAttention, // BLIP-2-like: learned queries cross-attending to vision tokens
    LinearProjector,     // LLaVA-like: per-token projection stack
};

std::string_view to_string(ComponentId c) noexcept;
std::string_view to_string(BlockGroup g) noexcept;
std::string_view to_string(LayerType t) noexcept;
std::string_view to_string(ConnectorKind k) noexcept;
ComponentId parse_component(std::string_view s);
BlockGroup parse_group(std::string_view s);
LayerType parse_layer_type(std::string_view s);
ConnectorKind parse_connector_kind(std::string_view s);

inline constexpr ComponentId kAllComponents[] = {ComponentId::Vision, ComponentId::Connector, ComponentId::Language};
inline constexpr BlockGroup kAllGroups[] = {BlockGroup::Front, BlockGroup::Middle, BlockGroup::End};
inline constexpr LayerType kAllLayerTypes[] = {LayerType::Attn, LayerType::FF};

struct PipelineSpec
{
    std::size_t d_model = 64;
    std::size_t vision_blocks = 6;
    std::size_t connector_blocks = 3;
    std::size_t language_blocks = 6;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t patch_count = 16;
    std::size_t patch_dim = 32;
    std::size_t vocab = 256;
    std::size_t num_queries = 8;
    std::size_t max_positions = 64;
    ConnectorKind connector_kind = ConnectorKind::QueryCrossAttention;
    std::uint64_t seed = 7;

    /// LLaVA-like variant: two-layer projector, no query tokens.
    static PipelineSpec llava_like();

    void validate() const;
    bool has_connector() const noexcept { return connector_blocks > 0; }
    std::size_t prefix_length() const noexcept;
    std::size_t blocks(ComponentId c) const noexcept;

    friend bool operator==(const PipelineSpec &, const PipelineSpec &) = default;
};

/// Group of a block within its component: equal contiguous thirds.
BlockGroup group_of_block(std::size_t block_index, std::size_t block_count) noexcept;

struct LayerAddress
{
    ComponentId component = ComponentId::Vision;
    std::size_t block_index = 0;
    BlockGroup group = BlockGroup::Front;
    LayerType layer_type = LayerType::Attn;
    std::string sublayer; // e.g. "attn.q_proj", "ff.up"

    /// "vision.blocks.3.attn.q_proj"
    std::string name() const;

    friend bool operator==(const LayerAddress &, const LayerAddress &) = default;
};

/// The (C, B, M) triple: a layer is selected when its component, block group
/// and layer type are all members. Empty sets select nothing.
struct Selector
{
    std::set<ComponentId> components;
    std::set<BlockGroup> groups;
    std::set<LayerType> layer_types;

    static Selector all();
    static Selector component(ComponentId c);
    bool matches(const LayerAddress &a) const noexcept;
};

/// Immutable-by-convention weight store. Linear layers are shared pointers so
/// quantized variants can swap a handful of layers without copying the rest.
class ModelWeights
{
  public:
    ModelWeights() = default;

    const PipelineSpec &spec() const noexcept { return spec_; }

    /// Every quantizable linear layer in enumeration order: components
    /// vision, connector, language; blocks ascending; sublayers in a fixed
    /// per-block order.
    std::span<const LayerAddress> layers() const noexcept { return layers_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    const Matrix &linear(std::size_t index) const { return *linear_.at(index); }
    const std::shared_ptr<const Matrix> &linear_ptr(std::size_t index) const { return linear_.at(index); }
    std::optional<std::size_t> find_layer(std::string_view name) const;

    /// Embeddings, norms, learned queries and the output head.
    const Matrix &param(const std::string &name) const;
    const std::map<std::string, std::shared_ptr<const Matrix>> &params() const noexcept { return params_; }

    std::size_t quantizable_parameter_count() const noexcept;
    std::size_t total_parameter_count() const noexcept;

    /// Returns a copy with one linear layer replaced (shapes must agree).
    ModelWeights with_layer(std::size_t index, std::shared_ptr<const Matrix> weight) const;
    void replace_layer(std::size_t index, std::shared_ptr<const Matrix> weight);

    /// Assembles weights from explicit parts; validates names and shapes
    /// against the layout implied by spec.
    static ModelWeights from_parts(const PipelineSpec &spec, std::map<std::string, Matrix> tensors);

    friend ModelWeights build_model(const PipelineSpec &spec);

  private:
    PipelineSpec spec_;
    std::vector<LayerAddress> layers_;
    std::vector<std::shared_ptr<const Matrix>> linear_;
    std::map<std::string, std::shared_ptr<const Matrix>> params_;
};

/// Layer addresses and shapes (rows = out_features, cols = in_features) for
/// a spec, in enumeration order.
std::vector<std::pair<LayerAddress, std::pair<std::size_t, std::size_t>>> layer_layout(const PipelineSpec &spec);

ModelWeights build_model(const PipelineSpec &spec);

std::vector<LayerAddress> enumerate_layers(const ModelWeights &weights, const Selector &sel);
std::vector<std::size_t> select_layer_indices(const ModelWeights &weights, const Selector &sel);

// ---------------------------------------------------------------------------
// Forward pass

/// Called with (layer index, layer input rows) for every linear layer.
using ActivationHook = std::function<void(std::size_t, const Matrix &)>;

enum class TaskKind
{
    Retrieval,
    Caption,
    VQA,
};
std::string_view to_string(TaskKind t) noexcept;
TaskKind parse_task(std::string_view s);

inline constexpr std::size_t kCaptionHorizon = 16;
inline constexpr std::size_t kVqaHorizon = 4;

/// Vision tower output after its final norm (patch_count × d_model).
Matrix encode_image(const ModelWeights &w, const Matrix &image, const ActivationHook *hook = nullptr);
/// Connector output: the visual prefix handed to the language decoder.
Matrix connect(const ModelWeights &w, const Matrix &vision_tokens, const ActivationHook *hook = nullptr);

/// Incremental causal decoding over the language component with a per-block
/// key/value cache.
class LanguageSession
{
  public:
    explicit LanguageSession(const ModelWeights &w, const ActivationHook *hook = nullptr);
    ~LanguageSession();
    LanguageSession(const LanguageSession &) = delete;
    LanguageSession &operator=(const LanguageSession &) = delete;

    /// Appends rows of input vectors; returns final-norm hidden states for them.
    Matrix append(const Matrix &inputs);
    Matrix append_tokens(std::span<const std::int32_t> tokens);
    std::size_t length() const noexcept;

  private:
    struct State;
    std::unique_ptr<State> state_;
};

std::vector<float> output_logits(const ModelWeights &w, std::span<const float> hidden);
/// Argmax with ties broken toward the lower token id.
std::int32_t greedy_token(std::span<const float> logits) noexcept;

struct ForwardOutput
{
    std::vector<float> image_embedding; // retrieval
    std::vector<float> text_embedding;  // retrieval
    std::vector<std::int32_t> tokens;   // caption / vqa
};

ForwardOutput forward(const ModelWeights &w, const ProbePair &probe, TaskKind mode, std::size_t horizon = 0);

/// Greedy decode after an explicit visual prefix (lets callers reuse a
/// cached prefix).
std::vector<std::int32_t> decode_after_prefix(const ModelWeights &w, const Matrix &prefix, const ProbePair &probe,
                                              TaskKind mode, std::size_t horizon);
std::vector<float> image_embedding_from_prefix(const Matrix &prefix);
std::vector<float> text_embedding(const ModelWeights &w, const ProbePair &probe);

// ---------------------------------------------------------------------------
// Calibration

class CalibrationSet
{
  public:
    CalibrationSet() = default;
    CalibrationSet(std::size_t sample_count, std::vector<Matrix> activations);

    std::size_t sample_count() const noexcept { return sample_count_; }
    std::size_t layer_count() const noexcept { return activations_.size(); }
    bool covers(std::size_t layer) const noexcept;
    const Matrix &activations(std::size_t layer) const;
    const CalibrationStats &stats(std::size_t layer) const;

  private:
    std::size_t sample_count_ = 0;
    std::vector<Matrix> activations_;
    std::vector<std::shared_ptr<const CalibrationStats>> stats_;
};

inline constexpr std::size_t kMaxCalibrationRows = 2048;

/// Runs the full-precision model on the first n probes (visual prefix, BOS,
/// caption text, SEP, question) and records every linear layer's inputs,
/// evenly row-subsampled to at most kMaxCalibrationRows rows.
CalibrationSet collect_calibration(const ModelWeights &w, const ProbeSet &probes, std::size_t n = 128);

// ---------------------------------------------------------------------------
// Quantization

enum class QuantMethod
{
    Uniform,
    RTN,
    GPTQ,
    AWQ,
};
std::string_view to_string(QuantMethod m) noexcept;
QuantMethod parse_method(std::string_view s);

struct QuantizeOptions
{
    QuantMethod method = QuantMethod::Uniform;
    int bits = 8;
    std::size_t group_size = 128; // ignored by Uniform (always per-tensor)
    double gptq_damping = 0.01;
    std::size_t gptq_block_size = 32;
};

struct LedgerEntry
{
    std::size_t layer_index = 0;
    std::string layer;
    QuantMethod method = QuantMethod::Uniform;
    int bits = 16;
    std::size_t group_size = 0; // effective; rows·cols for per-tensor grids
    std::size_t grid_count = 0;
    std::size_t params = 0;
    std::optional<double> proxy_error;
    std::optional<double> chosen_alpha;

    std::size_t code_bits() const noexcept { return params * static_cast<std::size_t>(bits); }
    /// Two 16-bit grid endpoints per quantization group.
    std::size_t overhead_bits() const noexcept { return 32 * grid_count; }
};

struct QuantizationLedger
{
    std::vector<LedgerEntry> entries;

    bool empty() const noexcept { return entries.empty(); }
    void append(const QuantizationLedger &other);
};

struct QuantizedLayer
{
    std::shared_ptr<const Matrix> weight;
    LedgerEntry entry;
};

/// Quantizes one layer and returns its dequantized replacement.
QuantizedLayer quantize_layer(const ModelWeights &w, std::size_t layer, const QuantizeOptions &opts,
                              const CalibrationSet *calib = nullptr);

struct QuantizedModel
{
    ModelWeights weights;
    QuantizationLedger ledger;
};

/// Simulated quantization: selected layers are replaced by their dequantized
/// values; everything else is shared with the input.
QuantizedModel apply_quantization(const ModelWeights &w, const Selector &sel, const QuantizeOptions &opts,
                                  const CalibrationSet *calib = nullptr);

} // namespace mmq
