#include "mmq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmq
{

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(ComponentId c) noexcept
{
    switch (c)
    {
    case ComponentId::Vision: return "vision";
    case ComponentId::Connector: return "connector";
    case ComponentId::Language: return "language";
    }
    return "?";
}

std::string_view to_string(BlockGroup g) noexcept
{
    switch (g)
    {
    case BlockGroup::Front: return "front";
    case BlockGroup::Middle: return "middle";
    case BlockGroup::End: return "end";
    }
    return "?";
}

std::string_view to_string(LayerType t) noexcept
{
    return t == LayerType::Attn ? "attn" : "ff";
}

std::string_view to_string(ConnectorKind k) noexcept
{
    return k == ConnectorKind::QueryCrossAttention ? "query_cross_attention" : "linear_projector";
}

std::string_view to_string(TaskKind t) noexcept
{
    switch (t)
    {
    case TaskKind::Retrieval: return "retrieval";
    case TaskKind::Caption: return "caption";
    case TaskKind::VQA: return "vqa";
    }
    return "?";
}

std::string_view to_string(QuantMethod m) noexcept
{
    switch (m)
    {
    case QuantMethod::Uniform: return "uniform";
    case QuantMethod::RTN: return "rtn";
    case QuantMethod::GPTQ: return "gptq";
    case QuantMethod::AWQ: return "awq";
    }
    return "?";
}

namespace
{
template <class E, std::size_t N>
E parse_enum(std::string_view s, const E (&values)[N], const char *what)
{
    for (E v : values)
        if (to_string(v) == s)
            return v;
    throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}
} // namespace

ComponentId parse_component(std::string_view s)
{
    return parse_enum(s, kAllComponents, "component");
}

BlockGroup parse_group(std::string_view s)
{
    return parse_enum(s, kAllGroups, "block group");
}

LayerType parse_layer_type(std::string_view s)
{
    return parse_enum(s, kAllLayerTypes, "layer type");
}

ConnectorKind parse_connector_kind(std::string_view s)
{
    static constexpr ConnectorKind kinds[] = {ConnectorKind::QueryCrossAttention, ConnectorKind::LinearProjector};
    return parse_enum(s, kinds, "connector kind");
}

TaskKind parse_task(std::string_view s)
{
    static constexpr TaskKind tasks[] = {TaskKind::Retrieval, TaskKind::Caption, TaskKind::VQA};
    return parse_enum(s, tasks, "task");
}

QuantMethod parse_method(std::string_view s)
{
    static constexpr QuantMethod methods[] = {QuantMethod::Uniform, QuantMethod::RTN, QuantMethod::GPTQ,
                                              QuantMethod::AWQ};
    return parse_enum(s, methods, "method");
}

// ---------------------------------------------------------------------------
// Spec and addressing

PipelineSpec PipelineSpec::llava_like()
{
    PipelineSpec s;
    s.connector_kind = ConnectorKind::LinearProjector;
    s.connector_blocks = 2;
    return s;
}

void PipelineSpec::validate() const
{
    auto fail = [](const std::string &m) { throw std::invalid_argument("pipeline spec: " + m); };
    if (d_model == 0 || heads == 0 || ffn_mult == 0 || patch_count == 0 || patch_dim == 0)
        fail("dimensions must be positive");
    if (d_model % heads != 0)
        fail("heads (" + std::to_string(heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
    if (vision_blocks == 0 || vision_blocks % 3 != 0)
        fail("vision_blocks must be a positive multiple of 3, got " + std::to_string(vision_blocks));
    if (language_blocks == 0 || language_blocks % 3 != 0)
        fail("language_blocks must be a positive multiple of 3, got " + std::to_string(language_blocks));
    if (vocab <= static_cast<std::size_t>(kFirstTextToken))
        fail("vocab too small");
    if (connector_kind == ConnectorKind::QueryCrossAttention && connector_blocks > 0 && num_queries == 0)
        fail("query connector needs num_queries > 0");
    if (max_positions < prefix_length() + 2)
        fail("max_positions too small for the visual prefix");
}

std::size_t PipelineSpec::prefix_length() const noexcept
{
    if (connector_kind == ConnectorKind::QueryCrossAttention && connector_blocks > 0)
        return num_queries;
    return patch_count;
}

std::size_t PipelineSpec::blocks(ComponentId c) const noexcept
{
    switch (c)
    {
    case ComponentId::Vision: return vision_blocks;
    case ComponentId::Connector: return connector_blocks;
    case ComponentId::Language: return language_blocks;
    }
    return 0;
}

BlockGroup group_of_block(std::size_t block_index, std::size_t block_count) noexcept
{
    if (block_count == 0)
        return BlockGroup::Front;
    const std::size_t third = (3 * block_index) / block_count;
    return third == 0 ? BlockGroup::Front : third == 1 ? BlockGroup::Middle : BlockGroup::End;
}

std::string LayerAddress::name() const
{
    return std::string(to_string(component)) + ".blocks." + std::to_string(block_index) + "." + sublayer;
}

Selector Selector::all()
{
    Selector s;
    s.components = {kAllComponents, kAllComponents + 3};
    s.groups = {kAllGroups, kAllGroups + 3};
    s.layer_types = {kAllLayerTypes, kAllLayerTypes + 2};
    return s;
}

Selector Selector::component(ComponentId c)
{
    Selector s = all();
    s.components = {c};
    return s;
}

bool Selector::matches(const LayerAddress &a) const noexcept
{
    return components.contains(a.component) && groups.contains(a.group) && layer_types.contains(a.layer_type);
}

namespace
{

struct SublayerDef
{
    const char *name;
    LayerType type;
    bool residual; // output projection into the residual stream
    enum Shape { DD, FD, DF } shape;
};

constexpr SublayerDef kTransformerBlock[] = {
    {"attn.q_proj", LayerType::Attn, false, SublayerDef::DD},
    {"attn.k_proj", LayerType::Attn, false, SublayerDef::DD},
    {"attn.v_proj", LayerType::Attn, false, SublayerDef::DD},
    {"attn.out_proj", LayerType::Attn, true, SublayerDef::DD},
    {"ff.up", LayerType::FF, false, SublayerDef::FD},
    {"ff.down", LayerType::FF, true, SublayerDef::DF},
};

constexpr SublayerDef kQueryConnectorBlock[] = {
    {"self_attn.q_proj", LayerType::Attn, false, SublayerDef::DD},
    {"self_attn.k_proj", LayerType::Attn, false, SublayerDef::DD},
    {"self_attn.v_proj", LayerType::Attn, false, SublayerDef::DD},
    {"self_attn.out_proj", LayerType::Attn, true, SublayerDef::DD},
    {"cross_attn.q_proj", LayerType::Attn, false, SublayerDef::DD},
    {"cross_attn.k_proj", LayerType::Attn, false, SublayerDef::DD},
    {"cross_attn.v_proj", LayerType::Attn, false, SublayerDef::DD},
    {"cross_attn.out_proj", LayerType::Attn, true, SublayerDef::DD},
    {"ff.up", LayerType::FF, false, SublayerDef::FD},
    {"ff.down", LayerType::FF, true, SublayerDef::DF},
};

constexpr SublayerDef kProjectorBlock[] = {
    {"proj", LayerType::FF, false, SublayerDef::DD},
};

std::span<const SublayerDef> block_defs(const PipelineSpec &spec, ComponentId c)
{
    if (c != ComponentId::Connector)
        return kTransformerBlock;
    if (spec.connector_kind == ConnectorKind::QueryCrossAttention)
        return kQueryConnectorBlock;
    return kProjectorBlock;
}

std::size_t block_index_base(const PipelineSpec &spec, ComponentId c)
{
    std::size_t base = 0;
    for (ComponentId other : kAllComponents)
    {
        if (other == c)
            return base;
        base += spec.blocks(other) * block_defs(spec, other).size();
    }
    return base;
}

// Index of sublayer `sub` (position in block_defs) of block `b`.
std::size_t layer_index(const PipelineSpec &spec, ComponentId c, std::size_t b, std::size_t sub)
{
    return block_index_base(spec, c) + b * block_defs(spec, c).size() + sub;
}

enum class Init
{
    Normal,
    Ones,
    Zeros,
};

struct ParamDef
{
    std::string name;
    std::size_t rows, cols;
    Init init;
};

std::vector<ParamDef> param_layout(const PipelineSpec &s)
{
    const std::size_t d = s.d_model;
    std::vector<ParamDef> out;
    auto norm = [&](const std::string &prefix) {
        out.push_back({prefix + ".weight", 1, d, Init::Ones});
        out.push_back({prefix + ".bias", 1, d, Init::Zeros});
    };
    out.push_back({"vision.patch_embed", d, s.patch_dim, Init::Normal});
    out.push_back({"vision.pos_embed", s.patch_count, d, Init::Normal});
    for (std::size_t b = 0; b < s.vision_blocks; ++b)
    {
        norm("vision.blocks." + std::to_string(b) + ".ln1");
        norm("vision.blocks." + std::to_string(b) + ".ln2");
    }
    norm("vision.ln_post");
    if (s.connector_kind == ConnectorKind::QueryCrossAttention && s.connector_blocks > 0)
    {
        out.push_back({"connector.queries", s.num_queries, d, Init::Normal});
        for (std::size_t b = 0; b < s.connector_blocks; ++b)
            for (const char *ln : {".ln1", ".ln2", ".ln3"})
                norm("connector.blocks." + std::to_string(b) + ln);
        norm("connector.ln_post");
    }
    out.push_back({"language.token_embed", s.vocab, d, Init::Normal});
    out.push_back({"language.pos_embed", s.max_positions, d, Init::Normal});
    for (std::size_t b = 0; b < s.language_blocks; ++b)
    {
        norm("language.blocks." + std::to_string(b) + ".ln1");
        norm("language.blocks." + std::to_string(b) + ".ln2");
    }
    norm("language.ln_f");
    out.push_back({"language.head", s.vocab, d, Init::Normal});
    return out;
}

constexpr double kInitStd = 0.02;

} // namespace

std::vector<std::pair<LayerAddress, std::pair<std::size_t, std::size_t>>> layer_layout(const PipelineSpec &spec)
{
    const std::size_t d = spec.d_model;
    const std::size_t f = spec.d_model * spec.ffn_mult;
    std::vector<std::pair<LayerAddress, std::pair<std::size_t, std::size_t>>> out;
    for (ComponentId c : kAllComponents)
    {
        const std::size_t n = spec.blocks(c);
        for (std::size_t b = 0; b < n; ++b)
            for (const auto &def : block_defs(spec, c))
            {
                LayerAddress a{c, b, group_of_block(b, n), def.type, def.name};
                std::pair<std::size_t, std::size_t> shape =
                    def.shape == SublayerDef::DD ? std::pair{d, d}
                    : def.shape == SublayerDef::FD ? std::pair{f, d}
                                                   : std::pair{d, f};
                out.emplace_back(std::move(a), shape);
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// ModelWeights

std::optional<std::size_t> ModelWeights::find_layer(std::string_view name) const
{
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i].name() == name)
            return i;
    return std::nullopt;
}

const Matrix &ModelWeights::param(const std::string &name) const
{
    auto it = params_.find(name);
    if (it == params_.end())
        throw std::out_of_range("model has no parameter '" + name + "'");
    return *it->second;
}

std::size_t ModelWeights::quantizable_parameter_count() const noexcept
{
    std::size_t n = 0;
    for (const auto &m : linear_)
        n += m->size();
    return n;
}

std::size_t ModelWeights::total_parameter_count() const noexcept
{
    std::size_t n = quantizable_parameter_count();
    for (const auto &[_, m] : params_)
        n += m->size();
    return n;
}

void ModelWeights::replace_layer(std::size_t index, std::shared_ptr<const Matrix> weight)
{
    const auto &old = linear_.at(index);
    if (!weight || weight->rows() != old->rows() || weight->cols() != old->cols())
        throw std::invalid_argument("replace_layer: shape mismatch for " + layers_[index].name());
    linear_[index] = std::move(weight);
}

ModelWeights ModelWeights::with_layer(std::size_t index, std::shared_ptr<const Matrix> weight) const
{
    ModelWeights copy = *this;
    copy.replace_layer(index, std::move(weight));
    return copy;
}

ModelWeights ModelWeights::from_parts(const PipelineSpec &spec, std::map<std::string, Matrix> tensors)
{
    spec.validate();
    ModelWeights w;
    w.spec_ = spec;
    auto take = [&](const std::string &name, std::size_t rows, std::size_t cols) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw std::invalid_argument("missing tensor '" + name + "'");
        if (it->second.rows() != rows || it->second.cols() != cols)
            throw std::invalid_argument("tensor '" + name + "' has shape " + std::to_string(it->second.rows()) +
                                        "x" + std::to_string(it->second.cols()) + ", expected " +
                                        std::to_string(rows) + "x" + std::to_string(cols));
        if (!it->second.all_finite())
            throw std::invalid_argument("tensor '" + name + "' has non-finite entries");
        auto ptr = std::make_shared<const Matrix>(std::move(it->second));
        tensors.erase(it);
        return ptr;
    };
    for (auto &[addr, shape] : layer_layout(spec))
    {
        w.linear_.push_back(take(addr.name(), shape.first, shape.second));
        w.layers_.push_back(std::move(addr));
    }
    for (const auto &p : param_layout(spec))
        w.params_.emplace(p.name, take(p.name, p.rows, p.cols));
    if (!tensors.empty())
        throw std::invalid_argument("unexpected tensor '" + tensors.begin()->first + "'");
    return w;
}

ModelWeights build_model(const PipelineSpec &spec)
{
    spec.validate();
    const RngStream root(spec.seed);
    std::map<std::string, Matrix> tensors;
    for (const auto &[addr, shape] : layer_layout(spec))
    {
        const auto defs = block_defs(spec, addr.component);
        const auto def = std::find_if(defs.begin(), defs.end(),
                                      [&](const SublayerDef &s) { return addr.sublayer == s.name; });
        const double std = def->residual ? kInitStd / std::sqrt(2.0 * static_cast<double>(spec.blocks(addr.component)))
                                         : kInitStd;
        const auto name = addr.name();
        RngStream stream = root.fork(name);
        tensors.emplace(name, randn_matrix(stream, shape.first, shape.second, std));
    }
    for (const auto &p : param_layout(spec))
    {
        switch (p.init)
        {
        case Init::Normal: {
            RngStream stream = root.fork(p.name);
            tensors.emplace(p.name, randn_matrix(stream, p.rows, p.cols, kInitStd));
            break;
        }
        case Init::Ones: tensors.emplace(p.name, Matrix(p.rows, p.cols, 1.0f)); break;
        case Init::Zeros: tensors.emplace(p.name, Matrix(p.rows, p.cols, 0.0f)); break;
        }
    }
    return ModelWeights::from_parts(spec, std::move(tensors));
}

std::vector<std::size_t> select_layer_indices(const ModelWeights &weights, const Selector &sel)
{
    std::vector<std::size_t> out;
    const auto layers = weights.layers();
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (sel.matches(layers[i]))
            out.push_back(i);
    return out;
}

std::vector<LayerAddress> enumerate_layers(const ModelWeights &weights, const Selector &sel)
{
    std::vector<LayerAddress> out;
    for (auto i : select_layer_indices(weights, sel))
        out.push_back(weights.layers()[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Forward kernels

namespace
{

constexpr double kNormEps = 1e-5;

Matrix linear(const Matrix &x, const Matrix &w)
{
    Matrix y(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
    {
        const auto xi = x.row(i);
        auto yi = y.row(i);
        for (std::size_t o = 0; o < w.rows(); ++o)
            yi[o] = static_cast<float>(detail::dot(xi, w.row(o)));
    }
    return y;
}

Matrix layer_norm(const Matrix &x, const Matrix &gamma, const Matrix &beta)
{
    Matrix y(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
    {
        const auto xi = x.row(i);
        double mean = 0.0;
        for (float v : xi)
            mean += v;
        mean /= n;
        double var = 0.0;
        for (float v : xi)
            var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        auto yi = y.row(i);
        for (std::size_t c = 0; c < x.cols(); ++c)
            yi[c] = static_cast<float>((xi[c] - mean) * inv * gamma(0, c) + beta(0, c));
    }
    return y;
}

void gelu_inplace(Matrix &x)
{
    for (float &v : x.data())
    {
        const double u = v;
        v = static_cast<float>(0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u))));
    }
}

void add_inplace(Matrix &x, const Matrix &y)
{
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i)
        xd[i] += yd[i];
}

class Recorder
{
  public:
    explicit Recorder(const ActivationHook *hook) : hook_(hook) {}

    Matrix apply(const ModelWeights &w, std::size_t layer, const Matrix &x) const
    {
        if (hook_)
            (*hook_)(layer, x);
        return linear(x, w.linear(layer));
    }

  private:
    const ActivationHook *hook_;
};

// Multi-head attention of `query_in` rows over `kv_in` rows (no mask).
// `first` is the index of the q_proj layer; k, v, out follow it.
Matrix attention(const ModelWeights &w, const Recorder &rec, std::size_t first, const Matrix &query_in,
                 const Matrix &kv_in)
{
    const std::size_t d = w.spec().d_model;
    const std::size_t heads = w.spec().heads;
    const std::size_t hd = d / heads;
    const Matrix q = rec.apply(w, first, query_in);
    const Matrix k = rec.apply(w, first + 1, kv_in);
    const Matrix v = rec.apply(w, first + 2, kv_in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix ctx(query_in.rows(), d);
    std::vector<double> score(kv_in.rows());
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < query_in.rows(); ++i)
        {
            const auto qi = q.row(i).subspan(h * hd, hd);
            double mx = -INFINITY;
            for (std::size_t j = 0; j < kv_in.rows(); ++j)
            {
                score[j] = detail::dot(qi, k.row(j).subspan(h * hd, hd)) * scale;
                mx = std::max(mx, score[j]);
            }
            double z = 0.0;
            for (auto &s : score)
            {
                s = std::exp(s - mx);
                z += s;
            }
            for (std::size_t c = 0; c < hd; ++c)
            {
                double acc = 0.0;
                for (std::size_t j = 0; j < kv_in.rows(); ++j)
                    acc += score[j] * v(j, h * hd + c);
                ctx(i, h * hd + c) = static_cast<float>(acc / z);
            }
        }
    return rec.apply(w, first + 3, ctx);
}

Matrix feed_forward(const ModelWeights &w, const Recorder &rec, std::size_t up, const Matrix &x)
{
    Matrix h = rec.apply(w, up, x);
    gelu_inplace(h);
    return rec.apply(w, up + 1, h);
}

std::string block_param(ComponentId c, std::size_t b, const char *suffix)
{
    return std::string(to_string(c)) + ".blocks." + std::to_string(b) + suffix;
}

} // namespace

Matrix encode_image(const ModelWeights &w, const Matrix &image, const ActivationHook *hook)
{
    const auto &s = w.spec();
    if (image.rows() != s.patch_count || image.cols() != s.patch_dim)
        throw std::invalid_argument("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                                    ", expected " + std::to_string(s.patch_count) + "x" +
                                    std::to_string(s.patch_dim));
    const Recorder rec(hook);
    Matrix x = linear(image, w.param("vision.patch_embed"));
    add_inplace(x, w.param("vision.pos_embed"));
    for (std::size_t b = 0; b < s.vision_blocks; ++b)
    {
        const std::size_t base = layer_index(s, ComponentId::Vision, b, 0);
        const Matrix h1 = layer_norm(x, w.param(block_param(ComponentId::Vision, b, ".ln1.weight")),
                                     w.param(block_param(ComponentId::Vision, b, ".ln1.bias")));
        add_inplace(x, attention(w, rec, base, h1, h1));
        const Matrix h2 = layer_norm(x, w.param(block_param(ComponentId::Vision, b, ".ln2.weight")),
                                     w.param(block_param(ComponentId::Vision, b, ".ln2.bias")));
        add_inplace(x, feed_forward(w, rec, base + 4, h2));
    }
    return layer_norm(x, w.param("vision.ln_post.weight"), w.param("vision.ln_post.bias"));
}

Matrix connect(const ModelWeights &w, const Matrix &vision_tokens, const ActivationHook *hook)
{
    const auto &s = w.spec();
    if (vision_tokens.cols() != s.d_model)
        throw std::invalid_argument("connect: vision tokens have wrong width");
    if (s.connector_blocks == 0)
        return vision_tokens;
    const Recorder rec(hook);
    constexpr auto C = ComponentId::Connector;
    if (s.connector_kind == ConnectorKind::LinearProjector)
    {
        Matrix h = vision_tokens;
        for (std::size_t b = 0; b < s.connector_blocks; ++b)
        {
            h = rec.apply(w, layer_index(s, C, b, 0), h);
            if (b + 1 < s.connector_blocks)
                gelu_inplace(h);
        }
        return h;
    }
    Matrix q = w.param("connector.queries");
    for (std::size_t b = 0; b < s.connector_blocks; ++b)
    {
        const std::size_t base = layer_index(s, C, b, 0);
        const Matrix h1 = layer_norm(q, w.param(block_param(C, b, ".ln1.weight")), w.param(block_param(C, b, ".ln1.bias")));
        add_inplace(q, attention(w, rec, base, h1, h1));
        const Matrix h2 = layer_norm(q, w.param(block_param(C, b, ".ln2.weight")), w.param(block_param(C, b, ".ln2.bias")));
        add_inplace(q, attention(w, rec, base + 4, h2, vision_tokens));
        const Matrix h3 = layer_norm(q, w.param(block_param(C, b, ".ln3.weight")), w.param(block_param(C, b, ".ln3.bias")));
        add_inplace(q, feed_forward(w, rec, base + 8, h3));
    }
    return layer_norm(q, w.param("connector.ln_post.weight"), w.param("connector.ln_post.bias"));
}

// ---------------------------------------------------------------------------
// Language decoder

struct LanguageSession::State
{
    const ModelWeights &w;
    Recorder rec;
    std::size_t length = 0;
    std::vector<std::vector<float>> keys;   // per block, length × d
    std::vector<std::vector<float>> values; // per block, length × d

    State(const ModelWeights &weights, const ActivationHook *hook)
        : w(weights), rec(hook), keys(weights.spec().language_blocks), values(weights.spec().language_blocks)
    {
    }
};

LanguageSession::LanguageSession(const ModelWeights &w, const ActivationHook *hook)
    : state_(std::make_unique<State>(w, hook))
{
}

LanguageSession::~LanguageSession() = default;

std::size_t LanguageSession::length() const noexcept
{
    return state_->length;
}

Matrix LanguageSession::append(const Matrix &inputs)
{
    auto &st = *state_;
    const auto &s = st.w.spec();
    const std::size_t d = s.d_model;
    const std::size_t hd = d / s.heads;
    const std::size_t n = inputs.rows();
    if (inputs.cols() != d)
        throw std::invalid_argument("language input width mismatch");
    if (st.length + n > s.max_positions)
        throw std::invalid_argument("sequence exceeds max_positions (" + std::to_string(s.max_positions) + ")");

    Matrix x = inputs;
    const Matrix &pos = st.w.param("language.pos_embed");
    for (std::size_t i = 0; i < n; ++i)
    {
        auto xi = x.row(i);
        const auto pi = pos.row(st.length + i);
        for (std::size_t c = 0; c < d; ++c)
            xi[c] += pi[c];
    }
    constexpr auto L = ComponentId::Language;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> score(st.length + n);
    for (std::size_t b = 0; b < s.language_blocks; ++b)
    {
        const std::size_t base = layer_index(s, L, b, 0);
        const Matrix h1 = layer_norm(x, st.w.param(block_param(L, b, ".ln1.weight")), st.w.param(block_param(L, b, ".ln1.bias")));
        const Matrix q = st.rec.apply(st.w, base, h1);
        const Matrix k = st.rec.apply(st.w, base + 1, h1);
        const Matrix v = st.rec.apply(st.w, base + 2, h1);
        auto &kc = st.keys[b];
        auto &vc = st.values[b];
        kc.insert(kc.end(), k.data().begin(), k.data().end());
        vc.insert(vc.end(), v.data().begin(), v.data().end());
        Matrix ctx(n, d);
        for (std::size_t i = 0; i < n; ++i)
        {
            const std::size_t visible = st.length + i + 1;
            for (std::size_t h = 0; h < s.heads; ++h)
            {
                const auto qi = q.row(i).subspan(h * hd, hd);
                double mx = -INFINITY;
                for (std::size_t j = 0; j < visible; ++j)
                {
                    score[j] = detail::dot(qi, std::span<const float>(kc.data() + j * d + h * hd, hd)) * scale;
                    mx = std::max(mx, score[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < visible; ++j)
                {
                    score[j] = std::exp(score[j] - mx);
                    z += score[j];
                }
                for (std::size_t c = 0; c < hd; ++c)
                {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < visible; ++j)
                        acc += score[j] * vc[j * d + h * hd + c];
                    ctx(i, h * hd + c) = static_cast<float>(acc / z);
                }
            }
        }
        add_inplace(x, st.rec.apply(st.w, base + 3, ctx));
        const Matrix h2 = layer_norm(x, st.w.param(block_param(L, b, ".ln2.weight")), st.w.param(block_param(L, b, ".ln2.bias")));
        add_inplace(x, feed_forward(st.w, st.rec, base + 4, h2));
    }
    st.length += n;
    return layer_norm(x, st.w.param("language.ln_f.weight"), st.w.param("language.ln_f.bias"));
}

Matrix LanguageSession::append_tokens(std::span<const std::int32_t> tokens)
{
    const auto &s = state_->w.spec();
    const Matrix &table = state_->w.param("language.token_embed");
    Matrix rows(tokens.size(), s.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i)
    {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= s.vocab)
            throw std::invalid_argument("token id " + std::to_string(tokens[i]) + " outside vocab");
        std::copy_n(table.row(tokens[i]).begin(), s.d_model, rows.row(i).begin());
    }
    return append(rows);
}

std::vector<float> output_logits(const ModelWeights &w, std::span<const float> hidden)
{
    const Matrix &head = w.param("language.head");
    std::vector<float> logits(head.rows());
    for (std::size_t t = 0; t < head.rows(); ++t)
        logits[t] = static_cast<float>(detail::dot(hidden, head.row(t)));
    return logits;
}

std::int32_t greedy_token(std::span<const float> logits) noexcept
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best])
            best = i;
    return static_cast<std::int32_t>(best);
}

namespace
{

std::vector<float> mean_normalized(const Matrix &rows)
{
    std::vector<double> acc(rows.cols(), 0.0);
    for (std::size_t i = 0; i < rows.rows(); ++i)
        for (std::size_t c = 0; c < rows.cols(); ++c)
            acc[c] += rows(i, c);
    double norm = 0.0;
    for (double v : acc)
        norm += v * v;
    norm = std::sqrt(norm);
    std::vector<float> out(rows.cols(), 0.0f);
    if (norm > 0.0)
        for (std::size_t c = 0; c < acc.size(); ++c)
            out[c] = static_cast<float>(acc[c] / norm);
    return out;
}

} // namespace

std::vector<float> image_embedding_from_prefix(const Matrix &prefix)
{
    return mean_normalized(prefix);
}

std::vector<float> text_embedding(const ModelWeights &w, const ProbePair &probe)
{
    LanguageSession session(w);
    std::vector<std::int32_t> tokens{kBosToken};
    tokens.insert(tokens.end(), probe.text_ids.begin(), probe.text_ids.end());
    return mean_normalized(session.append_tokens(tokens));
}

std::vector<std::int32_t> decode_after_prefix(const ModelWeights &w, const Matrix &prefix, const ProbePair &probe,
                                              TaskKind mode, std::size_t horizon)
{
    if (mode == TaskKind::Retrieval)
        throw std::invalid_argument("decode_after_prefix: retrieval does not decode");
    if (horizon == 0)
        throw std::invalid_argument("decode horizon must be >= 1");
    LanguageSession session(w);
    session.append(prefix);
    std::vector<std::int32_t> prompt;
    if (mode == TaskKind::Caption)
        prompt.push_back(kBosToken);
    else
    {
        prompt = probe.question_ids;
        prompt.push_back(kSepToken);
    }
    Matrix h = session.append_tokens(prompt);
    std::vector<std::int32_t> out;
    out.reserve(horizon);
    for (std::size_t step = 0; step < horizon; ++step)
    {
        const auto logits = output_logits(w, h.row(h.rows() - 1));
        const std::int32_t tok = greedy_token(logits);
        out.push_back(tok);
        if (step + 1 < horizon)
            h = session.append_tokens(std::span<const std::int32_t>(&tok, 1));
    }
    return out;
}

ForwardOutput forward(const ModelWeights &w, const ProbePair &probe, TaskKind mode, std::size_t horizon)
{
    ForwardOutput out;
    const Matrix prefix = connect(w, encode_image(w, probe.image));
    switch (mode)
    {
    case TaskKind::Retrieval:
        out.image_embedding = image_embedding_from_prefix(prefix);
        out.text_embedding = text_embedding(w, probe);
        break;
    case TaskKind::Caption:
        out.tokens = decode_after_prefix(w, prefix, probe, mode, horizon ? horizon : kCaptionHorizon);
        break;
    case TaskKind::VQA:
        out.tokens = decode_after_prefix(w, prefix, probe, mode, horizon ? horizon : kVqaHorizon);
        break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Calibration

CalibrationSet::CalibrationSet(std::size_t sample_count, std::vector<Matrix> activations)
    : sample_count_(sample_count), activations_(std::move(activations)), stats_(activations_.size())
{
    for (std::size_t i = 0; i < activations_.size(); ++i)
        if (!activations_[i].empty())
            stats_[i] = std::make_shared<const CalibrationStats>(CalibrationStats::from_activations(activations_[i]));
}

bool CalibrationSet::covers(std::size_t layer) const noexcept
{
    return layer < activations_.size() && !activations_[layer].empty();
}

const Matrix &CalibrationSet::activations(std::size_t layer) const
{
    if (!covers(layer))
        throw std::out_of_range("calibration set has no activations for layer " + std::to_string(layer));
    return activations_[layer];
}

const CalibrationStats &CalibrationSet::stats(std::size_t layer) const
{
    if (!covers(layer))
        throw std::out_of_range("calibration set has no activations for layer " + std::to_string(layer));
    return *stats_[layer];
}

CalibrationSet collect_calibration(const ModelWeights &w, const ProbeSet &probes, std::size_t n)
{
    if (n == 0)
        throw std::invalid_argument("collect_calibration: n must be >= 1");
    if (probes.size() < n)
        throw std::invalid_argument("insufficient probes: need " + std::to_string(n) + ", have " +
                                    std::to_string(probes.size()));
    const auto &s = w.spec();
    std::vector<std::vector<float>> rows(w.layer_count());
    ActivationHook hook = [&](std::size_t layer, const Matrix &x) {
        auto &dst = rows[layer];
        dst.insert(dst.end(), x.data().begin(), x.data().end());
    };
    const Matrix &table = w.param("language.token_embed");
    for (std::size_t p = 0; p < n; ++p)
    {
        const auto &probe = probes.pairs[p];
        const Matrix prefix = connect(w, encode_image(w, probe.image, &hook), &hook);
        std::vector<std::int32_t> tokens{kBosToken};
        tokens.insert(tokens.end(), probe.text_ids.begin(), probe.text_ids.end());
        tokens.push_back(kSepToken);
        tokens.insert(tokens.end(), probe.question_ids.begin(), probe.question_ids.end());
        Matrix seq(prefix.rows() + tokens.size(), s.d_model);
        for (std::size_t i = 0; i < prefix.rows(); ++i)
            std::copy_n(prefix.row(i).begin(), s.d_model, seq.row(i).begin());
        for (std::size_t i = 0; i < tokens.size(); ++i)
            std::copy_n(table.row(tokens[i]).begin(), s.d_model, seq.row(prefix.rows() + i).begin());
        LanguageSession session(w, &hook);
        session.append(seq);
    }
    std::vector<Matrix> acts(w.layer_count());
    for (std::size_t l = 0; l < w.layer_count(); ++l)
    {
        const std::size_t cols = w.linear(l).cols();
        const std::size_t total = rows[l].size() / cols;
        if (total == 0)
            continue;
        const std::size_t keep = std::min(total, kMaxCalibrationRows);
        Matrix x(keep, cols);
        for (std::size_t j = 0; j < keep; ++j)
        {
            const std::size_t src = keep == total ? j : (j * total) / keep;
            std::copy_n(rows[l].begin() + static_cast<std::ptrdiff_t>(src * cols), cols, x.row(j).begin());
        }
        acts[l] = std::move(x);
        rows[l].clear();
        rows[l].shrink_to_fit();
    }
    return CalibrationSet(n, std::move(acts));
}

// ---------------------------------------------------------------------------
// Quantization

void QuantizationLedger::append(const QuantizationLedger &other)
{
    entries.insert(entries.end(), other.entries.begin(), other.entries.end());
}

QuantizedLayer quantize_layer(const ModelWeights &w, std::size_t layer, const QuantizeOptions &opts,
                              const CalibrationSet *calib)
{
    const Matrix &weight = w.linear(layer);
    const std::string name = w.layers()[layer].name();
    const bool covered = calib && calib->covers(layer);
    if ((opts.method == QuantMethod::GPTQ || opts.method == QuantMethod::AWQ) && !covered)
        throw std::invalid_argument("missing calibration for layer " + name);

    LedgerEntry entry;
    entry.layer_index = layer;
    entry.layer = name;
    entry.method = opts.method;
    entry.bits = opts.bits;
    entry.params = weight.size();

    QuantizedMatrix q;
    switch (opts.method)
    {
    case QuantMethod::Uniform: q = uniform_quantize(weight, opts.bits); break;
    case QuantMethod::RTN: q = rtn_group_quantize(weight, opts.bits, opts.group_size); break;
    case QuantMethod::GPTQ: {
        GptqOptions g;
        g.group_size = opts.group_size;
        g.damping = opts.gptq_damping;
        g.block_size = opts.gptq_block_size;
        auto r = gptq_quantize(weight, calib->stats(layer), opts.bits, g);
        q = std::move(r.quantized);
        entry.proxy_error = r.proxy_error;
        break;
    }
    case QuantMethod::AWQ: {
        AwqOptions a;
        a.group_size = opts.group_size;
        auto r = awq_quantize(weight, calib->stats(layer), opts.bits, a);
        q = std::move(r.quantized);
        entry.proxy_error = r.proxy_error;
        entry.chosen_alpha = r.chosen_alpha;
        break;
    }
    }
    entry.group_size = q.group_size;
    entry.grid_count = q.grid_count();
    auto deq = std::make_shared<const Matrix>(dequantize(q));
    if (covered && !entry.proxy_error)
        entry.proxy_error = calib->stats(layer).proxy_loss(weight, *deq);
    return {std::move(deq), std::move(entry)};
}

QuantizedModel apply_quantization(const ModelWeights &w, const Selector &sel, const QuantizeOptions &opts,
                                  const CalibrationSet *calib)
{
    QuantizedModel out{w, {}};
    for (auto i : select_layer_indices(w, sel))
    {
        auto ql = quantize_layer(w, i, opts, calib);
        out.weights.replace_layer(i, std::move(ql.weight));
        out.ledger.entries.push_back(std::move(ql.entry));
    }
    return out;
}

} // namespace mmq
