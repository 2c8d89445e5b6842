#include "mmq/tasks.hpp"

#include <cmath>
#include <stdexcept>

namespace mmq
{

ProbeShape ProbeShape::from_spec(const PipelineSpec &spec)
{
    ProbeShape s;
    s.patch_count = spec.patch_count;
    s.patch_dim = spec.patch_dim;
    s.vocab = spec.vocab;
    return s;
}

namespace
{

// Shape-keyed stream for the fixed maps shared by every probe set.
RngStream fixed_stream(const ProbeShape &s, std::string_view label)
{
    const std::string key = std::to_string(s.patch_count) + "x" + std::to_string(s.patch_dim) + "/" +
                            std::to_string(s.vocab) + "/" + std::to_string(s.latent_dim);
    return RngStream(fnv1a64(key)).fork(label);
}

std::vector<float> noisy(const std::vector<double> &z, RngStream &rng, double noise)
{
    std::vector<float> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        out[i] = static_cast<float>(z[i] + noise * rng.next_normal());
    return out;
}

std::vector<std::int32_t> tokens_from(const Matrix &proj, std::size_t positions, std::size_t text_vocab,
                                      std::span<const float> latent)
{
    std::vector<std::int32_t> out(positions);
    for (std::size_t p = 0; p < positions; ++p)
    {
        std::size_t best = 0;
        double best_v = -INFINITY;
        for (std::size_t v = 0; v < text_vocab; ++v)
        {
            const double s = detail::dot(proj.row(p * text_vocab + v), latent);
            if (s > best_v)
            {
                best_v = s;
                best = v;
            }
        }
        out[p] = static_cast<std::int32_t>(best) + kFirstTextToken;
    }
    return out;
}

} // namespace

ProbeSet make_probe_set(std::uint64_t seed, std::size_t n_pairs, const ProbeShape &shape)
{
    if (n_pairs == 0)
        throw std::invalid_argument("make_probe_set: n_pairs must be >= 1");
    if (shape.vocab <= static_cast<std::size_t>(kFirstTextToken) || shape.latent_dim == 0)
        throw std::invalid_argument("make_probe_set: degenerate shape");
    const std::size_t text_vocab = shape.vocab - kFirstTextToken;
    auto s_img = fixed_stream(shape, "image_map");
    auto s_txt = fixed_stream(shape, "text_map");
    auto s_q = fixed_stream(shape, "question_map");
    const Matrix image_map = randn_matrix(s_img, shape.patch_count * shape.patch_dim, shape.latent_dim,
                                          1.0 / std::sqrt(static_cast<double>(shape.latent_dim)));
    const Matrix text_map = randn_matrix(s_txt, shape.text_len * text_vocab, shape.latent_dim, 1.0);
    const Matrix question_map = randn_matrix(s_q, shape.question_len * text_vocab, shape.latent_dim, 1.0);

    ProbeSet set;
    set.seed = seed;
    set.pairs.reserve(n_pairs);
    const RngStream root(seed);
    for (std::size_t i = 0; i < n_pairs; ++i)
    {
        RngStream rng = root.fork(static_cast<std::uint64_t>(i));
        std::vector<double> z(shape.latent_dim);
        for (auto &v : z)
            v = rng.next_normal();
        ProbePair p;
        p.image_latent = noisy(z, rng, shape.noise);
        p.text_latent = noisy(z, rng, shape.noise);
        p.image = Matrix(shape.patch_count, shape.patch_dim);
        auto img = p.image.data();
        for (std::size_t e = 0; e < img.size(); ++e)
            img[e] = static_cast<float>(detail::dot(image_map.row(e), p.image_latent));
        p.text_ids = tokens_from(text_map, shape.text_len, text_vocab, p.text_latent);
        p.question_ids = tokens_from(question_map, shape.question_len, text_vocab, p.image_latent);
        set.pairs.push_back(std::move(p));
    }
    return set;
}

std::vector<Matrix> compute_prefixes(const ModelWeights &w, const ProbeSet &probes)
{
    std::vector<Matrix> out;
    out.reserve(probes.size());
    for (const auto &p : probes.pairs)
        out.push_back(connect(w, encode_image(w, p.image)));
    return out;
}

TaskOutputs run_task(const ModelWeights &w, const ProbeSet &probes, TaskKind task, std::size_t horizon,
                     const std::vector<Matrix> *prefixes)
{
    if (prefixes && prefixes->size() != probes.size())
        throw std::invalid_argument("run_task: prefix count does not match probe count");
    TaskOutputs out;
    out.task = task;
    const std::size_t n = probes.size();
    auto prefix = [&](std::size_t i) { return prefixes ? (*prefixes)[i] : connect(w, encode_image(w, probes.pairs[i].image)); };
    if (task == TaskKind::Retrieval)
    {
        const std::size_t d = w.spec().d_model;
        out.image_embeddings = Matrix(n, d);
        out.text_embeddings = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i)
        {
            const auto img = image_embedding_from_prefix(prefix(i));
            const auto txt = text_embedding(w, probes.pairs[i]);
            std::copy(img.begin(), img.end(), out.image_embeddings.row(i).begin());
            std::copy(txt.begin(), txt.end(), out.text_embeddings.row(i).begin());
        }
        return out;
    }
    out.horizon = horizon ? horizon : task == TaskKind::Caption ? kCaptionHorizon : kVqaHorizon;
    out.tokens.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.tokens.push_back(decode_after_prefix(w, prefix(i), probes.pairs[i], task, out.horizon));
    return out;
}

std::size_t top1(std::span<const float> query, const Matrix &candidates)
{
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t j = 0; j < candidates.rows(); ++j)
    {
        const double v = detail::dot(query, candidates.row(j));
        if (v > best_v)
        {
            best_v = v;
            best = j;
        }
    }
    return best;
}

ScoreRecord score_outputs(const TaskOutputs &q, const TaskOutputs &ref)
{
    if (q.task != ref.task)
        throw std::invalid_argument("score_outputs: task mismatch");
    ScoreRecord r;
    r.task = ref.task;
    if (ref.task == TaskKind::Retrieval)
    {
        const std::size_t n = ref.image_embeddings.rows();
        if (n < 2)
            throw std::invalid_argument("retrieval scoring needs at least 2 pairs");
        if (q.image_embeddings.rows() != n || q.text_embeddings.rows() != n)
            throw std::invalid_argument("score_outputs: probe count mismatch");
        std::size_t agree = 0;
        for (std::size_t i = 0; i < n; ++i)
        {
            agree += top1(q.text_embeddings.row(i), q.image_embeddings) ==
                     top1(ref.text_embeddings.row(i), ref.image_embeddings);
            agree += top1(q.image_embeddings.row(i), q.text_embeddings) ==
                     top1(ref.image_embeddings.row(i), ref.text_embeddings);
        }
        r.n_probes = n;
        r.score = static_cast<double>(agree) / static_cast<double>(2 * n);
        return r;
    }
    if (q.tokens.size() != ref.tokens.size() || q.horizon != ref.horizon)
        throw std::invalid_argument("score_outputs: generation outputs do not line up");
    if (ref.tokens.empty())
        throw std::invalid_argument("score_outputs: no probes");
    std::size_t match = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < ref.tokens.size(); ++i)
        for (std::size_t t = 0; t < ref.horizon; ++t)
        {
            match += q.tokens[i][t] == ref.tokens[i][t];
            ++total;
        }
    r.n_probes = ref.tokens.size();
    r.score = static_cast<double>(match) / static_cast<double>(total);
    return r;
}

ScoreRecord score_retrieval(const ModelWeights &q_weights, const ModelWeights &fp_weights, const ProbeSet &probes)
{
    if (probes.size() < 2)
        throw std::invalid_argument("retrieval scoring needs at least 2 pairs");
    return score_outputs(run_task(q_weights, probes, TaskKind::Retrieval),
                         run_task(fp_weights, probes, TaskKind::Retrieval));
}

ScoreRecord score_generation(const ModelWeights &q_weights, const ModelWeights &fp_weights, const ProbeSet &probes,
                             TaskKind task, std::size_t horizon)
{
    if (task == TaskKind::Retrieval)
        throw std::invalid_argument("score_generation: retrieval is not a generation task");
    return score_outputs(run_task(q_weights, probes, task, horizon), run_task(fp_weights, probes, task, horizon));
}

} // namespace mmq
