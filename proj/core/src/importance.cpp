#include "mmq/importance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mmq
{

std::string_view to_string(ImportanceMethod m) noexcept
{
    switch (m)
    {
    case ImportanceMethod::Impurity: return "impurity";
    case ImportanceMethod::Permutation: return "permutation";
    case ImportanceMethod::Shapley: return "shapley";
    case ImportanceMethod::Consensus: return "consensus";
    }
    return "?";
}

void AttributionDataset::validate() const
{
    if (x.size() != y.size() || run_ids.size() != y.size())
        throw std::invalid_argument("attribution dataset: row counts disagree");
    for (const auto &row : x)
        if (row.size() != feature_names.size())
            throw std::invalid_argument("attribution dataset: ragged feature rows");
    for (double v : y)
        if (!std::isfinite(v))
            throw std::invalid_argument("attribution dataset: non-finite target");
}

AttributionDataset dataset_from_results(const std::vector<RunRecord> &rows, TaskKind task,
                                        std::optional<QuantMethod> method)
{
    std::vector<const RunRecord *> slice;
    for (const auto &r : rows)
        if (r.task == task && (!method || r.method == *method))
            slice.push_back(&r);
    AttributionDataset d;
    for (auto c : kAllComponents)
    {
        bool varies = false;
        for (const auto *r : slice)
            varies = varies || r->bits(c) != slice.front()->bits(c);
        if (varies)
            d.feature_names.emplace_back(to_string(c));
    }
    for (const auto *r : slice)
    {
        std::vector<double> row;
        for (const auto &name : d.feature_names)
            row.push_back(r->bits(parse_component(name)));
        d.x.push_back(std::move(row));
        d.y.push_back(r->score);
        d.run_ids.push_back(r->run_id);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Trees

double RegressionTree::predict(std::span<const double> x) const
{
    std::uint32_t n = 0;
    while (nodes[n].feature >= 0)
        n = x[static_cast<std::size_t>(nodes[n].feature)] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return nodes[n].value;
}

std::size_t RegressionTree::leaf_count() const noexcept
{
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const TreeNode &n) { return n.feature < 0; }));
}

namespace
{

struct Split
{
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

double sse_of(const AttributionDataset &d, std::span<const std::size_t> rows, double &mean)
{
    double s = 0.0;
    for (auto r : rows)
        s += d.y[r];
    mean = s / static_cast<double>(rows.size());
    double sse = 0.0;
    for (auto r : rows)
        sse += (d.y[r] - mean) * (d.y[r] - mean);
    return sse;
}

Split best_split(const AttributionDataset &d, std::span<const std::size_t> rows, std::size_t min_leaf)
{
    Split best;
    const std::size_t n = rows.size();
    std::vector<std::size_t> order(rows.begin(), rows.end());
    for (std::size_t f = 0; f < d.features(); ++f)
    {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.x[a][f] < d.x[b][f]; });
        double total = 0.0, total_sq = 0.0;
        for (auto r : order)
        {
            total += d.y[r];
            total_sq += d.y[r] * d.y[r];
        }
        const double parent = total_sq - total * total / static_cast<double>(n);
        double left = 0.0, left_sq = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i)
        {
            left += d.y[order[i]];
            left_sq += d.y[order[i]] * d.y[order[i]];
            const double lo = d.x[order[i]][f];
            const double hi = d.x[order[i + 1]][f];
            if (lo == hi)
                continue;
            const std::size_t nl = i + 1, nr = n - nl;
            if (nl < min_leaf || nr < min_leaf)
                continue;
            const double right = total - left;
            const double right_sq = total_sq - left_sq;
            const double sse = (left_sq - left * left / static_cast<double>(nl)) +
                               (right_sq - right * right / static_cast<double>(nr));
            const double gain = parent - sse;
            // Equal partitions reached through different features differ only
            // by rounding; keep the first so scaling y cannot flip the choice.
            if (gain > best.gain + 1e-9 * parent)
            {
                best.gain = gain;
                best.feature = static_cast<int>(f);
                best.threshold = lo + (hi - lo) / 2.0;
            }
        }
    }
    return best;
}

} // namespace

RegressionTree fit_tree(const AttributionDataset &data, std::span<const std::size_t> rows, std::size_t min_leaf)
{
    if (rows.empty())
        throw std::invalid_argument("fit_tree: no rows");
    min_leaf = std::max<std::size_t>(min_leaf, 1);
    RegressionTree tree;
    tree.impurity_decrease.assign(data.features(), 0.0);
    const double n_total = static_cast<double>(rows.size());

    struct Pending
    {
        std::uint32_t node;
        std::vector<std::size_t> rows;
    };
    std::vector<Pending> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, std::vector<std::size_t>(rows.begin(), rows.end())});
    while (!stack.empty())
    {
        Pending p = std::move(stack.back());
        stack.pop_back();
        double mean = 0.0;
        const double sse = sse_of(data, p.rows, mean);
        tree.nodes[p.node].value = mean;
        tree.nodes[p.node].count = p.rows.size();
        const double y0 = data.y[p.rows.front()];
        const bool pure = std::all_of(p.rows.begin(), p.rows.end(), [&](std::size_t r) { return data.y[r] == y0; });
        if (p.rows.size() < 2 * min_leaf || pure || !(sse > 0.0))
            continue;
        const Split s = best_split(data, p.rows, min_leaf);
        if (s.feature < 0)
            continue;
        std::vector<std::size_t> left, right;
        for (auto r : p.rows)
            (data.x[r][static_cast<std::size_t>(s.feature)] <= s.threshold ? left : right).push_back(r);
        double ml = 0.0, mr = 0.0;
        const double gain = sse - sse_of(data, left, ml) - sse_of(data, right, mr);
        if (!(gain > 1e-12 * sse))
            continue;
        const auto l = static_cast<std::uint32_t>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        auto &node = tree.nodes[p.node];
        node.feature = s.feature;
        node.threshold = s.threshold;
        node.left = l;
        node.right = l + 1;
        tree.impurity_decrease[static_cast<std::size_t>(s.feature)] += gain / n_total;
        stack.push_back({l + 1, std::move(right)});
        stack.push_back({l, std::move(left)});
    }
    return tree;
}

double ForestModel::predict(std::span<const double> x) const
{
    double s = 0.0;
    for (const auto &t : trees)
        s += t.predict(x);
    return trees.empty() ? 0.0 : s / static_cast<double>(trees.size());
}

std::vector<double> ForestModel::predict_all(const std::vector<std::vector<double>> &x) const
{
    std::vector<double> out;
    out.reserve(x.size());
    for (const auto &row : x)
        out.push_back(predict(row));
    return out;
}

ForestModel fit_random_forest(const AttributionDataset &data, const ForestOptions &opts)
{
    data.validate();
    if (data.rows() < kMinForestRows)
        throw std::invalid_argument("random forest needs at least " + std::to_string(kMinForestRows) + " rows, got " +
                                    std::to_string(data.rows()));
    if (opts.n_trees == 0)
        throw std::invalid_argument("random forest needs at least one tree");
    ForestModel f;
    f.n_features = data.features();
    f.trees.resize(opts.n_trees);
    const RngStream root(opts.seed);
    for (std::size_t t = 0; t < opts.n_trees; ++t)
        f.tree_seeds.push_back(root.fork(static_cast<std::uint64_t>(t)).seed());
    parallel_for(opts.n_trees, opts.workers, [&](std::size_t t) {
        std::vector<std::size_t> rows(data.rows());
        if (opts.bootstrap)
        {
            RngStream rng(f.tree_seeds[t]);
            for (auto &r : rows)
                r = static_cast<std::size_t>(rng.next_below(data.rows()));
        }
        else
            std::iota(rows.begin(), rows.end(), std::size_t{0});
        f.trees[t] = fit_tree(data, rows, opts.min_leaf);
    });
    return f;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<std::string> ImportanceReport::ranking() const
{
    std::vector<std::size_t> idx(features.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return features[a].pct > features[b].pct; });
    std::vector<std::string> out;
    for (auto i : idx)
        out.push_back(features[i].name);
    return out;
}

void normalize_percentages(ImportanceReport &report)
{
    double total = 0.0;
    for (const auto &f : report.features)
        total += std::max(f.importance, 0.0);
    report.degenerate = !(total > 0.0);
    const double n = static_cast<double>(report.features.size());
    for (auto &f : report.features)
        f.pct = report.degenerate ? 100.0 / n : 100.0 * std::max(f.importance, 0.0) / total;
}

double percentile(std::vector<double> v, double p)
{
    if (v.empty())
        throw std::invalid_argument("percentile of empty sample");
    std::sort(v.begin(), v.end());
    const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

namespace
{

ImportanceReport make_report(ImportanceMethod m, const std::vector<std::string> &names,
                             const std::vector<double> &values)
{
    ImportanceReport r;
    r.method = m;
    for (std::size_t j = 0; j < names.size(); ++j)
        r.features.push_back({names[j], values[j], values[j], values[j], 0.0});
    normalize_percentages(r);
    return r;
}

void set_ci(ImportanceReport &r, const std::vector<std::vector<double>> &samples)
{
    for (std::size_t j = 0; j < r.features.size(); ++j)
    {
        r.features[j].ci_low = percentile(samples[j], 2.5);
        r.features[j].ci_high = percentile(samples[j], 97.5);
    }
}

std::vector<double> mean_impurity(const ForestModel &forest)
{
    std::vector<double> v(forest.n_features, 0.0);
    for (const auto &t : forest.trees)
        for (std::size_t j = 0; j < v.size(); ++j)
            v[j] += t.impurity_decrease[j];
    for (auto &x : v)
        x /= static_cast<double>(std::max<std::size_t>(forest.trees.size(), 1));
    return v;
}

// Forest predictions are pure functions of the feature vector and grids
// repeat vectors heavily, so memoize.
class CachedPredictor
{
  public:
    explicit CachedPredictor(const ForestModel &f) : forest_(f) {}

    double operator()(const std::vector<double> &x)
    {
        auto it = cache_.find(x);
        if (it != cache_.end())
            return it->second;
        const double v = forest_.predict(x);
        cache_.emplace(x, v);
        return v;
    }

  private:
    const ForestModel &forest_;
    std::map<std::vector<double>, double> cache_;
};

} // namespace

ImportanceReport impurity_importance(const ForestModel &forest, const std::vector<std::string> &names)
{
    if (names.size() != forest.n_features)
        throw std::invalid_argument("impurity_importance: feature name count mismatch");
    return make_report(ImportanceMethod::Impurity, names, mean_impurity(forest));
}

ImportanceReport bootstrap_importance_ci(const AttributionDataset &data, std::size_t n_boot,
                                         const ForestOptions &opts)
{
    if (n_boot == 0)
        throw std::invalid_argument("bootstrap needs n_boot >= 1");
    const ForestModel base = fit_random_forest(data, opts);
    ImportanceReport report = impurity_importance(base, data.feature_names);
    std::vector<std::vector<double>> samples(data.features(), std::vector<double>(n_boot));
    const RngStream root = RngStream(opts.seed).fork("bootstrap");
    ForestOptions inner = opts;
    inner.workers = 1;
    parallel_for(n_boot, opts.workers, [&](std::size_t b) {
        RngStream rng = root.fork(static_cast<std::uint64_t>(b));
        AttributionDataset resample;
        resample.feature_names = data.feature_names;
        for (std::size_t i = 0; i < data.rows(); ++i)
        {
            const auto r = static_cast<std::size_t>(rng.next_below(data.rows()));
            resample.x.push_back(data.x[r]);
            resample.y.push_back(data.y[r]);
            resample.run_ids.push_back(data.run_ids[r]);
        }
        ForestOptions o = inner;
        o.seed = rng.next_u64();
        const auto values = mean_impurity(fit_random_forest(resample, o));
        for (std::size_t j = 0; j < values.size(); ++j)
            samples[j][b] = values[j];
    });
    set_ci(report, samples);
    return report;
}

ImportanceReport permutation_importance(const ForestModel &forest, const AttributionDataset &data,
                                        std::size_t n_repeats, std::uint64_t seed)
{
    data.validate();
    if (data.rows() == 0)
        throw std::invalid_argument("permutation_importance: empty dataset");
    if (n_repeats == 0)
        throw std::invalid_argument("permutation_importance: n_repeats must be >= 1");
    CachedPredictor predict(forest);
    auto mse = [&](const std::vector<std::vector<double>> &x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
        {
            const double e = predict(x[i]) - data.y[i];
            s += e * e;
        }
        return s / static_cast<double>(x.size());
    };
    const double base = mse(data.x);
    const RngStream root = RngStream(seed).fork("permutation");
    std::vector<double> values(data.features(), 0.0);
    std::vector<std::vector<double>> samples(data.features());
    for (std::size_t j = 0; j < data.features(); ++j)
    {
        for (std::size_t r = 0; r < n_repeats; ++r)
        {
            RngStream rng = root.fork(static_cast<std::uint64_t>(j)).fork(static_cast<std::uint64_t>(r));
            std::vector<std::size_t> perm(data.rows());
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t i = perm.size(); i > 1; --i)
                std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.next_below(i))]);
            auto x = data.x;
            for (std::size_t i = 0; i < x.size(); ++i)
                x[i][j] = data.x[perm[i]][j];
            const double inc = mse(x) - base;
            samples[j].push_back(inc);
            values[j] += inc;
        }
        values[j] /= static_cast<double>(n_repeats);
    }
    auto report = make_report(ImportanceMethod::Permutation, data.feature_names, values);
    set_ci(report, samples);
    return report;
}

std::vector<std::vector<double>> shapley_values(const ForestModel &forest, const AttributionDataset &data)
{
    data.validate();
    const std::size_t F = data.features();
    if (F > kMaxExactShapleyFeatures)
        throw std::invalid_argument("exact Shapley enumeration supports at most " +
                                    std::to_string(kMaxExactShapleyFeatures) + " features, got " +
                                    std::to_string(F) + "; a sampling estimator is required");
    if (data.rows() == 0)
        throw std::invalid_argument("shapley_values: empty dataset");
    CachedPredictor predict(forest);
    const std::size_t masks = std::size_t{1} << F;

    // v(S) depends only on x restricted to S.
    std::map<std::pair<std::size_t, std::vector<double>>, double> value_cache;
    auto value = [&](std::size_t mask, const std::vector<double> &x) {
        std::vector<double> key;
        for (std::size_t j = 0; j < F; ++j)
            if (mask & (std::size_t{1} << j))
                key.push_back(x[j]);
        auto it = value_cache.find({mask, key});
        if (it != value_cache.end())
            return it->second;
        double s = 0.0;
        std::vector<double> z(F);
        for (const auto &b : data.x)
        {
            for (std::size_t j = 0; j < F; ++j)
                z[j] = (mask & (std::size_t{1} << j)) ? x[j] : b[j];
            s += predict(z);
        }
        const double v = s / static_cast<double>(data.rows());
        value_cache.emplace(std::make_pair(mask, std::move(key)), v);
        return v;
    };

    std::vector<double> fact(F + 1, 1.0);
    for (std::size_t i = 1; i <= F; ++i)
        fact[i] = fact[i - 1] * static_cast<double>(i);
    std::vector<double> weight(F + 1, 0.0);
    for (std::size_t s = 0; s < F; ++s)
        weight[s] = fact[s] * fact[F - s - 1] / fact[F];

    std::vector<std::vector<double>> phi(data.rows(), std::vector<double>(F, 0.0));
    std::vector<double> v(masks);
    for (std::size_t i = 0; i < data.rows(); ++i)
    {
        for (std::size_t m = 0; m < masks; ++m)
            v[m] = value(m, data.x[i]);
        for (std::size_t j = 0; j < F; ++j)
        {
            const std::size_t bit = std::size_t{1} << j;
            double acc = 0.0;
            for (std::size_t m = 0; m < masks; ++m)
            {
                if (m & bit)
                    continue;
                acc += weight[static_cast<std::size_t>(std::popcount(m))] * (v[m | bit] - v[m]);
            }
            phi[i][j] = acc;
        }
    }
    return phi;
}

ImportanceReport shapley_importance(const ForestModel &forest, const AttributionDataset &data, std::uint64_t seed)
{
    const auto phi = shapley_values(forest, data);
    const std::size_t F = data.features();
    const std::size_t n = data.rows();
    std::vector<double> values(F, 0.0);
    for (const auto &row : phi)
        for (std::size_t j = 0; j < F; ++j)
            values[j] += std::abs(row[j]);
    for (auto &v : values)
        v /= static_cast<double>(n);
    auto report = make_report(ImportanceMethod::Shapley, data.feature_names, values);
    constexpr std::size_t kBoot = 100;
    std::vector<std::vector<double>> samples(F, std::vector<double>(kBoot, 0.0));
    const RngStream root = RngStream(seed).fork("shapley-ci");
    for (std::size_t b = 0; b < kBoot; ++b)
    {
        RngStream rng = root.fork(static_cast<std::uint64_t>(b));
        for (std::size_t i = 0; i < n; ++i)
        {
            const auto r = static_cast<std::size_t>(rng.next_below(n));
            for (std::size_t j = 0; j < F; ++j)
                samples[j][b] += std::abs(phi[r][j]);
        }
        for (std::size_t j = 0; j < F; ++j)
            samples[j][b] /= static_cast<double>(n);
    }
    set_ci(report, samples);
    return report;
}

// ---------------------------------------------------------------------------
// Linear baseline

double r_squared(std::span<const double> y, std::span<const double> prediction)
{
    if (y.size() != prediction.size() || y.empty())
        throw std::invalid_argument("r_squared: size mismatch");
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double tss = 0.0, rss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
    {
        tss += (y[i] - mean) * (y[i] - mean);
        rss += (y[i] - prediction[i]) * (y[i] - prediction[i]);
    }
    if (!(tss > 0.0))
        return 0.0;
    return 1.0 - rss / tss;
}

LinearFit linear_baseline(const AttributionDataset &data)
{
    data.validate();
    if (data.rows() < kMinLinearRows)
        throw std::invalid_argument("linear baseline needs at least " + std::to_string(kMinLinearRows) + " rows");
    const std::size_t n = data.rows();
    const std::size_t F = data.features();
    LinearFit fit;
    fit.coefficients.assign(F, 0.0);
    std::vector<double> mx(F, 0.0);
    for (const auto &row : data.x)
        for (std::size_t j = 0; j < F; ++j)
            mx[j] += row[j];
    for (auto &m : mx)
        m /= static_cast<double>(n);
    const double my = std::accumulate(data.y.begin(), data.y.end(), 0.0) / static_cast<double>(n);
    fit.intercept = my;
    if (F > 0)
    {
        std::vector<double> a(F * F, 0.0), b(F, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < F; ++p)
            {
                const double xp = data.x[i][p] - mx[p];
                b[p] += xp * (data.y[i] - my);
                for (std::size_t q = 0; q < F; ++q)
                    a[p * F + q] += xp * (data.x[i][q] - mx[q]);
            }
        double max_diag = 0.0, mean_diag = 0.0;
        for (std::size_t p = 0; p < F; ++p)
        {
            max_diag = std::max(max_diag, a[p * F + p]);
            mean_diag += a[p * F + p] / static_cast<double>(F);
        }
        std::vector<double> probe = a;
        const long failed = detail::cholesky_lower_inplace(probe, F, 0.0);
        bool tiny_pivot = false;
        if (failed < 0)
            for (std::size_t p = 0; p < F; ++p)
                tiny_pivot = tiny_pivot || probe[p * F + p] * probe[p * F + p] <= 1e-10 * max_diag;
        fit.rank_deficient = failed >= 0 || tiny_pivot;
        const double shift = 1e-9 * (mean_diag > 0.0 ? mean_diag : 1.0);
        if (detail::cholesky_lower_inplace(a, F, shift) >= 0)
            throw std::runtime_error("linear baseline: normal equations singular after damping");
        fit.coefficients = detail::cholesky_solve(a, F, b);
        for (std::size_t p = 0; p < F; ++p)
            fit.intercept -= fit.coefficients[p] * mx[p];
    }
    std::vector<double> pred(n);
    for (std::size_t i = 0; i < n; ++i)
    {
        double v = fit.intercept;
        for (std::size_t p = 0; p < F; ++p)
            v += fit.coefficients[p] * data.x[i][p];
        pred[i] = v;
    }
    fit.r2 = r_squared(data.y, pred);
    return fit;
}

double linear_baseline_r2(const AttributionDataset &data)
{
    return linear_baseline(data).r2;
}

// ---------------------------------------------------------------------------
// Consensus

ImportanceReport consensus_ranking(const std::vector<ImportanceReport> &reports)
{
    if (reports.empty())
        throw std::invalid_argument("consensus needs at least one report");
    const auto &first = reports.front().features;
    for (const auto &r : reports)
    {
        if (r.features.size() != first.size())
            throw std::invalid_argument("consensus: reports cover different features");
        for (std::size_t j = 0; j < first.size(); ++j)
            if (r.features[j].name != first[j].name)
                throw std::invalid_argument("consensus: feature mismatch '" + r.features[j].name + "' vs '" +
                                            first[j].name + "'");
    }
    ImportanceReport out;
    out.method = ImportanceMethod::Consensus;
    for (std::size_t j = 0; j < first.size(); ++j)
    {
        FeatureImportance f;
        f.name = first[j].name;
        f.ci_low = INFINITY;
        f.ci_high = -INFINITY;
        for (const auto &r : reports)
        {
            f.importance += r.features[j].pct;
            f.ci_low = std::min(f.ci_low, r.features[j].pct);
            f.ci_high = std::max(f.ci_high, r.features[j].pct);
        }
        f.importance /= static_cast<double>(reports.size());
        out.features.push_back(std::move(f));
    }
    normalize_percentages(out);
    return out;
}

AnalysisReport analyze(const AttributionDataset &data, const AnalysisOptions &opts)
{
    AnalysisReport r;
    r.n_rows = data.rows();
    const ForestModel forest = fit_random_forest(data, opts.forest);
    r.impurity = bootstrap_importance_ci(data, opts.n_boot, opts.forest);
    r.permutation = permutation_importance(forest, data, opts.n_repeats, opts.forest.seed);
    r.shapley = shapley_importance(forest, data, opts.forest.seed);
    r.consensus = consensus_ranking({r.impurity, r.permutation, r.shapley});
    const auto pred = forest.predict_all(data.x);
    r.forest_r2 = r_squared(data.y, pred);
    r.linear = linear_baseline(data);
    return r;
}

// ---------------------------------------------------------------------------
// Rank statistics

std::vector<double> average_ranks(std::span<const double> v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();)
    {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
            ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("pearson: need two equal-length samples of size >= 2");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
    {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0))
        return 0.0;
    return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b)
{
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return pearson(ra, rb);
}

double kendall_tau(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("kendall_tau: need two equal-length samples of size >= 2");
    double concordant = 0.0, discordant = 0.0, ties_a = 0.0, ties_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j)
        {
            const double da = a[i] - a[j];
            const double db = b[i] - b[j];
            if (da == 0.0 && db == 0.0)
                continue;
            if (da == 0.0)
                ties_a += 1.0;
            else if (db == 0.0)
                ties_b += 1.0;
            else if ((da > 0) == (db > 0))
                concordant += 1.0;
            else
                discordant += 1.0;
        }
    const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
    return denom > 0.0 ? (concordant - discordant) / denom : 0.0;
}

} // namespace mmq
