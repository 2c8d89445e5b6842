#pragma once

#include "mmq/experiments.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mmq
{

/// Score regressed on per-component bits (unquantized = 16).
struct AttributionDataset
{
    std::vector<std::string> feature_names;
    std::vector<std::vector<double>> x; // rows × features
    std::vector<double> y;
    std::vector<std::string> run_ids;

    std::size_t rows() const noexcept { return y.size(); }
    std::size_t features() const noexcept { return feature_names.size(); }
    void validate() const;
};

/// One row per RunRecord of `task` (optionally one method). Components whose
/// bits never vary in the slice are dropped.
AttributionDataset dataset_from_results(const std::vector<RunRecord> &rows, TaskKind task,
                                        std::optional<QuantMethod> method = std::nullopt);

struct TreeNode
{
    int feature = -1; // -1: leaf
    double threshold = 0.0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    double value = 0.0;
    std::size_t count = 0;
};

struct RegressionTree
{
    std::vector<TreeNode> nodes;
    /// Σ over splits on feature j of (parent SSE − child SSEs) / training rows.
    std::vector<double> impurity_decrease;

    double predict(std::span<const double> x) const;
    std::size_t leaf_count() const noexcept;
};

struct ForestOptions
{
    std::size_t n_trees = 100;
    std::size_t min_leaf = 2;
    bool bootstrap = true;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct ForestModel
{
    std::vector<RegressionTree> trees;
    std::vector<std::uint64_t> tree_seeds;
    std::size_t n_features = 0;

    double predict(std::span<const double> x) const;
    std::vector<double> predict_all(const std::vector<std::vector<double>> &x) const;
};

inline constexpr std::size_t kMinForestRows = 10;

ForestModel fit_random_forest(const AttributionDataset &data, const ForestOptions &opts = {});

/// Fits one tree on the given row indices (duplicates allowed).
RegressionTree fit_tree(const AttributionDataset &data, std::span<const std::size_t> rows, std::size_t min_leaf);

enum class ImportanceMethod
{
    Impurity,
    Permutation,
    Shapley,
    Consensus,
};
std::string_view to_string(ImportanceMethod m) noexcept;

struct FeatureImportance
{
    std::string name;
    double importance = 0.0; // raw, method units
    double ci_low = 0.0;
    double ci_high = 0.0;
    double pct = 0.0; // share of the clamped importances, in percent
};

struct ImportanceReport
{
    ImportanceMethod method = ImportanceMethod::Impurity;
    std::vector<FeatureImportance> features;
    /// All importances zero: percentages are reported as uniform.
    bool degenerate = false;

    /// Feature names ordered by descending pct (ties by name order).
    std::vector<std::string> ranking() const;
};

/// Fills pct from max(importance, 0); uniform with the degenerate flag when
/// everything is zero.
void normalize_percentages(ImportanceReport &report);

ImportanceReport impurity_importance(const ForestModel &forest, const std::vector<std::string> &names);

/// Point estimate from a forest fit on the full data; CI = 2.5/97.5
/// percentiles of impurity importance over forests refit on row resamples.
ImportanceReport bootstrap_importance_ci(const AttributionDataset &data, std::size_t n_boot = 100,
                                         const ForestOptions &opts = {});

/// Mean MSE increase over n_repeats shuffles of each column; CI from the
/// per-repeat increases.
ImportanceReport permutation_importance(const ForestModel &forest, const AttributionDataset &data,
                                        std::size_t n_repeats = 50, std::uint64_t seed = 0);

inline constexpr std::size_t kMaxExactShapleyFeatures = 8;

/// Exact interventional Shapley values (rows × features) with the full
/// dataset as background.
std::vector<std::vector<double>> shapley_values(const ForestModel &forest, const AttributionDataset &data);

/// Global importance = mean |φ_j|; CI from a row bootstrap of |φ_j|.
ImportanceReport shapley_importance(const ForestModel &forest, const AttributionDataset &data,
                                    std::uint64_t seed = 0);

struct LinearFit
{
    double r2 = 0.0;
    double intercept = 0.0;
    std::vector<double> coefficients;
    bool rank_deficient = false;
};

inline constexpr std::size_t kMinLinearRows = 4;

/// OLS with intercept via damped normal equations.
LinearFit linear_baseline(const AttributionDataset &data);
double linear_baseline_r2(const AttributionDataset &data);

/// Training R² of any predictions against y (0 when y is constant).
double r_squared(std::span<const double> y, std::span<const double> prediction);

ImportanceReport consensus_ranking(const std::vector<ImportanceReport> &reports);

struct AnalysisOptions
{
    ForestOptions forest;
    std::size_t n_boot = 100;
    std::size_t n_repeats = 50;
};

struct AnalysisReport
{
    std::string model;
    std::string method;
    TaskKind task = TaskKind::Caption;
    std::size_t n_rows = 0;
    ImportanceReport impurity;
    ImportanceReport permutation;
    ImportanceReport shapley;
    ImportanceReport consensus;
    double forest_r2 = 0.0;
    LinearFit linear;
};

AnalysisReport analyze(const AttributionDataset &data, const AnalysisOptions &opts = {});

/// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> v);
double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);
/// Kendall's tau-b.
double kendall_tau(std::span<const double> a, std::span<const double> b);

/// Linear-interpolated percentile, p in [0, 100].
double percentile(std::vector<double> v, double p);

} // namespace mmq
