#pragma once

#include "mmq/importance.hpp"

#include <string>
#include <vector>

namespace mmq
{

/// {task, model, method, n_rows, reports: [{method, features: [{name,
/// importance, ci_low, ci_high, pct}], degenerate}], forest_r2,
/// linear: {r2, rank_deficient, intercept, coefficients}}
std::string analysis_to_json(const AnalysisReport &report);

inline constexpr const char *kConsensusHeader = "Model,Method,Task,Vision,Connector,Language";

/// Consensus percentages with two decimals, rounded by largest remainder so
/// the printed values sum to exactly 100.00. Absent components print "--".
std::string consensus_csv_row(const AnalysisReport &report);
std::string consensus_csv(const std::vector<AnalysisReport> &reports);

/// Largest-remainder rounding of percentages to `decimals` places; the
/// rounded values keep the rounded total of the inputs.
std::vector<double> round_percentages(const std::vector<double> &pct, int decimals = 2);

} // namespace mmq
