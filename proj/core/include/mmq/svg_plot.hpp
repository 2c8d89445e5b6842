#pragma once

#include "mmq/experiments.hpp"

#include <string>
#include <vector>

namespace mmq
{

/// Score-vs-bpw scatter for one task: one <circle> per row colored by method,
/// the Pareto frontier as a <polyline>, and a star <polygon> on every
/// full-pipeline 8/16-bit cell. Throws std::invalid_argument when the task
/// has no rows.
std::string render_tradeoff_svg(const std::vector<RunRecord> &rows, TaskKind task);

} // namespace mmq
